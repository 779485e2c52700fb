"""End-to-end recipes shared by the command line, the demos and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import CoreMetrics, auc_trapezoid, evaluate_core, pooled_roc
from .inference import infer_mask
from .network import Model, build_model
from .synth_data import SynthSpec, generate_core, generate_training_cores, generate_training_regions
from .trainer import EpochStats, PatchDataset, build_dataset, center_patches_from_cores, train


@dataclass(frozen=True)
class TrainingRecipe:
    """Synthetic training set: augmented pure regions plus center-labeled core patches.

    Pure regions teach the two textures; patches sampled from mixed cores
    (half of them near class boundaries) teach the classifier to answer for
    the patch center, which is what thin structures need.
    """

    seed: int = 0
    regions_per_class: tuple[int, int] = (40, 40)
    cores: int = 12
    patches_per_core: int = 300
    cord_count: int = 10
    crops_per_angle: int = 3
    epochs: int = 50
    batch_size: int = 128

    def patch_count(self) -> int:
        return sum(self.regions_per_class) * 12 * self.crops_per_angle + self.cores * self.patches_per_core


def build_training_set(recipe: TrainingRecipe) -> PatchDataset:
    spec = SynthSpec(seed=recipe.seed)
    regions = generate_training_regions(spec, recipe.regions_per_class)
    cores = generate_training_cores(spec, recipe.cores, recipe.cord_count)
    extra = center_patches_from_cores(cores, recipe.patches_per_core, recipe.seed)
    return build_dataset(regions, crops_per_angle=recipe.crops_per_angle, seed=recipe.seed,
                         extra=extra)


def train_recipe(recipe: TrainingRecipe, on_epoch=None) -> tuple[Model, list[EpochStats], PatchDataset]:
    data = build_training_set(recipe)
    model = build_model(recipe.seed)
    model, history = train(model, data, recipe.epochs, recipe.batch_size, seed=recipe.seed,
                           on_epoch=on_epoch)
    return model, history, data


# held-out evaluation cores use seeds from a range no training stream draws from
EVAL_SEED_BASE = 9000


def evaluation_cores(count: int = 10, side: int = 512, seed_base: int = EVAL_SEED_BASE):
    """``count`` mixed cores with tumor fractions spread over [0.25, 0.55]."""
    fracs = np.linspace(0.25, 0.55, count) if count > 1 else [0.4]
    return [generate_core(SynthSpec(seed=seed_base + i, side=side, tumor_fraction=float(f)))
            for i, f in enumerate(fracs)]


@dataclass
class EngineResult:
    engine: str
    records: list[CoreMetrics] = field(default_factory=list)
    prob_maps: list[np.ndarray] = field(default_factory=list)
    seconds: float = 0.0
    pooled_auc: float = float("nan")

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r.f1 for r in self.records]))


def evaluate_engine(model: Model, cores, engine: str, stride: int | None = None,
                    threads: int = 1) -> EngineResult:
    res = EngineResult(engine)
    gts = []
    for i, (image, gt) in enumerate(cores):
        t0 = time.perf_counter()
        mask, prob, _ = infer_mask(model, image, engine, stride, threads)
        res.seconds += time.perf_counter() - t0
        res.records.append(evaluate_core(mask, prob, gt, f"core{i:02d}"))
        res.prob_maps.append(prob)
        gts.append(gt)
    res.pooled_auc = auc_trapezoid(pooled_roc(res.prob_maps, gts))
    return res
