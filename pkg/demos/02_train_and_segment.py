"""Train a detector on synthetic tissue, then segment a held-out core three ways.

Run: python demos/02_train_and_segment.py [epochs]    (default 10; the tests use 50)
Writes its outputs to demos/out/.
"""

import sys
import time
from pathlib import Path

from flashpath.evaluation import write_metrics_csv
from flashpath.inference import infer_mask
from flashpath.pipeline import TrainingRecipe, evaluate_engine, evaluation_cores, train_recipe
from flashpath.storage_io import save_model, write_image, write_mask
from flashpath.synth_data import SynthSpec, generate_band_core

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

recipe = TrainingRecipe(epochs=epochs)
print(f"training on ~{recipe.patch_count()} patches for {epochs} epochs")
t0 = time.perf_counter()
model, history, _ = train_recipe(
    recipe, on_epoch=lambda s: print(f"  epoch {s.epoch:3d} loss {s.mean_loss:.3f} val {s.val_acc:.3f}"))
print(f"trained in {time.perf_counter() - t0:.0f} s")
save_model(model, out / "model.flsh")

# One held-out core; the dense engine is the slow one.
cores = evaluation_cores(1, 512)
write_image(cores[0][0], out / "core.png")
write_mask(cores[0][1], out / "core_truth.png")
for engine, stride in (("flash", None), ("strided", 32), ("dense", 1)):
    res = evaluate_engine(model, cores, engine, stride)
    r = res.records[0]
    print(f"{engine:8s} {res.seconds:7.2f} s  sens {r.sensitivity:.3f} prec {r.precision:.3f} "
          f"f1 {r.f1:.3f} auc {r.auc:.3f}")
    write_metrics_csv(res.records, out / f"metrics_{engine}.csv")

# A thin band shows what coarse striding loses.
image, gt = generate_band_core(SynthSpec(seed=5), band_start=211)
for engine, stride in (("strided", 32), ("flash", None)):
    mask, _, _ = infer_mask(model, image, engine, stride)
    write_mask(mask, out / f"band_{engine}.png")
    print(f"band sensitivity {engine:8s} {mask[gt].mean():.3f}")
