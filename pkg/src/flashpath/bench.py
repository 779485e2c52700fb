"""Wall-clock comparison of the inference engines on synthetic cores."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

from threadpoolctl import threadpool_limits

from .inference import ENGINES, count_patches_dense, count_patches_flash, infer_mask
from .network import FEATURE_SIZE, PATCH_SIZE, Model
from .synth_data import SynthSpec, generate_core

# published reference timings (seconds): FLASH 96.65, dense 9489.2
REFERENCE_FOOTER = "# reference ratio 9489.2/96.65≈98.2"
STRIDED_DEFAULT = PATCH_SIZE

COLUMNS = ("engine", "image_side", "repeats", "mean_seconds", "std_seconds",
           "conv_stack_invocations", "classifier_head_invocations", "speedup_vs_dense")


@dataclass
class BenchRow:
    engine: str
    image_side: int
    repeats: int
    mean_seconds: float
    std_seconds: float
    conv_stack_invocations: int
    classifier_head_invocations: int
    speedup_vs_dense: float | None = None


@dataclass
class BenchReport:
    rows: list[BenchRow]
    threads: int

    def row(self, engine: str, side: int) -> BenchRow:
        for r in self.rows:
            if r.engine == engine and r.image_side == side:
                return r
        raise KeyError((engine, side))


def expected_invocations(engine: str, side: int, stride: int | None = None) -> tuple[int, int]:
    """``(conv_stack, classifier_head)`` executions predicted by the count formulas."""
    if engine == "flash":
        t = side // PATCH_SIZE
        return count_patches_flash(side), (FEATURE_SIZE * t - FEATURE_SIZE + 1) ** 2
    if engine == "dense" and (stride or 1) == 1:
        n = count_patches_dense(side)
        return n, n
    s = stride or (1 if engine == "dense" else STRIDED_DEFAULT)
    n = ((side - PATCH_SIZE) // s + 1) ** 2
    return n, n


def run_bench(model: Model, sizes: Sequence[int], engines: Sequence[str], repeats: int = 3,
              threads: int = 1, seed: int = 0, log=None) -> BenchReport:
    """Time every (engine, size) pair: one discarded warm-up run, then ``repeats`` timed runs.

    With ``threads == 1`` the BLAS pool is also pinned to one thread.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    for e in engines:
        if e not in ENGINES:
            raise ValueError(f"unknown engine {e!r}; expected one of {ENGINES}")
    rows = []
    with threadpool_limits(limits=threads):
        for side in sizes:
            image, _ = generate_core(SynthSpec(seed=seed, side=side))
            for engine in engines:
                infer_mask(model, image, engine, threads=threads)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    _, _, grid = infer_mask(model, image, engine, threads=threads)
                    times.append(time.perf_counter() - t0)
                want = expected_invocations(engine, side)
                got = (grid.conv_calls, grid.head_calls)
                if got != want:
                    raise RuntimeError(f"{engine} at {side}: invocations {got} != formula {want}")
                rows.append(BenchRow(engine, side, repeats, statistics.mean(times),
                                     statistics.stdev(times), *got))
                if log:
                    log(f"{engine:8s} {side:5d}  {rows[-1].mean_seconds:.4f} s "
                        f"+/- {rows[-1].std_seconds:.4f}")
    for r in rows:
        dense = [d for d in rows if d.engine == "dense" and d.image_side == r.image_side]
        if dense:
            r.speedup_vs_dense = dense[0].mean_seconds / r.mean_seconds
    return BenchReport(rows, threads)


def write_bench_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in report.rows:
            w.writerow([r.engine, r.image_side, r.repeats, f"{r.mean_seconds:.6f}",
                        f"{r.std_seconds:.6f}", r.conv_stack_invocations,
                        r.classifier_head_invocations,
                        "" if r.speedup_vs_dense is None else f"{r.speedup_vs_dense:.3f}"])
        fh.write(f"# threads {report.threads}\n")
        fh.write(REFERENCE_FOOTER + "\n")
