"""``flashpath`` command line.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from .evaluation import evaluate_core, roc_curve, write_metrics_csv, write_roc_csv
from .inference import ENGINES, infer_mask
from .network import NON_TUMOR, TUMOR, build_model
from .storage_io import (load_model, read_image, read_mask, read_prob_map, save_model,
                         write_image, write_mask, write_prob_map)
from .synth_data import SynthSpec, generate_core, generate_training_cores, generate_training_regions
from .trainer import (DEFAULT_BATCH, DEFAULT_CROPS_PER_ANGLE, DEFAULT_LR, DEFAULT_MOMENTUM,
                      LabeledRegion, OptimizerState, build_dataset, center_patches_from_cores, train,
                      write_history_csv)


class UsageError(Exception):
    """Invalid arguments or inputs; reported with exit code 2."""


def _threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("FLASH_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"FLASH_THREADS must be an integer, got {env!r}") from None
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise UsageError(f"thread count must be >= 1, got {value}")
    return value


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None


def cmd_generate(a) -> None:
    if not 0 <= a.tumor_fraction <= 1:
        raise UsageError(f"--tumor-fraction must be in [0, 1], got {a.tumor_fraction}")
    if a.size < 64:
        raise UsageError(f"--size must be >= 64, got {a.size}")
    if a.cores < 1:
        raise UsageError(f"--cores must be >= 1, got {a.cores}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(a.cores):
        seed = a.seed + i
        image, mask = generate_core(SynthSpec(seed=seed, side=a.size, tumor_fraction=a.tumor_fraction))
        name = f"core_{i:03d}"
        write_image(image, out / f"{name}.png")
        write_mask(mask, out / f"{name}_mask.png")
        rows.append([f"{name}.png", f"{name}_mask.png", f"{a.tumor_fraction:g}", seed])
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "mask", "tumor_fraction", "seed"])
        w.writerows(rows)
    print(f"wrote {a.cores} cores to {out}")


def cmd_generate_train(a) -> None:
    if a.regions_tumor < 1 or a.regions_normal < 1:
        raise UsageError("--regions-tumor and --regions-normal must be >= 1")
    if a.cores < 0:
        raise UsageError(f"--cores must be >= 0, got {a.cores}")
    out = Path(a.out)
    (out / "regions").mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(seed=a.seed)
    regions = generate_training_regions(spec, (a.regions_normal, a.regions_tumor))
    rows, counters = [], {NON_TUMOR: 0, TUMOR: 0}
    for r in regions:
        tag = "tumor" if r.label == TUMOR else "normal"
        name = f"regions/{tag}_{counters[r.label]:04d}.png"
        counters[r.label] += 1
        write_image(r.image, out / name)
        rows.append([name, tag, a.seed])
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label", "seed"])
        w.writerows(rows)
    if a.cores:
        (out / "cores").mkdir(exist_ok=True)
        crows = []
        for i, (image, mask) in enumerate(generate_training_cores(spec, a.cores, a.cord_count)):
            name = f"cores/core_{i:03d}"
            write_image(image, out / f"{name}.png")
            write_mask(mask, out / f"{name}_mask.png")
            crows.append([f"{name}.png", f"{name}_mask.png", f"{mask.mean():.6f}", a.seed])
        with open(out / "cores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "mask", "tumor_fraction", "seed"])
            w.writerows(crows)
    print(f"wrote {len(regions)} regions and {a.cores} cores to {out}")


def _read_training_dir(data: Path):
    manifest = data / "manifest.csv"
    if not manifest.is_file():
        raise UsageError(f"{data} has no manifest.csv (create one with generate-train)")
    regions = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            label = {"tumor": TUMOR, "normal": NON_TUMOR, "1": TUMOR, "0": NON_TUMOR}.get(row["label"])
            if label is None:
                raise UsageError(f"{manifest}: unknown label {row['label']!r}")
            try:
                regions.append(LabeledRegion(read_image(data / row["file"]), label))
            except ValueError as e:
                raise UsageError(f"{manifest}: {row['file']}: {e}") from None
    cores = []
    if (data / "cores.csv").is_file():
        with open(data / "cores.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                cores.append((read_image(data / row["file"]), read_mask(data / row["mask"])))
    return regions, cores


def cmd_train(a) -> None:
    data = Path(a.data)
    if not data.is_dir():
        raise UsageError(f"training data directory not found: {data}")
    if a.epochs < 1 or a.batch < 1:
        raise UsageError("--epochs and --batch must be >= 1")
    if a.lr <= 0 or not 0 <= a.momentum < 1:
        raise UsageError("--lr must be > 0 and --momentum in [0, 1)")
    regions, cores = _read_training_dir(data)
    extra = center_patches_from_cores(cores, a.patches_per_core, a.seed) if cores else None
    try:
        ds = build_dataset(regions, crops_per_angle=a.crops_per_angle, seed=a.seed, extra=extra)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"lr={a.lr:g} momentum={a.momentum:g} batch={a.batch} epochs={a.epochs} "
          f"seed={a.seed} patches={len(ds)}")
    model = build_model(a.seed)
    state = OptimizerState.for_model(model, a.lr, a.momentum)

    def report(s):
        print(f"epoch {s.epoch:4d}  loss {s.mean_loss:.4f}  train {s.train_acc:.4f}  "
              f"val {s.val_acc:.4f}", flush=True)

    model, history = train(model, ds, a.epochs, a.batch, state, seed=a.seed, on_epoch=report)
    save_model(model, a.out)
    write_history_csv(history, a.history)
    print(f"wrote {a.out} and {a.history}")


def cmd_infer(a) -> None:
    if a.engine == "flash" and a.stride is not None:
        raise UsageError("--stride does not apply to the flash engine")
    if a.stride is not None and not 1 <= a.stride <= 32:
        raise UsageError(f"--stride must be in [1, 32], got {a.stride}")
    model = load_model(_existing(a.model, "model"))
    image = read_image(_existing(a.image, "image"))
    if min(image.shape[:2]) < model.patch_size:
        raise UsageError(f"image {image.shape[0]}x{image.shape[1]} is smaller than the "
                         f"{model.patch_size}x{model.patch_size} window")
    threads = _threads(a.threads)
    t0 = time.perf_counter()
    mask, prob, grid = infer_mask(model, image, a.engine, a.stride, threads)
    dt = time.perf_counter() - t0
    write_mask(mask, a.out_mask)
    write_prob_map(prob, a.out_prob)
    print(f"engine={a.engine} stride={grid.stride} sites={grid.labels.size} "
          f"conv_invocations={grid.conv_calls} head_invocations={grid.head_calls} "
          f"threads={threads} seconds={dt:.4f}")


def cmd_eval(a) -> None:
    pred = read_mask(_existing(a.pred, "prediction mask"))
    gt = read_mask(_existing(a.gt, "ground-truth mask"))
    prob = read_prob_map(_existing(a.prob, "probability map"))
    size = lambda x: f"{x.shape[0]}x{x.shape[1]}"  # noqa: E731
    if pred.shape != gt.shape:
        raise UsageError(f"prediction is {size(pred)} but ground truth is {size(gt)}")
    if prob.shape != gt.shape:
        raise UsageError(f"probability map is {size(prob)} but ground truth is {size(gt)}")
    rec = evaluate_core(pred, prob, gt, Path(a.pred).stem)
    write_metrics_csv([rec], a.out)
    if gt.any() and not gt.all():
        write_roc_csv(roc_curve(prob, gt), a.roc)
    else:
        print("ground truth has a single class; ROC not written", file=sys.stderr)
    print(f"sensitivity={rec.sensitivity:.4f} precision={rec.precision:.4f} f1={rec.f1:.4f} "
          f"specificity={rec.specificity:.4f} auc={rec.auc:.4f}")


def cmd_bench(a) -> None:
    engines = [e.strip() for e in a.engines.split(",") if e.strip()]
    for e in engines:
        if e not in ENGINES:
            raise UsageError(f"unknown engine {e!r}; expected one of {', '.join(ENGINES)}")
    sizes = _int_list(a.sizes, "--sizes")
    if not sizes or min(sizes) < 64:
        raise UsageError("--sizes must list image sides >= 64")
    if a.repeats < 3:
        raise UsageError(f"--repeats must be >= 3, got {a.repeats}")
    threads = _threads(a.threads)
    model = load_model(_existing(a.model, "model")) if a.model else build_model(a.seed)
    report = bench_mod.run_bench(model, sizes, engines, a.repeats, threads, a.seed, log=print)
    bench_mod.write_bench_csv(report, a.out)
    for r in report.rows:
        sp = "" if r.speedup_vs_dense is None else f"  speedup {r.speedup_vs_dense:.1f}x"
        print(f"{r.engine} {r.image_side}: conv {r.conv_stack_invocations} "
              f"head {r.classifier_head_invocations}{sp}")
    print(bench_mod.REFERENCE_FOOTER)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flashpath", description="Tumor region detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthetic evaluation cores with masks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cores", type=int, required=True)
    g.add_argument("--size", type=int, default=512)
    g.add_argument("--tumor-fraction", type=float, default=0.4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate, parser=g)

    gt = sub.add_parser("generate-train", help="pure-class training regions plus mixed cores")
    gt.add_argument("--regions-tumor", type=int, required=True)
    gt.add_argument("--regions-normal", type=int, required=True)
    gt.add_argument("--cores", type=int, default=12, help="mixed cores for center-labeled patches")
    gt.add_argument("--cord-count", type=int, default=10)
    gt.add_argument("--seed", type=int, default=0)
    gt.add_argument("--out", required=True)
    gt.set_defaults(func=cmd_generate_train, parser=gt)

    t = sub.add_parser("train", help="train a model on a generate-train directory")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--lr", type=float, default=DEFAULT_LR)
    t.add_argument("--momentum", type=float, default=DEFAULT_MOMENTUM)
    t.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--crops-per-angle", type=int, default=DEFAULT_CROPS_PER_ANGLE)
    t.add_argument("--patches-per-core", type=int, default=300)
    t.add_argument("--out", required=True)
    t.add_argument("--history", required=True)
    t.set_defaults(func=cmd_train, parser=t)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--engine", choices=ENGINES, required=True)
    i.add_argument("--stride", type=int)
    i.add_argument("--threads", type=int)
    i.add_argument("--out-mask", required=True)
    i.add_argument("--out-prob", required=True)
    i.set_defaults(func=cmd_infer, parser=i)

    e = sub.add_parser("eval", help="pixel metrics and ROC for one prediction")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--prob", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--roc", required=True)
    e.set_defaults(func=cmd_eval, parser=e)

    b = sub.add_parser("bench", help="time the engines")
    b.add_argument("--model", help="checkpoint; a seeded untrained model when omitted")
    b.add_argument("--sizes", default="256,512,1024")
    b.add_argument("--engines", default="dense,flash")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--threads", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench, parser=b)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
    except UsageError as e:
        sys.stderr.write(args.parser.format_usage())
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"{parser.prog} {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
