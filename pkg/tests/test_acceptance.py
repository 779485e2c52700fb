"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trained-model criteria (5, 6) share the session ``trained`` fixture.
"""

import math
import time
from fractions import Fraction

import numpy as np
from threadpoolctl import threadpool_limits

from flashpath.evaluation import (ConfusionCounts, RocCurve, aggregate, auc_trapezoid, evaluate_core,
                                  f1, precision, roc_curve, sensitivity, specificity)
from flashpath.inference import (count_patches_dense, count_patches_flash, dense_infer, flash_infer,
                                 grid_to_mask, infer_mask)
from flashpath.network import backward_patch, build_model, forward_patch
from flashpath.pipeline import evaluate_engine, evaluation_cores
from flashpath.storage_io import model_from_bytes, model_to_bytes
from flashpath.synth_data import SynthSpec, generate_band_core, generate_core
from flashpath.tensor_core import (ConvKernel, DenseWeights, conv2d_backward, conv2d_forward,
                                   fc_backward, fc_forward, maxpool2x2_backward, maxpool2x2_forward,
                                   relu_backward, relu_forward)
from flashpath.trainer import ROTATION_ANGLES, LabeledRegion, build_dataset, train

from gradcheck import numeric_grad, rel_error

BAND_START = 211
BAND_WIDTH = 8


def test_criterion_1_tile_aligned_equivalence(verdict):
    t0 = time.perf_counter()
    worst, agree, sites = 0.0, 0, 0
    for seed in range(50):
        m = build_model(seed)
        image, _ = generate_core(SynthSpec(seed=1000 + seed, side=128))
        fl = flash_infer(m, image)
        ds = dense_infer(m, image, 32)
        a = fl.logits[::8, ::8].astype(np.float64)
        b = ds.logits.astype(np.float64)
        rel = np.abs(a - b).max(-1) / np.maximum(np.abs(b).max(-1), 1e-12)
        worst = max(worst, float(rel.max()))
        agree += int((a.argmax(-1) == b.argmax(-1)).sum())
        sites += a.shape[0] * a.shape[1]
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and agree == sites and dt <= 120
    verdict(1, "FLASH tile-aligned logits equal dense logits", ok,
            f"max rel err {worst:.2e}, argmax agreement {agree}/{sites}, {dt:.1f} s")


def _grad_errors():
    rng = np.random.default_rng(0)
    errs = {}

    x = rng.standard_normal((6, 6, 2))
    k = ConvKernel(rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3))
    r = rng.standard_normal((6, 6, 3))
    f = lambda: float((conv2d_forward(x, k) * r).sum())  # noqa: E731
    gi, gw, gb = conv2d_backward(x, k, r)
    errs["conv input"] = rel_error(gi, numeric_grad(f, x))
    errs["conv weights"] = rel_error(gw, numeric_grad(f, k.weights))
    errs["conv bias"] = rel_error(gb, numeric_grad(f, k.bias))

    x = rng.standard_normal((6, 4, 3))
    r = rng.standard_normal((3, 2, 3))
    _, arg = maxpool2x2_forward(x)
    errs["maxpool"] = rel_error(maxpool2x2_backward(arg, r),
                                numeric_grad(lambda: float((maxpool2x2_forward(x)[0] * r).sum()), x))

    x = rng.standard_normal((5, 5, 2))
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.standard_normal(x.shape)
    errs["relu"] = rel_error(relu_backward(x, r),
                             numeric_grad(lambda: float((relu_forward(x) * r).sum()), x))

    d = DenseWeights(rng.standard_normal((7, 3)), rng.standard_normal(3))
    x = rng.standard_normal((4, 7))
    r = rng.standard_normal((4, 3))
    f = lambda: float((fc_forward(x, d) * r).sum())  # noqa: E731
    gi, gw, gb = fc_backward(x, d, r)
    errs["fc input"] = rel_error(gi, numeric_grad(f, x))
    errs["fc weights"] = rel_error(gw, numeric_grad(f, d.weights))
    errs["fc bias"] = rel_error(gb, numeric_grad(f, d.bias))

    m = build_model(3, widths=(2, 3, 4), hidden=5, patch_size=8, dtype=np.float64)
    for _, layer in m.layers():
        layer.bias[...] = rng.normal(0, 0.1, layer.bias.shape)
    m.mode = "train"
    patches = rng.random((3, 8, 8, 3))
    labels = np.array([1, 0, 1])

    def loss():
        out = forward_patch(m, patches, rng=np.random.default_rng(7))
        return float(-np.log(out.probs[np.arange(3), labels]).mean())

    grads = backward_patch(m, forward_patch(m, patches, rng=np.random.default_rng(7)).cache, labels)
    for name, p in m.parameters():
        errs[f"network {name}"] = rel_error(grads[name], numeric_grad(loss, p))
    return errs


def test_criterion_2_gradient_correctness(verdict):
    t0 = time.perf_counter()
    errs = _grad_errors()
    dt = time.perf_counter() - t0
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    verdict(2, "finite-difference gradient checks (float64)", worst <= 1e-4 and dt <= 60,
            f"{len(errs)} checks, worst {worst:.2e} ({name}), {dt:.1f} s")


def test_criterion_3_speedup(verdict):
    t0 = time.perf_counter()
    m = build_model(0)
    image, _ = generate_core(SynthSpec(seed=3, side=512))
    with threadpool_limits(limits=1):
        flash_times = []
        for _ in range(3):
            s = time.perf_counter()
            fg = flash_infer(m, image, threads=1)
            flash_times.append(time.perf_counter() - s)
        s = time.perf_counter()
        dg = dense_infer(m, image, 1, threads=1)
        dense_time = time.perf_counter() - s
    flash_time = float(np.mean(flash_times))
    ratio = Fraction(dg.conv_calls, fg.conv_calls)
    ok = (flash_time <= dense_time / 20 and ratio == Fraction(231_361, 256)
          and time.perf_counter() - t0 <= 600)
    verdict(3, "FLASH at most 1/20 of dense wall time on 512x512, single thread", ok,
            f"dense {dense_time:.2f} s, flash {flash_time:.3f} s, wall ratio "
            f"{dense_time / flash_time:.1f}x, conv ratio {dg.conv_calls}/{fg.conv_calls} "
            f"= {float(ratio):.1f}")


def test_criterion_4_count_formulas(verdict):
    cases = {(32, 32): (1, 1), (64, 32): (1089, 4), (300, 32): (72_361, 81),
             (2048, 32): (4_068_289, 4096)}
    got = {lw: (count_patches_dense(*lw), count_patches_flash(*lw)) for lw in cases}
    direct = {(l, w): ((l - w + 1) ** 2, (l // w) ** 2) for l, w in cases}
    verdict(4, "patch-count formulas", got == cases == direct,
            ", ".join(f"l={l}: {d}/{f}" for (l, _), (d, f) in got.items()))


def test_criterion_5_accuracy_parity(verdict, trained):
    t0 = time.perf_counter()
    m = trained["model"]
    cores = evaluation_cores(10, 512)
    with threadpool_limits(limits=1):
        dense = evaluate_engine(m, cores, "dense")
        flash = evaluate_engine(m, cores, "flash")
    total = trained["seconds"] + time.perf_counter() - t0
    d_auc, f_auc = dense.pooled_auc, flash.pooled_auc
    ok = (trained["patches"] >= 4000 and trained["recipe"].epochs == 50
          and d_auc >= 0.90 and f_auc >= 0.90 and abs(d_auc - f_auc) <= 0.02
          and abs(dense.mean_f1 - flash.mean_f1) <= 0.03 and total <= 1800)
    verdict(5, "FLASH and dense accuracy parity on 10 held-out cores", ok,
            f"{trained['patches']} patches x {trained['recipe'].epochs} epochs; pooled AUC dense "
            f"{d_auc:.4f} flash {f_auc:.4f}; mean F1 dense {dense.mean_f1:.4f} flash "
            f"{flash.mean_f1:.4f}; {total / 60:.1f} min")


def _band_sensitivity(m, start):
    image, gt = generate_band_core(SynthSpec(seed=5), start, BAND_WIDTH)
    s32, _, _ = infer_mask(m, image, "strided", 32)
    fl, _, _ = infer_mask(m, image, "flash")
    return float(s32[gt].mean()), float(fl[gt].mean())


def test_criterion_6_thin_band(verdict, trained):
    m = trained["model"]
    s32, fl = _band_sensitivity(m, BAND_START)
    # sweep every band phase within one tile, reported for context
    sweep = np.array([_band_sensitivity(m, 192 + p) for p in range(32)])
    verdict(6, "8 px band: stride-32 misses it, FLASH finds it", s32 < 0.5 and fl > 0.9,
            f"band at col {BAND_START}: s32 {s32:.3f}, flash {fl:.3f}; all 32 phases: s32 mean "
            f"{sweep[:, 0].mean():.3f} max {sweep[:, 0].max():.3f}, flash mean "
            f"{sweep[:, 1].mean():.3f} min {sweep[:, 1].min():.3f}")


def test_criterion_7_metric_formulas(verdict):
    checks = {
        "sens 0.9": sensitivity(ConfusionCounts(90, 0, 0, 10)) == 0.9,
        "f1 1": f1(ConfusionCounts(10, 0, 5, 0)) == 1.0,
        "f1 0.5": math.isclose(f1(ConfusionCounts(1, 1, 0, 1)), 0.5),
        "degenerate precision": precision(ConfusionCounts(0, 0, 4, 3)) == 0.0,
        "specificity": specificity(ConfusionCounts(0, 1, 3, 0)) == 0.75,
        "auc perfect": auc_trapezoid(RocCurve(np.array([0, 0, 1.0]), np.array([0, 1, 1.0]),
                                              np.array([1, 0.5, 0]))) == 1.0,
        "auc diagonal": auc_trapezoid(RocCurve(np.array([0, 1.0]), np.array([0, 1.0]),
                                               np.array([1, 0.0]))) == 0.5,
        "auc collinear": auc_trapezoid(RocCurve(np.array([0, 0.5, 1]), np.array([0, 0.5, 1]),
                                                np.array([1, 0.5, 0.0]))) == 0.5,
    }
    rng = np.random.default_rng(0)
    bound = True
    for _ in range(500):
        c = ConfusionCounts(*rng.integers(0, 40, 4).tolist())
        s, p = sensitivity(c), precision(c)
        bound &= min(s, p) - 1e-12 <= f1(c) <= max(s, p) + 1e-12
    checks["harmonic bound"] = bool(bound)
    scores = rng.random(100_000)
    labels = rng.random(100_000) < 0.5
    checks["random scores near diagonal"] = abs(auc_trapezoid(roc_curve(scores, labels)) - 0.5) < 0.01
    gt = np.zeros((10, 10), bool)
    gt[2:6] = True
    rec = evaluate_core(gt, gt.astype(float), gt)
    checks["identity record"] = (rec.sensitivity, rec.precision, rec.f1, rec.specificity,
                                 rec.auc) == (1, 1, 1, 1, 1)
    b = type(rec)("b", 0.9, 0.9, 0.9, 0.9, 0.9)
    mean, std = aggregate([rec, b])["f1"]
    checks["mean/std"] = math.isclose(mean, 0.95) and abs(std - 0.0707) < 1e-4
    failed = [k for k, v in checks.items() if not v]
    verdict(7, "metric formulas", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} checks" + (f", failed {failed}" if failed else ""))


def test_criterion_8_determinism_and_persistence(verdict):
    rng = np.random.default_rng(0)
    regions = [LabeledRegion(np.clip(c + rng.normal(0, 0.05, (300, 300, 3)), 0, 1).astype(np.float32), lab)
               for c, lab in (((0.8, 0.6, 0.5), 1), ((0.9, 0.8, 0.9), 0), ((0.7, 0.5, 0.4), 1),
                              ((0.85, 0.75, 0.85), 0))]
    ds = build_dataset(regions, angles=ROTATION_ANGLES[:6], crops_per_angle=4, seed=2)
    runs = [train(build_model(9), ds, epochs=2, batch_size=16, seed=9) for _ in range(2)]
    same_train = all(a.tobytes() == b.tobytes() for (_, a), (_, b) in
                     zip(runs[0][0].parameters(), runs[1][0].parameters()))
    same_train &= runs[0][1] == runs[1][1]

    m = runs[0][0]
    back = model_from_bytes(model_to_bytes(m))
    same_ckpt = all(a.tobytes() == b.tobytes() for (_, a), (_, b) in
                    zip(m.parameters(), back.parameters()))

    image, _ = generate_core(SynthSpec(seed=8, side=160))
    same_threads = True
    for engine in ("flash", "dense", "strided"):
        stride = 4 if engine == "dense" else None
        ref = infer_mask(m, image, engine, stride, threads=1)
        for threads in (2, 3, 8):
            out = infer_mask(m, image, engine, stride, threads=threads)
            same_threads &= (out[2].logits.tobytes() == ref[2].logits.tobytes()
                             and out[0].tobytes() == ref[0].tobytes()
                             and out[1].tobytes() == ref[1].tobytes())
    mask, _ = grid_to_mask(flash_infer(m, image), 160)
    verdict(8, "determinism, checkpoint round trip, thread invariance",
            same_train and same_ckpt and same_threads and mask.shape == (160, 160),
            f"training bit-identical {same_train}, checkpoint bit-exact {same_ckpt}, "
            f"threads 1/2/3/8 identical {same_threads}")


def test_training_loss_decreases_in_windows(trained):
    losses = np.array([h.mean_loss for h in trained["history"]])
    windows = losses[: len(losses) // 10 * 10].reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0), windows
