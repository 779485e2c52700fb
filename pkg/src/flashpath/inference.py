"""Image-level inference engines.

``dense_infer``
    Classifies the 32x32 patch at every ``stride``-th offset; each patch runs
    the whole network independently (mirror-padded on its own).
``strided_infer``
    ``dense_infer`` at a coarse stride followed by nearest-site upsampling.
``flash_infer``
    Runs the conv stack once per non-overlapping 32x32 tile, stitches the
    8x8x64 tile features into one map, then slides an 8x8 window over that
    map with stride 1 and feeds each window to the classifier head.

At window offsets that are multiples of 8 the feature window is exactly the
feature map of one tile, so the result equals the dense engine's output for
that tile. Elsewhere the window straddles tiles whose features were padded
independently; :func:`disagreement_report` measures how often that changes
the label.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import FEATURE_SIZE, PATCH_SIZE, Model, _features, _head_logits
from .tensor_core import softmax

ENGINES = ("dense", "strided", "flash")
# image pixels per feature cell after two 2x2 poolings
FEATURE_STRIDE = PATCH_SIZE // FEATURE_SIZE
_BATCH_PATCHES = 256


@dataclass
class InferenceConfig:
    side: int
    window: int = PATCH_SIZE
    stride: int = 1
    engine: str = "dense"

    def __post_init__(self):
        if self.window != PATCH_SIZE:
            raise ValueError(f"window must be {PATCH_SIZE}, got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise ValueError(f"stride must be in [1, {self.window}], got {self.stride}")
        if self.side < self.window:
            raise ValueError(f"image side {self.side} is smaller than the window {self.window}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")


@dataclass
class LabelGrid:
    """Per-site classification at image positions ``origin + stride * index``."""

    origin: tuple[int, int]
    stride: int
    labels: np.ndarray  # (rows, cols) int
    probs: np.ndarray  # (rows, cols) tumor probability
    logits: np.ndarray | None = None  # (rows, cols, 2)
    conv_calls: int = 0
    head_calls: int = 0

    def __post_init__(self):
        if self.labels.shape != self.probs.shape:
            raise ValueError(f"labels {self.labels.shape} and probs {self.probs.shape} differ")

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class FeatureGrid:
    tiles: tuple[int, int]
    data: np.ndarray  # (8 * tiles_h, 8 * tiles_w, 64)

    @property
    def tiles_per_side(self) -> int:
        return self.tiles[0]

    def block(self, a: int, b: int) -> np.ndarray:
        f = FEATURE_SIZE
        return self.data[f * a:f * a + f, f * b:f * b + f]


def count_patches_dense(l: int, w: int = PATCH_SIZE) -> int:
    """Overlapping windows at stride 1: ``(l - w + 1) ** 2``."""
    if w < 1 or l < w:
        raise ValueError(f"need l >= w >= 1, got l={l}, w={w}")
    return (l - w + 1) ** 2


def count_patches_flash(l: int, w: int = PATCH_SIZE) -> int:
    """Non-overlapping windows: ``floor(l / w) ** 2``."""
    if w < 1 or l < w:
        raise ValueError(f"need l >= w >= 1, got l={l}, w={w}")
    return (l // w) ** 2


def _check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (h, w, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValueError(f"image {h}x{w} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} window")
    return image


def _run(jobs, fn, threads: int):
    """Map ``fn`` over ``jobs`` preserving order; output never depends on ``threads``."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def _eval_logits(m: Model, patches: np.ndarray) -> np.ndarray:
    return _head_logits(m, _features(m, patches.astype(m.dtype, copy=False)))


def _grid(origin, stride, logits, conv_calls, head_calls) -> LabelGrid:
    probs = softmax(logits)
    return LabelGrid(origin, stride, probs.argmax(axis=-1), probs[..., 1], logits,
                     conv_calls, head_calls)


def dense_infer(m: Model, image: np.ndarray, stride: int = 1, threads: int = 1) -> LabelGrid:
    """Classify the patch at every offset ``(i*stride, j*stride)`` that fits in the image.

    Sites are anchored at patch centers: origin (16, 16), spacing ``stride``.
    """
    image = _check_image(image)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    p = PATCH_SIZE
    h, w = image.shape[:2]
    rows = np.arange(0, h - p + 1, stride)
    cols = np.arange(0, w - p + 1, stride)
    win = sliding_window_view(image, (p, p), axis=(0, 1))  # h', w', 3, p, p
    rows_per_job = max(1, _BATCH_PATCHES // len(cols))
    jobs = [rows[i:i + rows_per_job] for i in range(0, len(rows), rows_per_job)]

    def job(rs):
        batch = win[rs[:, None], cols[None, :]]  # r, c, 3, p, p
        batch = batch.transpose(0, 1, 3, 4, 2).reshape(-1, p, p, 3)
        return _eval_logits(m, np.ascontiguousarray(batch)).reshape(len(rs), len(cols), -1)

    logits = np.concatenate(_run(jobs, job, threads), axis=0)
    n = len(rows) * len(cols)
    return _grid((p // 2, p // 2), stride, logits, n, n)


def extract_aggregate_features(m: Model, image: np.ndarray, threads: int = 1) -> FeatureGrid:
    """Conv features of each non-overlapping tile, stitched at their tile positions.

    Pixels beyond the last full tile on the right and bottom are ignored.
    """
    image = _check_image(image)
    p, f = PATCH_SIZE, FEATURE_SIZE
    th, tw = image.shape[0] // p, image.shape[1] // p
    tiles = image[:th * p, :tw * p].reshape(th, p, tw, p, 3).transpose(0, 2, 1, 3, 4)
    tiles = tiles.reshape(th * tw, p, p, 3)
    jobs = [np.arange(i, min(i + _BATCH_PATCHES, th * tw)) for i in range(0, th * tw, _BATCH_PATCHES)]
    feats = np.concatenate(
        _run(jobs, lambda idx: _features(m, np.ascontiguousarray(tiles[idx]).astype(m.dtype)), threads)
    )
    c = feats.shape[-1]
    data = feats.reshape(th, tw, f, f, c).transpose(0, 2, 1, 3, 4).reshape(th * f, tw * f, c)
    return FeatureGrid((th, tw), np.ascontiguousarray(data))


def flash_infer(m: Model, image: np.ndarray, threads: int = 1,
                features: FeatureGrid | None = None) -> LabelGrid:
    """Tile features once, then classify every 8x8 feature window at stride 1.

    Feature offset ``(i, j)`` covers image rows ``4i .. 4i+31``; sites are
    anchored at origin (16, 16) with spacing 4.
    """
    image = _check_image(image)
    fg = features if features is not None else extract_aggregate_features(m, image, threads)
    f = FEATURE_SIZE
    win = sliding_window_view(fg.data, (f, f), axis=(0, 1))  # nh, nw, c, f, f
    nh, nw = win.shape[:2]
    rows_per_job = max(1, _BATCH_PATCHES // nw)
    jobs = [np.arange(i, min(i + rows_per_job, nh)) for i in range(0, nh, rows_per_job)]

    def job(rs):
        blocks = win[rs].transpose(0, 1, 3, 4, 2).reshape(-1, f, f, win.shape[2])
        return _head_logits(m, np.ascontiguousarray(blocks)).reshape(len(rs), nw, -1)

    logits = np.concatenate(_run(jobs, job, threads), axis=0)
    return _grid((PATCH_SIZE // 2, PATCH_SIZE // 2), FEATURE_STRIDE, logits,
                 fg.tiles[0] * fg.tiles[1], nh * nw)


def _nearest_index(n_pixels: int, origin: int, stride: int, n_sites: int) -> np.ndarray:
    # ceil((2d - s) / 2s) picks the nearest site, ties toward the smaller index
    d = np.arange(n_pixels) - origin
    k = -((-(2 * d - stride)) // (2 * stride))
    return np.clip(k, 0, n_sites - 1)


def grid_to_mask(g: LabelGrid, shape) -> tuple[np.ndarray, np.ndarray]:
    """Full-resolution ``(mask, prob_map)`` by nearest-site assignment.

    ``shape`` is the image side ``l`` or ``(height, width)``.
    """
    if g.labels.size == 0:
        raise ValueError("label grid is empty")
    h, w = (shape, shape) if np.isscalar(shape) else shape
    ry = _nearest_index(h, g.origin[0], g.stride, g.labels.shape[0])
    rx = _nearest_index(w, g.origin[1], g.stride, g.labels.shape[1])
    mask = g.labels[ry[:, None], rx[None, :]].astype(bool)
    prob = g.probs[ry[:, None], rx[None, :]].astype(np.float32)
    return mask, prob


def strided_infer(m: Model, image: np.ndarray, stride: int, threads: int = 1):
    """Coarse dense sampling plus nearest upsampling; returns ``(mask, prob_map, grid)``."""
    g = dense_infer(m, image, stride, threads)
    mask, prob = grid_to_mask(g, image.shape[:2])
    return mask, prob, g


def infer_mask(m: Model, image: np.ndarray, engine: str, stride: int | None = None,
               threads: int = 1):
    """Run one engine end to end; returns ``(mask, prob_map, grid)``."""
    if engine == "flash":
        if stride is not None:
            raise ValueError("the flash engine has a fixed feature-space stride")
        g = flash_infer(m, image, threads)
    elif engine == "dense":
        g = dense_infer(m, image, 1 if stride is None else stride, threads)
    elif engine == "strided":
        g = dense_infer(m, image, PATCH_SIZE if stride is None else stride, threads)
    else:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    mask, prob = grid_to_mask(g, image.shape[:2])
    return mask, prob, g


@dataclass
class DisagreementReport:
    sites: int
    disagreements: int
    aligned_sites: int
    aligned_disagreements: int
    max_prob_gap: float

    @property
    def rate(self) -> float:
        return self.disagreements / self.sites if self.sites else 0.0


def disagreement_report(m: Model, image: np.ndarray, threads: int = 1) -> DisagreementReport:
    """Compare flash sites against dense stride-4 sites with the same patch centers."""
    fl = flash_infer(m, image, threads)
    ds = dense_infer(m, image, FEATURE_STRIDE, threads)
    rh = min(fl.shape[0], ds.shape[0])
    rw = min(fl.shape[1], ds.shape[1])
    a, b = fl.labels[:rh, :rw], ds.labels[:rh, :rw]
    aligned = np.zeros((rh, rw), dtype=bool)
    step = FEATURE_SIZE
    aligned[::step, ::step] = True
    return DisagreementReport(
        sites=a.size,
        disagreements=int((a != b).sum()),
        aligned_sites=int(aligned.sum()),
        aligned_disagreements=int((a != b)[aligned].sum()),
        max_prob_gap=float(np.abs(fl.probs[:rh, :rw] - ds.probs[:rh, :rw]).max()),
    )
