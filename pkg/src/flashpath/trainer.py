"""Patch augmentation and minibatch SGD with Nesterov momentum."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .network import NON_TUMOR, PATCH_SIZE, TUMOR, Model, backward_patch, forward_patch

log = logging.getLogger(__name__)

ROTATION_ANGLES = (-180, -150, -120, -90, -60, -30, 30, 60, 90, 120, 150, 180)
REGION_SIZE = 300
DEFAULT_LR = 0.002
DEFAULT_MOMENTUM = 0.9
DEFAULT_BATCH = 128
DEFAULT_CROPS_PER_ANGLE = 3
# side range of the square crops that get resized to 32x32; kept near the
# patch size so training texture scale matches inference
DEFAULT_CROP_SIDES = (32, 44)


@dataclass
class LabeledRegion:
    image: np.ndarray
    label: int

    def __post_init__(self):
        if self.image.shape[:2] != (REGION_SIZE, REGION_SIZE):
            raise ValueError(f"regions must be {REGION_SIZE}x{REGION_SIZE}, got {self.image.shape}")
        if self.label not in (NON_TUMOR, TUMOR):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class PatchDataset:
    patches: np.ndarray  # (n, 32, 32, 3) float32
    labels: np.ndarray  # (n,) int
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int = 0

    def __len__(self):
        return len(self.labels)


@dataclass
class OptimizerState:
    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    velocity: list[np.ndarray] | None = None

    @classmethod
    def for_model(cls, model: Model, lr=DEFAULT_LR, momentum=DEFAULT_MOMENTUM):
        return cls(lr, momentum, [np.zeros_like(p) for _, p in model.parameters()])


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_acc: float
    val_acc: float


def valid_crop_side(angle: float, size: int = REGION_SIZE) -> int:
    """Side of the largest axis-aligned square inside a ``size`` square rotated by ``angle``."""
    t = np.deg2rad(angle)
    return int(np.floor(size / (abs(np.cos(t)) + abs(np.sin(t))) + 1e-9))


def rotate_region(image: np.ndarray, angle: float, cval: float = 0.0) -> tuple[np.ndarray, int]:
    """Rotate about the center; returns the rotated frame and the fill-free square side.

    Multiples of 90 degrees are exact pixel permutations. Other angles use
    bilinear resampling, and the returned side is shrunk by 2 pixels so that no
    interpolation stencil inside it reaches the fill value.
    """
    if float(angle) % 90 == 0:
        k = int(round(angle / 90)) % 4
        return np.rot90(image, k=k).copy(), image.shape[0]
    rot = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1,
                         mode="constant", cval=cval)
    return rot, valid_crop_side(angle, image.shape[0]) - 2


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    if img.shape[0] == side and img.shape[1] == side:
        return img.copy()
    f = side / img.shape[0]
    out = ndimage.zoom(img, (f, f, 1), order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0, 1)


def augment_region(region: LabeledRegion, angles: Sequence[float] = ROTATION_ANGLES,
                   crops_per_angle: int = DEFAULT_CROPS_PER_ANGLE,
                   rng: np.random.Generator | None = None,
                   crop_sides: tuple[int, int] = DEFAULT_CROP_SIDES) -> list[tuple[np.ndarray, int]]:
    """Rotate, crop and resize one region into 32x32 patches.

    Emits ``len(angles) * crops_per_angle`` patches, each labeled like the region.
    Angles are applied as listed, duplicates included (-180 and 180 coincide).
    """
    if len(angles) == 0:
        raise ValueError("angle list is empty")
    if crops_per_angle < 1:
        raise ValueError(f"crops_per_angle must be >= 1, got {crops_per_angle}")
    rng = rng or np.random.default_rng()
    size = region.image.shape[0]
    out = []
    for angle in angles:
        rot, valid = rotate_region(region.image, angle)
        lo_edge = (size - valid) // 2
        for _ in range(crops_per_angle):
            side = int(rng.integers(crop_sides[0], min(crop_sides[1], valid) + 1))
            y = lo_edge + int(rng.integers(0, valid - side + 1))
            x = lo_edge + int(rng.integers(0, valid - side + 1))
            crop = rot[y:y + side, x:x + side]
            out.append((resize_bilinear(crop, PATCH_SIZE).astype(np.float32), region.label))
    return out


def sample_center_patches(image: np.ndarray, mask: np.ndarray, count: int,
                          rng: np.random.Generator, boundary_share: float = 0.5,
                          size: int = PATCH_SIZE):
    """Patches labeled by the mask value at their center pixel ``(size//2, size//2)``.

    ``boundary_share`` of the samples are centered within ``size//4`` pixels of
    a class boundary; the rest are drawn uniformly over the frame.
    """
    h, w = mask.shape
    half = size // 2
    lo_y, hi_y = half, h - size + half
    lo_x, hi_x = half, w - size + half
    edge = mask ^ ndimage.binary_erosion(mask, iterations=1, border_value=0)
    near = ndimage.binary_dilation(edge, iterations=size // 4)
    near[:lo_y] = near[hi_y + 1:] = False
    near[:, :lo_x] = near[:, hi_x + 1:] = False
    near_pts = np.argwhere(near)
    n_edge = int(round(count * boundary_share)) if len(near_pts) else 0
    centers = []
    if n_edge:
        centers.append(near_pts[rng.integers(0, len(near_pts), n_edge)])
    n_rest = count - n_edge
    centers.append(np.stack([rng.integers(lo_y, hi_y + 1, n_rest),
                             rng.integers(lo_x, hi_x + 1, n_rest)], axis=1))
    centers = np.concatenate(centers)
    patches = np.stack([image[y - half:y - half + size, x - half:x - half + size]
                        for y, x in centers])
    labels = mask[centers[:, 0], centers[:, 1]].astype(np.int64)
    return patches.astype(np.float32), labels


def center_patches_from_cores(cores, per_core: int, seed: int = 0, boundary_share: float = 0.5):
    """Stack :func:`sample_center_patches` over ``(image, mask)`` pairs."""
    rng = np.random.default_rng([seed, 0xCE7])
    ps, ls = [], []
    for image, mask in cores:
        p, l = sample_center_patches(image, mask, per_core, rng, boundary_share)
        ps.append(p)
        ls.append(l)
    if not ps:
        return np.zeros((0, PATCH_SIZE, PATCH_SIZE, 3), np.float32), np.zeros(0, np.int64)
    return np.concatenate(ps), np.concatenate(ls)


def stratified_split(labels: np.ndarray, val_fraction: float, rng: np.random.Generator):
    train, val = [], []
    for cls in (NON_TUMOR, TUMOR):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, int(round(len(idx) * val_fraction))) if len(idx) > 1 else 0
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def build_dataset(regions: Sequence[LabeledRegion], angles=ROTATION_ANGLES,
                  crops_per_angle=DEFAULT_CROPS_PER_ANGLE, seed: int = 0,
                  val_fraction: float = 0.1, extra=None) -> PatchDataset:
    """Augment every region and split 90/10 stratified by class.

    ``extra`` is an optional ``(patches, labels)`` pair of ready-made 32x32
    patches appended after the augmented ones.
    """
    rng = np.random.default_rng([seed, 0xA06])
    patches, labels = [], []
    for region in regions:
        for patch, label in augment_region(region, angles, crops_per_angle, rng):
            patches.append(patch)
            labels.append(label)
    if extra is not None:
        patches.extend(np.asarray(extra[0], dtype=np.float32))
        labels.extend(int(v) for v in extra[1])
    if not patches:
        raise ValueError("no patches to build a dataset from")
    labels = np.asarray(labels, dtype=np.int64)
    train_idx, val_idx = stratified_split(labels, val_fraction, rng)
    for name, idx in (("train", train_idx), ("validation", val_idx)):
        if len(np.unique(labels[idx])) < 2:
            raise ValueError(f"{name} split does not contain both classes")
    return PatchDataset(np.stack(patches), labels, train_idx, val_idx, seed)


def cross_entropy(probs: np.ndarray, label) -> np.ndarray | float:
    """Negative log-probability of ``label``; probabilities clamped to >= 1e-12."""
    probs = np.asarray(probs)
    if probs.ndim == 1:
        return float(-np.log(max(float(probs[int(label)]), 1e-12)))
    labels = np.asarray(label, dtype=np.intp)
    picked = probs[np.arange(len(probs)), labels]
    return -np.log(np.maximum(picked, 1e-12))


def nesterov_step(state: OptimizerState, params: Sequence[np.ndarray],
                  grads: Sequence[np.ndarray]):
    """In-place Nesterov update ``v <- mu*v - lr*g``; ``theta <- theta + mu*v - lr*g``.

    Returns ``(params, velocity)``.
    """
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ValueError(
            f"length mismatch: {len(params)} params, {len(grads)} grads, "
            f"{len(state.velocity)} velocities"
        )
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        mu = p.dtype.type(state.momentum)
        lr = p.dtype.type(state.lr)
        v *= mu
        v -= lr * g
        p += mu * v - lr * g
    return params, state.velocity


def predict_labels(model: Model, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    mode, model.mode = model.mode, "eval"
    try:
        out = [forward_patch(model, patches[i:i + batch_size]).label
               for i in range(0, len(patches), batch_size)]
    finally:
        model.mode = mode
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(model: Model, dataset: PatchDataset, epochs: int, batch_size: int = DEFAULT_BATCH,
          state: OptimizerState | None = None, seed: int = 0,
          on_epoch=None) -> tuple[Model, list[EpochStats]]:
    """Minibatch training; updates ``model`` in place and returns it with per-epoch stats.

    Deterministic given ``seed``: the shuffle order and dropout masks come
    from separate seeded streams.
    """
    if len(dataset.train_idx) == 0 or len(dataset.val_idx) == 0:
        raise ValueError("dataset has an empty train or validation split")
    state = state or OptimizerState.for_model(model)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for _, p in model.parameters()]
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    params = [p for _, p in model.parameters()]
    patches, labels = dataset.patches, dataset.labels
    history = []
    for epoch in range(1, epochs + 1):
        model.mode = "train"
        order = dataset.train_idx[shuffle_rng.permutation(len(dataset.train_idx))]
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            out = forward_patch(model, patches[idx], rng=dropout_rng)
            y = labels[idx]
            loss_sum += float(cross_entropy(out.probs, y).sum())
            correct += int((out.label == y).sum())
            grads = backward_patch(model, out.cache, y)
            nesterov_step(state, params, [grads[name] for name, _ in model.parameters()])
        model.mode = "eval"
        val_pred = predict_labels(model, patches[dataset.val_idx])
        stats = EpochStats(
            epoch,
            loss_sum / len(order),
            correct / len(order),
            float((val_pred == labels[dataset.val_idx]).mean()),
        )
        history.append(stats)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, stats.mean_loss,
                 stats.train_acc, stats.val_acc)
        if on_epoch is not None:
            on_epoch(stats)
    model.mode = "eval"
    return model, history


def write_history_csv(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "train_acc", "val_acc"])
        for s in history:
            w.writerow([s.epoch, f"{s.mean_loss:.6f}", f"{s.train_acc:.6f}", f"{s.val_acc:.6f}"])
