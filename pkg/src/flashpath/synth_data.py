"""Seeded synthetic stained-core images with exact tumor masks.

Two textures stand in for the two tissue classes:

* tumor: brownish (DAB-like) tint with dense clusters of dark brown nuclei
* non-tumor: pale pink-purple tint with sparse, scattered blue-purple nuclei

A core is a disc of tissue on a white background. Tumor regions inside the
disc are smooth blobs obtained by thresholding a low-frequency field at the
quantile that yields the requested tumor fraction. Both textures are rendered
over the full frame and composited through the mask, so texture and mask
agree pixel for pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .network import NON_TUMOR, TUMOR

BACKGROUND = (0.95, 0.95, 0.94)


@dataclass(frozen=True)
class TextureParams:
    tint: tuple[float, float, float]
    nucleus_color: tuple[float, float, float]
    nucleus_density: float  # nuclei per 1000 px^2
    nucleus_radius: float
    cluster_size: int  # nuclei per cluster; 1 means unclustered
    cluster_spread: float
    tint_jitter: float = 0.04


TUMOR_TEXTURE = TextureParams(
    tint=(0.80, 0.62, 0.45),
    nucleus_color=(0.30, 0.16, 0.08),
    nucleus_density=9.0,
    nucleus_radius=2.2,
    cluster_size=6,
    cluster_spread=4.0,
)

NORMAL_TEXTURE = TextureParams(
    tint=(0.90, 0.80, 0.86),
    nucleus_color=(0.42, 0.36, 0.66),
    nucleus_density=2.0,
    nucleus_radius=1.8,
    cluster_size=1,
    cluster_spread=0.0,
)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    side: int = 512
    tumor_fraction: float = 0.4
    blob_count: int = 5
    blob_scale: float = 60.0
    tumor: TextureParams = TUMOR_TEXTURE
    normal: TextureParams = NORMAL_TEXTURE
    core_radius: float = 0.47  # fraction of side
    cord_count: int = 0  # thin straight tumor strands added on top of the blobs
    cord_width: tuple[int, int] = (4, 12)

    def __post_init__(self):
        if not 0 <= self.tumor_fraction <= 1:
            raise ValueError(f"tumor_fraction must be in [0, 1], got {self.tumor_fraction}")
        if self.side < 64:
            raise ValueError(f"side must be >= 64, got {self.side}")


def render_texture(rng: np.random.Generator, shape: tuple[int, int],
                   params: TextureParams) -> np.ndarray:
    """Render one class texture over a ``shape`` frame as float32 RGB in [0, 1]."""
    h, w = shape
    tint = np.asarray(params.tint, dtype=np.float64)
    shade = ndimage.gaussian_filter(rng.standard_normal((h, w)), 8.0, mode="wrap")
    shade *= params.tint_jitter / max(shade.std(), 1e-9)
    img = tint[None, None, :] * (1.0 + shade[..., None])

    n_nuclei = rng.poisson(params.nucleus_density * h * w / 1000.0)
    if params.cluster_size > 1:
        n_clusters = max(1, n_nuclei // params.cluster_size)
        centers = rng.uniform((0, 0), (h, w), size=(n_clusters, 2))
        counts = rng.poisson(params.cluster_size, size=n_clusters)
        pts = np.repeat(centers, counts, axis=0)
        pts += rng.normal(0, params.cluster_spread, size=pts.shape)
    else:
        pts = rng.uniform((0, 0), (h, w), size=(n_nuclei, 2))
    pts = np.floor(pts).astype(np.int64)
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < h) & (pts[:, 1] >= 0) & (pts[:, 1] < w)
    pts = pts[ok]
    deltas = np.zeros((h, w))
    np.add.at(deltas, (pts[:, 0], pts[:, 1]), 1.0)
    sigma = params.nucleus_radius / 1.5
    # peak of a blurred unit impulse is 1/(2*pi*sigma^2); scale so a lone nucleus saturates
    alpha = ndimage.gaussian_filter(deltas, sigma) * (2 * np.pi * sigma**2) * 1.6
    alpha = np.clip(alpha, 0.0, 1.0)[..., None]
    img = img * (1 - alpha) + np.asarray(params.nucleus_color)[None, None, :] * alpha
    img += rng.normal(0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def core_disc(side: int, radius_frac: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2.0
    return (yy - c) ** 2 + (xx - c) ** 2 <= (radius_frac * side) ** 2


def blob_mask(rng: np.random.Generator, spec: SynthSpec, inside: np.ndarray) -> np.ndarray:
    """Smooth random blobs covering ``tumor_fraction`` of the ``inside`` pixels."""
    side = spec.side
    if spec.tumor_fraction == 0:
        return np.zeros((side, side), dtype=bool)
    if spec.tumor_fraction == 1:
        return inside.copy()
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    field = np.zeros((side, side))
    r = spec.core_radius * side
    c = (side - 1) / 2.0
    for _ in range(spec.blob_count):
        ang = rng.uniform(0, 2 * np.pi)
        rad = r * np.sqrt(rng.uniform(0, 1))
        cy, cx = c + rad * np.sin(ang), c + rad * np.cos(ang)
        s = spec.blob_scale * rng.uniform(0.6, 1.4)
        field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    noise = ndimage.gaussian_filter(rng.standard_normal((side, side)), spec.blob_scale / 2)
    field += 0.5 * noise / max(noise.std(), 1e-12) * field.std()
    thr = np.quantile(field[inside], 1.0 - spec.tumor_fraction)
    return (field > thr) & inside


def cord_mask(rng: np.random.Generator, spec: SynthSpec, inside: np.ndarray) -> np.ndarray:
    """Straight strands of random width and orientation crossing the core."""
    side = spec.side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    out = np.zeros((side, side), dtype=bool)
    for _ in range(spec.cord_count):
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.6, 0.6) * spec.core_radius * side
        width = rng.integers(spec.cord_width[0], spec.cord_width[1] + 1)
        dist = (yy - c) * np.cos(theta) - (xx - c) * np.sin(theta) - offset
        out |= np.abs(dist) < width / 2
    return out & inside


def generate_core(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image, gt_mask)``: float32 ``(l, l, 3)`` in [0, 1] and a bool ``(l, l)`` mask."""
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    side = spec.side
    inside = core_disc(side, spec.core_radius)
    mask = blob_mask(rng, spec, inside)
    if spec.cord_count:
        mask |= cord_mask(rng, spec, inside)
    tumor = render_texture(rng, (side, side), spec.tumor)
    normal = render_texture(rng, (side, side), spec.normal)
    img = np.where(mask[..., None], tumor, normal)
    bg = np.asarray(BACKGROUND, dtype=np.float32) + rng.normal(0, 0.01, (side, side, 3))
    img = np.where(inside[..., None], img, bg)
    return np.clip(img, 0, 1).astype(np.float32), mask


def generate_band_core(spec: SynthSpec, band_start: int, band_width: int = 8,
                       axis: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Non-tumor core crossed by one straight tumor band ``band_width`` pixels wide.

    The band occupies ``[band_start, band_start + band_width)`` along ``axis``
    (columns by default), clipped to the core disc.
    """
    rng = np.random.default_rng([spec.seed, 0xBA4D])
    side = spec.side
    inside = core_disc(side, spec.core_radius)
    idx = np.arange(side)
    in_band = (idx >= band_start) & (idx < band_start + band_width)
    band = np.broadcast_to(in_band[None, :] if axis == 1 else in_band[:, None], (side, side))
    mask = band & inside
    tumor = render_texture(rng, (side, side), spec.tumor)
    normal = render_texture(rng, (side, side), spec.normal)
    img = np.where(mask[..., None], tumor, normal)
    bg = np.asarray(BACKGROUND, dtype=np.float32) + rng.normal(0, 0.01, (side, side, 3))
    img = np.where(inside[..., None], img, bg)
    return np.clip(img, 0, 1).astype(np.float32), mask


def generate_region(spec: SynthSpec, label: int, index: int, size: int = 300) -> np.ndarray:
    """One pure-class ``size``x``size`` texture region."""
    rng = np.random.default_rng([spec.seed, 0x5E6, label, index])
    params = spec.tumor if label == TUMOR else spec.normal
    return render_texture(rng, (size, size), params)


def generate_training_regions(spec: SynthSpec, count_per_class):
    """Pure-class labeled regions.

    ``count_per_class`` is ``(n_non_tumor, n_tumor)`` or a single int used for both.
    """
    from .trainer import LabeledRegion

    if isinstance(count_per_class, int):
        counts = (count_per_class, count_per_class)
    else:
        counts = tuple(count_per_class)
    if min(counts) < 1:
        raise ValueError(f"need at least one region per class, got {counts}")
    regions = []
    for label, n in ((NON_TUMOR, counts[0]), (TUMOR, counts[1])):
        for i in range(n):
            regions.append(LabeledRegion(generate_region(spec, label, i), label))
    return regions



def generate_training_cores(spec: SynthSpec, count: int, cord_count: int = 10):
    """Mixed cores (blobs plus thin cords) as ``(image, mask)`` pairs.

    Tumor fraction varies per core in [0.2, 0.6]. Core seeds are drawn from
    ``spec.seed`` in a stream disjoint from plain integer seeds used for test cores.
    """
    rng = np.random.default_rng([spec.seed, 0x7C0])
    out = []
    for _ in range(count):
        s = replace(spec, seed=int(rng.integers(2**40, 2**41)), cord_count=cord_count,
                    tumor_fraction=float(rng.uniform(0.2, 0.6)))
        out.append(generate_core(s))
    return out
