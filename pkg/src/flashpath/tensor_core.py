"""Forward and backward kernels for the layers of the patch network.

Tensors are plain numpy arrays in channels-last layout: a single image or
feature map is ``(height, width, channels)`` and a batch is
``(n, height, width, channels)``. Every kernel accepts either form and
returns the same rank it was given. Kernels preserve the input dtype, so the
same code runs in float32 for inference and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class ConvKernel:
    """Square convolution weights stored as ``(k, k, in_channels, out_channels)``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError(f"conv weights must be (k, k, in, out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ValueError(
                f"conv bias must have shape ({self.weights.shape[3]},), got {self.bias.shape}"
            )

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


@dataclass
class DenseWeights:
    """Fully connected weights stored as ``(in_features, out_features)``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"dense weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"dense bias must have shape ({self.weights.shape[1]},), got {self.bias.shape}"
            )

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]


def _as_batch(t: np.ndarray) -> tuple[np.ndarray, bool]:
    if t.ndim == 3:
        return t[None], True
    if t.ndim == 4:
        return t, False
    raise ValueError(f"expected (h, w, c) or (n, h, w, c) tensor, got shape {t.shape}")


def _restore(t: np.ndarray, single: bool) -> np.ndarray:
    return t[0] if single else t


def mirror_pad(t: np.ndarray, margin: int) -> np.ndarray:
    """Pad the two spatial axes by reflection without repeating the edge.

    ``[a, b, c]`` with margin 1 becomes ``[b, a, b, c, b]``.
    """
    x, single = _as_batch(t)
    h, w = x.shape[1:3]
    if margin < 1:
        raise ValueError(f"margin must be >= 1, got {margin}")
    if margin >= min(h, w):
        raise ValueError(
            f"margin {margin} must be smaller than the spatial size {h}x{w} for reflection"
        )
    out = np.pad(x, ((0, 0), (margin, margin), (margin, margin), (0, 0)), mode="reflect")
    return _restore(out, single)


def unpad_mirror_grad(g: np.ndarray, margin: int) -> np.ndarray:
    """Adjoint of :func:`mirror_pad` on a batch: fold reflected border gradients back."""
    g = g.copy()
    m = margin
    # rows, then columns; corners are folded twice, which is what the adjoint needs
    for axis in (1, 2):
        n = g.shape[axis] - 2 * m
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        for j in range(1, m + 1):
            # padded index m - j mirrors interior index j; padded m + n - 1 + j mirrors n - 1 - j
            lo[axis] = m - j
            dst = [slice(None)] * 4
            dst[axis] = m + j
            g[tuple(dst)] += g[tuple(lo)]
            hi[axis] = m + n - 1 + j
            dst[axis] = m + n - 1 - j
            g[tuple(dst)] += g[tuple(hi)]
        keep = [slice(None)] * 4
        keep[axis] = slice(m, m + n)
        g = g[tuple(keep)]
    return g


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Padded batch ``(n, h+k-1, w+k-1, c)`` -> rows ``(n*h*w, k*k*c)`` ordered (ky, kx, c)."""
    n, hp, wp, c = x.shape
    h, w = hp - k + 1, wp - k + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # n, h, w, c, ky, kx
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d_forward(t: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Stride-1 convolution with mirror padding; output keeps the input's height and width."""
    x, single = _as_batch(t)
    n, h, w, c = x.shape
    if c != kernel.in_channels:
        raise ValueError(f"input has {c} channels, kernel expects {kernel.in_channels}")
    k = kernel.k
    xp = mirror_pad(x, k // 2)
    cols = _im2col(xp, k)
    out = cols @ kernel.weights.reshape(k * k * c, -1).astype(x.dtype, copy=False)
    out += kernel.bias.astype(x.dtype, copy=False)
    return _restore(out.reshape(n, h, w, kernel.out_channels), single)


def conv2d_backward(t: np.ndarray, kernel: ConvKernel, upstream: np.ndarray, need_input_grad=True):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(input_grad, weight_grad, bias_grad)``; ``input_grad`` is None when
    ``need_input_grad`` is False (first layer during training).
    """
    x, single = _as_batch(t)
    g, _ = _as_batch(upstream)
    n, h, w, c = x.shape
    if g.shape != (n, h, w, kernel.out_channels):
        raise ValueError(
            f"upstream gradient shape {g.shape[1:] if single else g.shape} does not match "
            f"forward output {(h, w, kernel.out_channels)}"
        )
    k = kernel.k
    m = k // 2
    cols = _im2col(mirror_pad(x, m), k)
    gflat = g.reshape(n * h * w, -1)
    weight_grad = (cols.T @ gflat).reshape(kernel.weights.shape)
    bias_grad = gflat.sum(axis=0)
    if not need_input_grad:
        return None, weight_grad, bias_grad
    dcols = (gflat @ kernel.weights.reshape(k * k * c, -1).T.astype(x.dtype, copy=False))
    dcols = dcols.reshape(n, h, w, k, k, c)
    dpad = np.zeros((n, h + 2 * m, w + 2 * m, c), dtype=dcols.dtype)
    for ky in range(k):
        for kx in range(k):
            dpad[:, ky:ky + h, kx:kx + w] += dcols[:, :, :, ky, kx]
    input_grad = unpad_mirror_grad(dpad, m)
    return _restore(input_grad, single), weight_grad, bias_grad


def maxpool2x2_forward(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and an argmax record holding, per output cell, the
    index 0..3 of the winning position in row-major block order. Ties go to the
    first position in that order.
    """
    x, single = _as_batch(t)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pooling needs even spatial size, got {h}x{w}")
    cand = np.stack(
        [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]], axis=0
    )
    arg = cand.argmax(axis=0).astype(np.uint8)
    out = np.take_along_axis(cand, arg[None].astype(np.intp), axis=0)[0]
    return _restore(out, single), _restore(arg, single)


def maxpool2x2(t: np.ndarray) -> np.ndarray:
    """Pooling without the argmax record, for inference."""
    x, single = _as_batch(t)
    h, w = x.shape[1:3]
    if h % 2 or w % 2:
        raise ValueError(f"max pooling needs even spatial size, got {h}x{w}")
    out = np.maximum(
        np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
        np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]),
    )
    return _restore(out, single)


def maxpool2x2_backward(argmax: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Route each upstream value to the recorded winner of its 2x2 block."""
    if argmax.shape != upstream.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match pooled shape {argmax.shape}"
        )
    a, single = _as_batch(argmax)
    g, _ = _as_batch(upstream)
    n, ph, pw, c = g.shape
    out = np.zeros((n, 2 * ph, 2 * pw, c), dtype=g.dtype)
    for idx, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        out[:, dy::2, dx::2] = np.where(a == idx, g, 0)
    return _restore(out, single)


def relu_forward(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0)


def relu_backward(t: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass the gradient where the forward input was strictly positive."""
    if t.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {upstream.shape}")
    return np.where(t > 0, upstream, 0).astype(upstream.dtype, copy=False)


def fc_forward(x: np.ndarray, dense: DenseWeights) -> np.ndarray:
    """``x @ W + b`` for a vector ``(in,)`` or a batch ``(n, in)``."""
    if x.shape[-1] != dense.in_features:
        raise ValueError(f"input has {x.shape[-1]} features, layer expects {dense.in_features}")
    return x @ dense.weights.astype(x.dtype, copy=False) + dense.bias.astype(x.dtype, copy=False)


def fc_backward(x: np.ndarray, dense: DenseWeights, upstream: np.ndarray):
    """Returns ``(input_grad, weight_grad, bias_grad)`` for :func:`fc_forward`."""
    if upstream.shape[:-1] != x.shape[:-1] or upstream.shape[-1] != dense.out_features:
        raise ValueError(f"upstream shape {upstream.shape} does not fit input {x.shape}")
    x2 = x.reshape(-1, dense.in_features)
    g2 = upstream.reshape(-1, dense.out_features)
    weight_grad = x2.T @ g2
    bias_grad = g2.sum(axis=0)
    input_grad = upstream @ dense.weights.T.astype(upstream.dtype, copy=False)
    return input_grad, weight_grad, bias_grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the max for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    dtype = np.dtype(dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1 - rate)


def dropout(t: np.ndarray, rate: float, rng: np.random.Generator | None = None,
            mode: str = "train") -> np.ndarray:
    """Inverted dropout; identity in ``"eval"`` mode or when ``rate`` is 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return t
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return t * dropout_mask(t.shape, rate, rng, dtype=t.dtype)
