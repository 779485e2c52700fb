"""The fixed three-conv patch classifier and its forward/backward passes.

Layer stack for a 32x32x3 patch::

    conv 3x3 -> 16, ReLU, pool   32x32x16 -> 16x16x16
    conv 3x3 -> 32, ReLU, pool   16x16x32 -> 8x8x32
    conv 3x3 -> 64, ReLU         8x8x64      (forward_features stops here)
    pool                         4x4x64
    dense 1024 -> 256, ReLU, dropout
    dense 256 -> 2, softmax

Every function accepts a single patch ``(h, w, c)`` or a batch ``(n, h, w, c)``.
Smaller variants (fewer channels, 8x8 input) can be built for gradient checks;
the code is shape-generic and only :func:`build_model`'s defaults pin the
full-size architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor_core import (
    ConvKernel,
    DenseWeights,
    conv2d_backward,
    conv2d_forward,
    dropout_mask,
    fc_backward,
    fc_forward,
    maxpool2x2,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    softmax,
)

NON_TUMOR = 0
TUMOR = 1

PATCH_SIZE = 32
FEATURE_SIZE = 8
FEATURE_CHANNELS = 64
DROPOUT_RATE = 0.5

LAYER_NAMES = ("conv1", "conv2", "conv3", "fc", "out")


class MissingCacheError(RuntimeError):
    """Raised when a backward pass is requested without a cached training forward."""


@dataclass
class Model:
    conv1: ConvKernel
    conv2: ConvKernel
    conv3: ConvKernel
    fc: DenseWeights
    out: DenseWeights
    mode: str = "eval"
    rng_seed: int = 0
    dropout_rate: float = DROPOUT_RATE

    @property
    def dtype(self) -> np.dtype:
        return self.conv1.weights.dtype

    @property
    def feature_channels(self) -> int:
        return self.conv3.out_channels

    @property
    def feature_size(self) -> int:
        cells = self.fc.in_features // self.feature_channels
        side = int(round((cells * 4) ** 0.5))
        return side

    @property
    def patch_size(self) -> int:
        return self.feature_size * 4

    def layers(self):
        return [(name, getattr(self, name)) for name in LAYER_NAMES]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Live parameter arrays in checkpoint order (weights then bias, per layer)."""
        params = []
        for name, layer in self.layers():
            params.append((f"{name}.weights", layer.weights))
            params.append((f"{name}.bias", layer.bias))
        return params

    def weight_count(self) -> int:
        return sum(layer.weights.size for _, layer in self.layers())

    def copy(self) -> "Model":
        return replace(
            self,
            conv1=ConvKernel(self.conv1.weights.copy(), self.conv1.bias.copy()),
            conv2=ConvKernel(self.conv2.weights.copy(), self.conv2.bias.copy()),
            conv3=ConvKernel(self.conv3.weights.copy(), self.conv3.bias.copy()),
            fc=DenseWeights(self.fc.weights.copy(), self.fc.bias.copy()),
            out=DenseWeights(self.out.weights.copy(), self.out.bias.copy()),
        )

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for _, layer in m.layers():
            layer.weights = layer.weights.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return m


@dataclass
class ForwardCache:
    x0: np.ndarray
    pre1: np.ndarray
    arg1: np.ndarray
    p1: np.ndarray
    pre2: np.ndarray
    arg2: np.ndarray
    p2: np.ndarray
    pre3: np.ndarray
    arg3: np.ndarray
    flat: np.ndarray
    pre_fc: np.ndarray
    drop: np.ndarray
    hidden: np.ndarray
    probs: np.ndarray


@dataclass
class PatchOutput:
    """Classifier output; arrays carry a leading batch axis when the input was a batch."""

    logits: np.ndarray
    probs: np.ndarray
    label: np.ndarray | int
    cache: ForwardCache | None = field(default=None, repr=False)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _glorot(rng, shape, fan_in, fan_out, dtype):
    b = glorot_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=shape).astype(dtype)


def build_model(seed: int = 0, widths=(16, 32, 64), hidden: int = 256, n_classes: int = 2,
                in_channels: int = 3, patch_size: int = PATCH_SIZE, dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``.

    Conv fans are receptive-field scaled (``k*k*channels``).
    """
    if patch_size % 8:
        raise ValueError(f"patch_size must be a multiple of 8, got {patch_size}")
    rng = np.random.default_rng(seed)
    k = 3
    convs = []
    c_in = in_channels
    for c_out in widths:
        w = _glorot(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out, dtype)
        convs.append(ConvKernel(w, np.zeros(c_out, dtype=dtype)))
        c_in = c_out
    flat = (patch_size // 8) ** 2 * widths[-1]
    fc = DenseWeights(_glorot(rng, (flat, hidden), flat, hidden, dtype), np.zeros(hidden, dtype))
    out = DenseWeights(_glorot(rng, (hidden, n_classes), hidden, n_classes, dtype),
                       np.zeros(n_classes, dtype))
    return Model(*convs, fc, out, mode="eval", rng_seed=seed)


def _prepare(m: Model, patch: np.ndarray) -> tuple[np.ndarray, bool]:
    single = patch.ndim == 3
    x = patch[None] if single else patch
    p = m.patch_size
    expected = (p, p, m.conv1.in_channels)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"patch must have shape {expected}, got {patch.shape}")
    return x.astype(m.dtype, copy=False), single


def _features(m: Model, x: np.ndarray) -> np.ndarray:
    x = maxpool2x2(relu_forward(conv2d_forward(x, m.conv1)))
    x = maxpool2x2(relu_forward(conv2d_forward(x, m.conv2)))
    return relu_forward(conv2d_forward(x, m.conv3))


def _head_logits(m: Model, feat: np.ndarray) -> np.ndarray:
    pooled = maxpool2x2(feat)
    hidden = relu_forward(fc_forward(pooled.reshape(len(pooled), -1), m.fc))
    return fc_forward(hidden, m.out)


def _output(logits: np.ndarray, single: bool, cache=None) -> PatchOutput:
    probs = softmax(logits)
    label = probs.argmax(axis=-1)
    if single:
        return PatchOutput(logits[0], probs[0], int(label[0]), cache)
    return PatchOutput(logits, probs, label, cache)


def forward_features(m: Model, patch: np.ndarray) -> np.ndarray:
    """Last conv layer activations (after ReLU, before the final pooling)."""
    x, single = _prepare(m, patch)
    feat = _features(m, x)
    return feat[0] if single else feat


def head_classify(m: Model, feat: np.ndarray) -> PatchOutput:
    """Pooling, dense layers and softmax on an 8x8x64 feature block (eval only)."""
    single = feat.ndim == 3
    f = feat[None] if single else feat
    fs = m.feature_size
    expected = (fs, fs, m.feature_channels)
    if f.ndim != 4 or f.shape[1:] != expected:
        raise ValueError(f"feature block must have shape {expected}, got {feat.shape}")
    return _output(_head_logits(m, f.astype(m.dtype, copy=False)), single)


def forward_patch(m: Model, patch: np.ndarray, rng: np.random.Generator | None = None) -> PatchOutput:
    """Full network on one patch or a batch.

    In eval mode this is ``head_classify(forward_features(patch))`` exactly.
    In train mode dropout is applied to the hidden layer using ``rng`` and the
    returned output carries the cache needed by :func:`backward_patch`.
    """
    if m.mode == "eval":
        x, single = _prepare(m, patch)
        return _output(_head_logits(m, _features(m, x)), single)
    if m.mode != "train":
        raise ValueError(f"model mode must be 'train' or 'eval', got {m.mode!r}")
    if rng is None:
        rng = np.random.default_rng(m.rng_seed)
    x, single = _prepare(m, patch)
    pre1 = conv2d_forward(x, m.conv1)
    p1, arg1 = maxpool2x2_forward(relu_forward(pre1))
    pre2 = conv2d_forward(p1, m.conv2)
    p2, arg2 = maxpool2x2_forward(relu_forward(pre2))
    pre3 = conv2d_forward(p2, m.conv3)
    p3, arg3 = maxpool2x2_forward(relu_forward(pre3))
    flat = p3.reshape(len(p3), -1)
    pre_fc = fc_forward(flat, m.fc)
    drop = dropout_mask(pre_fc.shape, m.dropout_rate, rng, dtype=pre_fc.dtype)
    hidden = relu_forward(pre_fc) * drop
    logits = fc_forward(hidden, m.out)
    cache = ForwardCache(x, pre1, arg1, p1, pre2, arg2, p2, pre3, arg3, flat, pre_fc, drop,
                         hidden, softmax(logits))
    return _output(logits, single, cache)


def backward_patch(m: Model, cache: ForwardCache | None, target) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean cross-entropy with respect to every parameter.

    ``target`` is a class index or an array of them, one per cached patch. Keys
    follow :meth:`Model.parameters`.
    """
    if cache is None:
        raise MissingCacheError("backward_patch needs the cache of a train-mode forward_patch")
    probs = cache.probs
    n = len(probs)
    labels = np.broadcast_to(np.asarray(target, dtype=np.intp), (n,))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n

    grads = {}
    dhidden, grads["out.weights"], grads["out.bias"] = fc_backward(cache.hidden, m.out, dlogits)
    dpre_fc = relu_backward(cache.pre_fc, dhidden * cache.drop)
    dflat, grads["fc.weights"], grads["fc.bias"] = fc_backward(cache.flat, m.fc, dpre_fc)
    fs = cache.pre3.shape[1] // 2
    d = maxpool2x2_backward(cache.arg3, dflat.reshape(n, fs, fs, -1))
    d = relu_backward(cache.pre3, d)
    d, grads["conv3.weights"], grads["conv3.bias"] = conv2d_backward(cache.p2, m.conv3, d)
    d = relu_backward(cache.pre2, maxpool2x2_backward(cache.arg2, d))
    d, grads["conv2.weights"], grads["conv2.bias"] = conv2d_backward(cache.p1, m.conv2, d)
    d = relu_backward(cache.pre1, maxpool2x2_backward(cache.arg1, d))
    _, grads["conv1.weights"], grads["conv1.bias"] = conv2d_backward(
        cache.x0, m.conv1, d, need_input_grad=False
    )
    return {name: grads[name] for name, _ in m.parameters()}
