"""Model checkpoints and raster files.

Checkpoint layout (all integers u32 little-endian, reals f32 little-endian)::

    b"FLSH"  version=1  layer_count
    per layer:
        kind u8 (0 = conv, 1 = dense)
        conv:  k, in_channels, out_channels  then weights (k, k, in, out) C-order, bias (out,)
        dense: in_features, out_features     then weights (in, out) C-order,       bias (out,)
    CRC32 (IEEE) of every preceding byte

Probability maps use ``b"FPRB"``, u32 height, u32 width, u32 reserved (0),
then ``height * width`` f32 values in row-major order.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .network import LAYER_NAMES, Model
from .tensor_core import ConvKernel, DenseWeights

CHECKPOINT_MAGIC = b"FLSH"
CHECKPOINT_VERSION = 1
PROB_MAGIC = b"FPRB"
KIND_CONV = 0
KIND_DENSE = 1


class FormatError(ValueError):
    """File is not in the expected layout (bad magic, version, size or encoding)."""


class ChecksumError(FormatError):
    """Checkpoint CRC does not match its contents."""


def model_to_bytes(m: Model) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(LAYER_NAMES))]
    for _, layer in m.layers():
        if isinstance(layer, ConvKernel):
            parts.append(struct.pack("<BIII", KIND_CONV, layer.k, layer.in_channels,
                                     layer.out_channels))
        else:
            parts.append(struct.pack("<BII", KIND_DENSE, layer.in_features, layer.out_features))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < 16:
        raise FormatError(f"checkpoint too short ({len(buf)} bytes)")
    r = _Reader(buf[:-4])
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if count != len(LAYER_NAMES):
        raise FormatError(f"expected {len(LAYER_NAMES)} layers, header says {count}")
    layers = []
    for i, name in enumerate(LAYER_NAMES):
        (kind,) = r.unpack("<B", f"{name} kind")
        want = KIND_CONV if i < 3 else KIND_DENSE
        if kind != want:
            raise FormatError(f"layer {name} has kind {kind}, expected {want}")
        if kind == KIND_CONV:
            k, cin, cout = r.unpack("<III", f"{name} dims")
            w = r.floats(k * k * cin * cout, f"{name} weights").reshape(k, k, cin, cout)
            layers.append(ConvKernel(w, r.floats(cout, f"{name} bias")))
        else:
            fin, fout = r.unpack("<II", f"{name} dims")
            w = r.floats(fin * fout, f"{name} weights").reshape(fin, fout)
            layers.append(DenseWeights(w, r.floats(fout, f"{name} bias")))
    if r.pos != len(buf) - 4:
        raise FormatError(f"{len(buf) - 4 - r.pos} unexpected trailing bytes in checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if crc != zlib.crc32(buf[:-4]):
        raise ChecksumError(f"checkpoint CRC mismatch (stored {crc:#010x})")
    return Model(*layers, mode="eval")


def save_model(m: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def load_model(path) -> Model:
    """Load a checkpoint; raises FormatError / ChecksumError on damaged files."""
    return model_from_bytes(Path(path).read_bytes())


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_image(image: np.ndarray, path) -> None:
    """Write a float RGB image in [0, 1] as 8-bit PNG or binary PPM (by suffix)."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise FormatError(f"unsupported image suffix {path.suffix!r}; use .png or .ppm")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (h, w, 3), got {image.shape}")
    Image.fromarray(_to_u8(image), mode="RGB").save(path, format=fmt)


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG or P6 PPM into float32 (h, w, 3) in [0, 1]."""
    path = Path(path)
    with Image.open(path) as im:
        if im.format not in ("PNG", "PPM"):
            raise FormatError(f"{path}: unsupported image format {im.format}")
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255)


def write_mask(mask: np.ndarray, path) -> None:
    """Binary mask as 8-bit grayscale PNG: 0 = non-tumor, 255 = tumor."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {m.shape}")
    Image.fromarray(np.where(m.astype(bool), 255, 0).astype(np.uint8), mode="L").save(
        Path(path), format="PNG")


def read_mask(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG mask; values >= 128 are tumor."""
    path = Path(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: masks must be PNG, got {im.format}")
        if im.mode != "L":
            raise FormatError(f"{path}: expected 8-bit grayscale mask, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr >= 128


def prob_map_to_bytes(prob: np.ndarray) -> bytes:
    p = np.asarray(prob)
    if p.ndim != 2:
        raise ValueError(f"probability map must be 2-D, got {p.shape}")
    header = PROB_MAGIC + struct.pack("<III", p.shape[0], p.shape[1], 0)
    return header + np.ascontiguousarray(p, dtype="<f4").tobytes()


def prob_map_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise FormatError(f"probability map too short ({len(buf)} bytes)")
    if buf[:4] != PROB_MAGIC:
        raise FormatError(f"bad probability map magic {buf[:4]!r}, expected {PROB_MAGIC!r}")
    h, w, _ = struct.unpack("<III", buf[4:16])
    if len(buf) != 16 + 4 * h * w:
        raise FormatError(f"probability map {h}x{w} needs {16 + 4 * h * w} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float32).reshape(h, w)


def write_prob_map(prob: np.ndarray, path) -> None:
    Path(path).write_bytes(prob_map_to_bytes(prob))


def read_prob_map(path) -> np.ndarray:
    return prob_map_from_bytes(Path(path).read_bytes())
