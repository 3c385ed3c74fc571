"""Dense tensor helpers and the reference convolution.

Tensors are plain ``numpy`` arrays laid out channel-major, ``(C, H, W)`` for
feature maps and ``(C_out, C_in, K, K)`` for weights. The reference
convolution is a cross-correlation (no kernel flip) accumulated in float64 and
is used as the correctness oracle for the bit-packed kernels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"IDAT"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def as_tensor(data, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Return ``data`` as a finite float64 array, optionally checking rank."""
    arr = np.asarray(data, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have rank {ndim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    c_out: int
    c_in: int
    k: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for field in ("c_out", "c_in", "k", "stride"):
            if int(getattr(self, field)) < 1:
                raise ValueError(f"{field} must be a positive integer")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        """Spatial output size; raises if the geometry does not tile exactly."""
        out = []
        for size in (h, w):
            span = size + 2 * self.padding - self.k
            if span < 0 or span % self.stride:
                raise ShapeError(
                    f"input extent {size} with k={self.k}, stride={self.stride}, "
                    f"padding={self.padding} does not give an integer output size"
                )
            out.append(span // self.stride + 1)
        return out[0], out[1]


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    expected_w = (spec.c_out, spec.c_in, spec.k, spec.k)
    if x.ndim != 3 or x.shape[0] != spec.c_in or tuple(w.shape) != expected_w:
        raise ShapeError(
            f"input shape {tuple(x.shape)} and weight shape {tuple(w.shape)} "
            f"do not match {spec}"
        )


def conv2d_ref(x, weights, spec: ConvSpec, pad_value: float = 0.0) -> np.ndarray:
    """Reference 2-D cross-correlation.

    ``x`` has shape ``(c_in, H, W)`` and ``weights`` ``(c_out, c_in, k, k)``.
    Border positions are filled with ``pad_value``; the bit-packed kernel pads
    with -1, so pass ``pad_value=-1.0`` when comparing against it.

    Each output element is accumulated in float64 over kernel offsets in a
    fixed raster order, so results do not depend on threading.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    _check_conv_shapes(x, w, spec)
    h_out, w_out = spec.output_size(x.shape[1], x.shape[2])
    p, s, k = spec.padding, spec.stride, spec.k
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)), constant_values=pad_value)
    out = np.zeros((spec.c_out, h_out, w_out), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            window = x[:, i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s]
            out += np.einsum("oc,chw->ohw", w[:, :, i, j], window)
    return out


def channel_reduce(t, stat: str = "mean") -> np.ndarray:
    """Per-channel mean or population variance over all non-channel axes."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 1:
        raise ShapeError("tensor has no channel axis")
    flat = t.reshape(t.shape[0], -1)
    if flat.shape[1] == 0:
        raise ValueError("cannot reduce an empty channel")
    if stat == "mean":
        return flat.mean(axis=1)
    if stat == "var":
        return flat.var(axis=1)
    raise ValueError(f"unknown statistic {stat!r}; expected 'mean' or 'var'")


def save_tensor(path, t) -> None:
    """Write ``t`` in the IDAT binary format (little-endian float32 payload)."""
    arr = np.ascontiguousarray(t, dtype="<f4")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an IDAT tensor file")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported IDAT version {version}")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 4 * count:
        raise ValueError(f"{path}: payload length does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float64)
