"""Bit-packed sign tensors, XNOR/popcount convolution and OPs accounting.

Signs are packed 64 per ``uint64`` word along one axis, lowest bit first, with
bit 1 meaning +1 and bit 0 meaning -1. Bits past the logical extent of the
packed axis are always zero. Activations ``(C_in, H, W)`` are packed along the
channel axis and weights ``(C_out, C_in, K, K)`` along the input-channel axis,
so every spatial tap of a filter window is a contiguous run of words.

Spatial padding in the packed convolution uses -1 (an all-zero word); a zero
value has no representation in the sign domain.

OPs follow the usual binary-network convention: real multiplications plus
1/64 of the 1-bit multiplications (floor division). Adds are not counted.
Memory is 32 bits per real-valued parameter plus 1 bit per binary parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec, ShapeError

WORD_BITS = 64
OPS_CONVENTION = "ops = real multiplications + floor(binary multiplications / 64); adds not counted"


@dataclass(frozen=True)
class BinaryTensor:
    """Packed sign tensor.

    ``words`` has the packing axis moved last and replaced by
    ``ceil(n / 64)`` words, where ``n = logical_shape[axis]``.
    """

    logical_shape: tuple
    axis: int
    words: np.ndarray

    @property
    def n_bits(self) -> int:
        return self.logical_shape[self.axis]

    @property
    def n_words(self) -> int:
        return self.words.shape[-1]


def _n_words(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


def _tail_mask(n: int) -> np.ndarray:
    """Per-word masks selecting the valid bits of an ``n``-bit packed row."""
    masks = np.full(_n_words(n), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n % WORD_BITS
    if rem:
        masks[-1] = np.uint64((1 << rem) - 1)
    return masks


def pack_signs(signs, axis: int = -1) -> BinaryTensor:
    s = np.asarray(signs)
    if s.ndim == 0:
        raise ShapeError("cannot pack a scalar")
    if not np.all((s == 1) | (s == -1)):
        raise ValueError("sign tensor must contain only -1 and +1")
    axis = axis % s.ndim
    bits = np.moveaxis(s == 1, axis, -1)
    n = bits.shape[-1]
    nw = _n_words(n)
    padded = np.zeros(bits.shape[:-1] + (nw * WORD_BITS,), dtype=np.uint64)
    padded[..., :n] = bits
    padded = padded.reshape(bits.shape[:-1] + (nw, WORD_BITS))
    weights = np.left_shift(np.uint64(1), np.arange(WORD_BITS, dtype=np.uint64))
    words = np.bitwise_or.reduce(padded * weights, axis=-1)
    return BinaryTensor(tuple(s.shape), axis, words.astype(np.uint64))


def unpack_signs(b: BinaryTensor) -> np.ndarray:
    shifts = np.arange(WORD_BITS, dtype=np.uint64)
    bits = (b.words[..., None] >> shifts) & np.uint64(1)
    bits = bits.reshape(b.words.shape[:-1] + (-1,))[..., : b.n_bits]
    signs = np.where(bits == 1, 1, -1).astype(np.int8)
    return np.moveaxis(signs, -1, b.axis)


def xnor_popcount_core(a: BinaryTensor, w: BinaryTensor, spec: ConvSpec) -> np.ndarray:
    """Integer convolution core ``2 * popcount(xnor) - n_bits`` per output element.

    Equals the sum of products of the +-1 values over each window exactly.
    """
    if len(a.logical_shape) != 3 or a.axis != 0 or a.logical_shape[0] != spec.c_in:
        raise ShapeError(
            f"activations must be (c_in={spec.c_in}, H, W) packed on axis 0, "
            f"got shape {a.logical_shape} packed on axis {a.axis}"
        )
    if tuple(w.logical_shape) != (spec.c_out, spec.c_in, spec.k, spec.k) or w.axis != 1:
        raise ShapeError(
            f"weights must be {(spec.c_out, spec.c_in, spec.k, spec.k)} packed on axis 1, "
            f"got shape {w.logical_shape} packed on axis {w.axis}"
        )
    _, h, wd = a.logical_shape
    h_out, w_out = spec.output_size(h, wd)
    k, s, p = spec.k, spec.stride, spec.padding
    act = a.words  # (H, W, nw)
    if p:
        act = np.pad(act, ((p, p), (p, p), (0, 0)))
    filt = w.words  # (c_out, k, k, nw)
    mask = _tail_mask(spec.c_in)
    acc = np.zeros((spec.c_out, h_out, w_out), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            window = act[i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s]
            agree = ~(window[None] ^ filt[:, i, j][:, None, None, :]) & mask
            acc += np.bitwise_count(agree).sum(axis=-1, dtype=np.int64)
    n_bits = spec.c_in * k * k
    return 2 * acc - n_bits


def xnor_popcount_conv(a: BinaryTensor, w: BinaryTensor, alpha, spec: ConvSpec) -> np.ndarray:
    """Binary convolution scaled per output channel: ``alpha_c * core``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (spec.c_out,):
        raise ShapeError(f"scale vector has shape {alpha.shape}, expected ({spec.c_out},)")
    return alpha[:, None, None] * xnor_popcount_core(a, w, spec)


@dataclass(frozen=True)
class OpsReport:
    real_flops: int
    binary_mults: int
    total_ops: int
    memory_bytes: int
    kernel_bytes: int = 0
    convention: str = OPS_CONVENTION

    @property
    def binary_ops(self) -> int:
        """OPs contributed by the 1-bit multiplications."""
        return self.binary_mults // WORD_BITS


def memory_bytes(real_params: int, binary_params: int) -> int:
    return 4 * real_params + (binary_params + 7) // 8


def count_ops(spec: ConvSpec, out_h: int, out_w: int, binary: bool) -> OpsReport:
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    mults = spec.c_out * spec.c_in * spec.k * spec.k * out_h * out_w
    n_weights = spec.c_out * spec.c_in * spec.k * spec.k
    if binary:
        real = spec.c_out * out_h * out_w  # per-channel scale multiply
        mem = memory_bytes(spec.c_out, n_weights)
        return OpsReport(real, mults, real + mults // WORD_BITS, mem, memory_bytes(0, n_weights))
    kernel = memory_bytes(n_weights, 0)
    return OpsReport(mults, 0, mults, kernel, kernel)
