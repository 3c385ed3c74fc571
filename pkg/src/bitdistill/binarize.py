"""Sign binarization, channel-wise scales and the straight-through gradient."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def sign_binarize(t) -> np.ndarray:
    """Map values > 0 to +1 and everything else (including 0) to -1.

    Returns an ``int8`` array. NaN has no sign and is rejected.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.isnan(t).any():
        raise ValueError("cannot binarize NaN values")
    return np.where(t > 0, 1, -1).astype(np.int8)


def optimal_scales(w) -> np.ndarray:
    """Per-output-channel scale minimizing ``||w_c - a * sign(w_c)||^2``.

    The least-squares solution is the mean absolute weight of the channel.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 1 or w.shape[0] == 0:
        raise ShapeError(f"weights need an output-channel axis, got shape {w.shape}")
    alpha = np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)
    zero = np.flatnonzero(alpha == 0)
    if zero.size:
        raise ValueError(f"output channel(s) {zero.tolist()} are all zero; scale must be positive")
    return alpha


def _broadcast_scales(alpha, shape) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (shape[0],):
        raise ShapeError(f"scale vector shape {alpha.shape} does not match weights {shape}")
    return alpha.reshape((-1,) + (1,) * (len(shape) - 1))


def reconstruction_residual(w, alpha) -> np.ndarray:
    """Residual tensor ``w - alpha * sign(w)`` (alpha broadcast per output channel)."""
    w = np.asarray(w, dtype=np.float64)
    return w - _broadcast_scales(alpha, w.shape) * sign_binarize(w)


def reconstruction_loss(w, alpha, reduction: str = "sum") -> float:
    """Squared Frobenius norm of the reconstruction residual.

    ``reduction="mean"`` divides by the element count; the training penalty
    uses that form so its weight is comparable across layer sizes.
    """
    r = reconstruction_residual(w, alpha)
    sq = r * r
    if reduction == "sum":
        return float(sq.sum())
    if reduction == "mean":
        return float(sq.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


def ste_backward(grad_out, pre_activation) -> np.ndarray:
    """Clipped straight-through estimator: pass gradient where ``|x| <= 1``."""
    g = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(pre_activation, dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} != activation shape {x.shape}")
    return np.where(np.abs(x) <= 1.0, g, 0.0)
