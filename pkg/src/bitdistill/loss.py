"""Entropy distillation loss on proposal pairs, its gradient, and the total loss.

For a student patch ``rs`` and teacher patch ``rt`` (both ``(C, P, P)``,
softmax-transformed) the loss is reduced per channel as::

    sum(rs - rt) + sum((rs - rt)**2) / cov_c + log(cov_c)

and averaged over channels. ``cov_c`` is the spatial cross-covariance
``E[rs*rt] - E[rs]E[rt]`` clamped below at ``COV_FLOOR``; a clamped channel
contributes no covariance gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

COV_FLOOR = 1e-8


@dataclass(frozen=True)
class LossBreakdown:
    l_gt: float
    l_p: float
    l_r: float
    total: float
    lam: float
    mu: float


def _flat(rs, rt):
    # extended-precision inputs stay extended (used by the finite-difference check)
    dtype = np.result_type(np.asarray(rs).dtype, np.asarray(rt).dtype, np.float64)
    rs = np.asarray(rs, dtype=dtype)
    rt = np.asarray(rt, dtype=dtype)
    if rs.shape != rt.shape:
        raise ShapeError(f"student patch {rs.shape} and teacher patch {rt.shape} differ")
    if rs.ndim < 3:
        raise ShapeError(f"patches must be (..., C, P, P), got shape {rs.shape}")
    return rs.reshape(rs.shape[:-2] + (-1,)), rt.reshape(rt.shape[:-2] + (-1,))


def cross_covariance(rs, rt) -> np.ndarray:
    """Unclamped spatial cross-covariance per channel of ``(..., C, P, P)`` arrays."""
    s, t = _flat(rs, rt)
    return (s * t).mean(axis=-1) - s.mean(axis=-1) * t.mean(axis=-1)


def proposal_covariance(rs, rt, c: int) -> float:
    return float(max(cross_covariance(rs, rt)[..., c], COV_FLOOR))


def _terms(rs, rt):
    s, t = _flat(rs, rt)
    raw = cross_covariance(rs, rt)
    cov = np.maximum(raw, COV_FLOOR)
    d = s - t
    term1 = d.sum(axis=-1)
    d2 = (d * d).sum(axis=-1)
    term2 = d2 / cov
    term3 = np.log(cov)
    return s, t, d, d2, raw, cov, term1, term2, term3


def _check_finite(per_channel):
    bad = ~np.isfinite(per_channel)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise FloatingPointError(f"non-finite entropy loss term in channel {int(idx[-1])}")


def entropy_loss_batch(rs, rt) -> np.ndarray:
    """Per-pair losses for stacked patches ``(N, C, P, P)`` (or a single pair)."""
    *_, term1, term2, term3 = _terms(rs, rt)
    per_channel = term1 + term2 + term3
    _check_finite(per_channel)
    return per_channel.mean(axis=-1)


def entropy_loss_grad_batch(rs, rt, freeze_cov: bool = False, tangent: bool = False) -> np.ndarray:
    """Gradient of :func:`entropy_loss_batch` with respect to ``rs``.

    ``freeze_cov`` treats the covariance as a constant. ``tangent`` removes
    the per-channel mean of the gradient, i.e. projects it onto directions
    that keep each channel's sum fixed (the only directions a softmax output
    can move in); the constant term-1 gradient vanishes under it.
    """
    shape = np.shape(rs)
    s, t, d, d2, raw, cov, term1, term2, term3 = _terms(rs, rt)
    _check_finite(term1 + term2 + term3)
    m = s.shape[-1]
    n_channels = s.shape[-2]
    grad = 1.0 + 2.0 * d / cov[..., None]
    if not freeze_cov:
        active = (raw > COV_FLOOR)[..., None]
        dcov = (t - t.mean(axis=-1, keepdims=True)) / m
        coeff = (1.0 / cov - d2 / cov**2)[..., None]
        grad = grad + np.where(active, coeff * dcov, 0.0)
    grad = grad / n_channels
    if tangent:
        grad = grad - grad.mean(axis=-1, keepdims=True)
    return grad.reshape(shape)


def entropy_loss(pair) -> float:
    return float(entropy_loss_batch(pair.student_patch, pair.teacher_patch))


def entropy_loss_grad(pair, freeze_cov: bool = False, tangent: bool = False) -> np.ndarray:
    return entropy_loss_grad_batch(pair.student_patch, pair.teacher_patch, freeze_cov, tangent)


def distill_loss_total(pairs, mask) -> float:
    """Mean entropy loss over the pairs selected by ``mask`` (in index order)."""
    bits = np.asarray(getattr(mask, "bits", mask))
    if len(bits) != len(pairs):
        raise ShapeError(f"mask length {len(bits)} != number of pairs {len(pairs)}")
    chosen = [pairs[i] for i in np.flatnonzero(bits)]
    if not chosen:
        raise ValueError("mask selects no pairs")
    total = 0.0
    for pair in chosen:
        total += entropy_loss(pair)
    return total / len(chosen)


def total_loss(l_gt: float, l_p: float, l_r: float, lam: float, mu: float) -> LossBreakdown:
    """``l_gt + lam * l_p + mu * l_r``, evaluated left to right."""
    vals = np.array([l_gt, l_p, l_r, lam, mu], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("total_loss inputs must be finite")
    total = l_gt + lam * l_p + mu * l_r
    return LossBreakdown(float(l_gt), float(l_p), float(l_r), float(total), float(lam), float(mu))
