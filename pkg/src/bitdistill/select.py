"""Information-discrepancy scoring of proposal pairs and top-k mask selection.

The per-channel covariance of a pair is taken as an isotropic scalar: the
population variance of the pooled teacher and student pixels of that channel,
floored at ``VARIANCE_FLOOR``. The Mahalanobis form then reduces to
``sum_c ||t_c - s_c||^2 / var_c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

VARIANCE_FLOOR = 1e-5


@dataclass(frozen=True)
class DiscrepancyScore:
    pair_index: int
    epsilon: float


@dataclass(frozen=True)
class SelectionMask:
    bits: np.ndarray
    k: int

    @property
    def indices(self) -> list[int]:
        return np.flatnonzero(self.bits).tolist()


def _pair_arrays(pair):
    t = np.asarray(pair.teacher_patch, dtype=np.float64)
    s = np.asarray(pair.student_patch, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"teacher patch {t.shape} and student patch {s.shape} differ")
    return t, s


def pooled_variance(teacher, student) -> np.ndarray:
    """Unfloored pooled variance per channel for arrays shaped ``(..., C, P, P)``."""
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    pool = np.concatenate([t.reshape(t.shape[:-2] + (-1,)), s.reshape(s.shape[:-2] + (-1,))], axis=-1)
    return pool.var(axis=-1)


def discrepancy(teacher, student) -> np.ndarray:
    """Batched discrepancy over the channel axis of ``(..., C, P, P)`` arrays."""
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    var = np.maximum(pooled_variance(t, s), VARIANCE_FLOOR)
    d2 = ((t - s) ** 2).reshape(t.shape[:-2] + (-1,)).sum(axis=-1)
    return np.abs(d2 / var).sum(axis=-1)


def pair_covariance_channel(pair, c: int) -> float:
    t, s = _pair_arrays(pair)
    return float(max(pooled_variance(t[c], s[c]), VARIANCE_FLOOR))


def mahalanobis_discrepancy(pair) -> DiscrepancyScore:
    t, s = _pair_arrays(pair)
    return DiscrepancyScore(pair.index, float(discrepancy(t, s)))


def selection_size(n: int, gamma: float) -> int:
    """``max(1, round_half_up(gamma * n))``."""
    return max(1, math.floor(gamma * n + 0.5))


def select_mask(scores, gamma: float) -> SelectionMask:
    """Mask of the ``k`` largest scores; equal scores prefer the lower index.

    ``scores`` may hold :class:`DiscrepancyScore` objects or plain numbers;
    mask positions follow list order.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    eps = np.array([getattr(sc, "epsilon", sc) for sc in scores], dtype=np.float64)
    if eps.size == 0:
        raise ValueError("cannot select from an empty score list")
    k = selection_size(eps.size, gamma)
    order = np.argsort(-eps, kind="stable")
    bits = np.zeros(eps.size, dtype=np.int8)
    bits[order[:k]] = 1
    return SelectionMask(bits, k)
