"""Finite-difference verification of the entropy-loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import entropy_loss_batch, entropy_loss_grad
from .proposals import DEFAULT_TEMPERATURE, PATCH_SIZE, ProposalPair, Region, channel_transform

FD_STEP = 1e-6
REL_TOL = 1e-6
TINY_GRAD = 1e-12
ABS_TOL_TINY = 1e-10


def random_pair(rng: np.random.Generator, channels: int = 8, p: int = PATCH_SIZE,
                T: float = DEFAULT_TEMPERATURE, index: int = 0, contrast: float = 2.0) -> ProposalPair:
    """Transformed pair whose student is a noisy view of the teacher patch.

    ``contrast`` is the std of the raw teacher logits; the student adds noise
    at 0.75 of that scale.
    """
    raw_t = contrast * rng.standard_normal((channels, p, p))
    raw_s = raw_t + 0.75 * contrast * rng.standard_normal((channels, p, p))
    region = Region(0.0, 0.0, float(p), float(p))
    return ProposalPair(index, region, "teacher", channel_transform(raw_t, T), channel_transform(raw_s, T))


def finite_difference_grad(pair: ProposalPair, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the loss, evaluated in extended precision.

    All ``2 * n`` perturbed copies are evaluated as one batch.
    """
    rs = np.asarray(pair.student_patch, dtype=np.longdouble)
    rt = np.asarray(pair.teacher_patch, dtype=np.longdouble)
    n = rs.size
    step = np.longdouble(h)
    eye = np.eye(n, dtype=np.longdouble).reshape((n,) + rs.shape) * step
    plus = entropy_loss_batch(rs[None] + eye, np.broadcast_to(rt, eye.shape))
    minus = entropy_loss_batch(rs[None] - eye, np.broadcast_to(rt, eye.shape))
    return ((plus - minus) / (2 * step)).astype(np.float64).reshape(rs.shape)


def max_relative_error(analytic, numeric) -> tuple[float, bool]:
    """Element-wise relative error; near-zero elements are checked absolutely.

    Returns ``(max relative error over regular elements, tiny elements ok)``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    tiny = scale < TINY_GRAD
    tiny_ok = bool(np.all(np.abs(a - n)[tiny] <= ABS_TOL_TINY))
    rel = np.abs(a - n)[~tiny] / scale[~tiny]
    return (float(rel.max()) if rel.size else 0.0), tiny_ok


@dataclass(frozen=True)
class GradCheckResult:
    pair: int
    max_rel_err: float
    passed: bool


def run_grad_check(n_pairs: int, seed: int, tol: float = REL_TOL, channels: int = 8,
                   p: int = PATCH_SIZE, h: float = FD_STEP) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_pairs):
        pair = random_pair(rng, channels, p, index=i)
        err, tiny_ok = max_relative_error(entropy_loss_grad(pair), finite_difference_grad(pair, h))
        results.append(GradCheckResult(i, err, tiny_ok and err < tol))
    return results
