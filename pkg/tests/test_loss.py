import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitdistill.gradcheck import (
    finite_difference_grad,
    max_relative_error,
    random_pair,
    run_grad_check,
)
from bitdistill.loss import (
    COV_FLOOR,
    cross_covariance,
    distill_loss_total,
    entropy_loss,
    entropy_loss_batch,
    entropy_loss_grad,
    proposal_covariance,
    total_loss,
)
from bitdistill.proposals import ProposalPair, Region, channel_transform
from bitdistill.select import SelectionMask


def make_pair(t, s, index=0):
    return ProposalPair(index, Region(0, 0, 1, 1), "teacher", np.asarray(t, float), np.asarray(s, float))


def oracle_covariance(a, b):
    n = len(a)
    e_ab = sum(x * y for x, y in zip(a, b)) / n
    return e_ab - (sum(a) / n) * (sum(b) / n)


def oracle_loss(rs, rt):
    """Term-by-term evaluation, one channel at a time, with plain Python floats."""
    per_channel = []
    for c in range(rs.shape[0]):
        s = [float(v) for v in rs[c].ravel()]
        t = [float(v) for v in rt[c].ravel()]
        cov = max(oracle_covariance(s, t), COV_FLOOR)
        term1 = sum(a - b for a, b in zip(s, t))
        term2 = sum((a - b) ** 2 for a, b in zip(s, t)) / cov
        per_channel.append(term1 + term2 + math.log(cov))
    return sum(per_channel) / len(per_channel)


def test_covariance_example():
    rs = np.array([[[0.0, 1.0, 0.0, 1.0]]])
    rt = np.array([[[0.0, 2.0, 0.0, 2.0]]])
    # E[rs*rt] = 1, E[rs] = 0.5, E[rt] = 1
    assert oracle_covariance([0, 1, 0, 1], [0, 2, 0, 2]) == 0.5
    assert proposal_covariance(rs, rt, 0) == pytest.approx(0.5, abs=1e-15)
    assert proposal_covariance(rs, rs, 0) == pytest.approx(0.25, abs=1e-15)


def test_covariance_self_and_constant():
    x = np.random.default_rng(0).random((2, 3, 3))
    for c in range(2):
        assert proposal_covariance(x, x, c) == pytest.approx(max(x[c].var(), COV_FLOOR), rel=1e-12)
    const = np.full((1, 3, 3), 0.5)
    assert cross_covariance(const, x[:1])[0] == pytest.approx(0.0, abs=1e-16)
    assert proposal_covariance(const, x[:1], 0) == COV_FLOOR


def test_loss_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pair = random_pair(rng)
        assert entropy_loss(pair) == pytest.approx(oracle_loss(pair.student_patch, pair.teacher_patch), abs=1e-10)


def test_loss_identical_patches():
    x = channel_transform(np.random.default_rng(2).normal(size=(4, 7, 7)), 4.0)
    expected = np.mean([math.log(max(x[c].var(), COV_FLOOR)) for c in range(4)])
    assert entropy_loss(make_pair(x, x.copy())) == pytest.approx(expected, abs=1e-12)


def test_term1_vanishes_for_transformed_pairs():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pair = random_pair(rng)
        term1 = (pair.student_patch - pair.teacher_patch).reshape(8, -1).sum(axis=1)
        assert np.abs(term1).max() <= 1e-5


def test_non_finite_names_channel():
    rs = np.full((2, 2, 2), 0.25)
    rt = rs.copy()
    rs[1, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="channel 1"):
        entropy_loss(make_pair(rt, rs))


def test_constant_equal_patches_zero_gradient_when_projected():
    x = np.full((3, 7, 7), 1 / 49)
    pair = make_pair(x, x.copy())
    np.testing.assert_allclose(entropy_loss_grad(pair, tangent=True), 0.0, atol=1e-15)
    # the ambient gradient keeps the constant slope of the pixel-sum term
    np.testing.assert_allclose(entropy_loss_grad(pair), 1 / 3, atol=1e-15)


def test_gradient_matches_finite_differences_small_step():
    rng = np.random.default_rng(4)
    for _ in range(10):
        pair = random_pair(rng)
        err, tiny_ok = max_relative_error(entropy_loss_grad(pair), finite_difference_grad(pair, 1e-7))
        assert tiny_ok and err < 1e-6


def test_gradient_clamped_channel_has_no_covariance_term():
    rng = np.random.default_rng(5)
    rt = channel_transform(rng.normal(size=(2, 7, 7)), 4.0)
    rs = rt.copy()
    rs[0] = 1 / 49  # constant student channel: covariance 0, clamped
    pair = make_pair(rt, rs)
    frozen = entropy_loss_grad(pair, freeze_cov=True)
    full = entropy_loss_grad(pair)
    np.testing.assert_array_equal(full[0], frozen[0])
    numeric = finite_difference_grad(pair, 1e-9)
    np.testing.assert_allclose(full[0], numeric[0], rtol=1e-5)


def test_frozen_covariance_term2_gradient():
    pair = random_pair(np.random.default_rng(6))
    rs, rt = pair.student_patch, pair.teacher_patch
    channels = rs.shape[0]
    cov = np.maximum(cross_covariance(rs, rt), COV_FLOOR)[:, None, None]
    term2_grad = entropy_loss_grad(pair, freeze_cov=True) * channels - 1.0
    np.testing.assert_allclose(term2_grad, 2 * (rs - rt) / cov, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("contrast, eta", [(4.0, 1e-3), (2.0, 1e-4)])
def test_descent_step(contrast, eta):
    rng = np.random.default_rng(7)
    improved = 0
    for _ in range(100):
        pair = random_pair(rng, contrast=contrast)
        stepped = pair.student_patch - eta * entropy_loss_grad(pair)
        stepped = stepped / stepped.sum(axis=(1, 2), keepdims=True)
        after = entropy_loss_batch(stepped, pair.teacher_patch)
        improved += after <= entropy_loss(pair)
    assert improved >= 95


def test_distill_loss_total_reductions():
    rng = np.random.default_rng(8)
    pairs = [random_pair(rng, index=i) for i in range(3)]
    losses = [entropy_loss(p) for p in pairs]
    assert distill_loss_total(pairs, [0, 1, 0]) == losses[1]
    assert distill_loss_total(pairs, SelectionMask(np.array([1, 0, 1]), 2)) == pytest.approx(
        (losses[0] + losses[2]) / 2, rel=1e-15)
    altered = list(pairs)
    altered[1] = random_pair(rng, index=1)
    assert distill_loss_total(altered, [1, 0, 1]) == distill_loss_total(pairs, [1, 0, 1])
    with pytest.raises(ValueError):
        distill_loss_total(pairs, [1, 0])


def test_total_loss_examples():
    out = total_loss(1.0, 2.0, 3.0, 0.4, 1e-4)
    assert out.total == pytest.approx(1.8003, abs=1e-15)
    assert total_loss(1.5, 2.0, 3.0, 0.0, 0.0).total == 1.5
    assert total_loss(1.5, 0.0, 0.0, 0.4, 1e-4).total == 1.5
    with pytest.raises(ValueError):
        total_loss(float("nan"), 0, 0, 0.4, 1e-4)


@settings(max_examples=60, deadline=None)
@given(
    vals=st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    delta=st.floats(-10, 10),
    which=st.integers(0, 2),
)
def test_total_loss_affine(vals, delta, which):
    lam, mu = 0.4, 1e-4
    coef = [1.0, lam, mu][which]
    moved = list(vals)
    moved[which] += delta
    diff = total_loss(*moved, lam, mu).total - total_loss(*vals, lam, mu).total
    assert diff == pytest.approx(coef * delta, abs=1e-9)


def test_grad_check_single_pair_deterministic():
    a = run_grad_check(1, 42)
    b = run_grad_check(1, 42)
    assert a == b
