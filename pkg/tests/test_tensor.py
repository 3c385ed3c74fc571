import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitdistill.tensor import (
    ConvSpec,
    ShapeError,
    channel_reduce,
    conv2d_ref,
    load_tensor,
    save_tensor,
)


def naive_conv(x, w, stride, padding, pad_value=0.0):
    """Scalar loop oracle, independent of the production kernel."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.full((c_in, h + 2 * padding, wd + 2 * padding), pad_value)
    xp[:, padding : padding + h, padding : padding + wd] = x
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = acc
    return out


def test_conv_all_ones():
    out = conv2d_ref(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), ConvSpec(1, 1, 3))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv_zero_weights():
    rng = np.random.default_rng(0)
    out = conv2d_ref(rng.normal(size=(2, 6, 6)), np.zeros((3, 2, 3, 3)), ConvSpec(3, 2, 3, 1, 1))
    assert np.all(out == 0.0)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    got = conv2d_ref(x, w, ConvSpec(3, 2, 3))
    np.testing.assert_allclose(got, naive_conv(x, w, 1, 0), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding,pad_value", [(2, 1, 0.0), (1, 2, -1.0), (3, 0, 0.0)])
def test_conv_stride_padding(stride, padding, pad_value):
    rng = np.random.default_rng(stride * 10 + padding)
    spec = ConvSpec(2, 3, 3, stride, padding)
    h = 3 * stride + 3 - 2 * padding if stride > 1 else 7
    x = rng.normal(size=(3, h, h))
    w = rng.normal(size=(2, 3, 3, 3))
    got = conv2d_ref(x, w, spec, pad_value=pad_value)
    np.testing.assert_allclose(got, naive_conv(x, w, stride, padding, pad_value), atol=1e-12)


def test_conv_identity_kernel():
    x = np.random.default_rng(2).normal(size=(1, 4, 5))
    out = conv2d_ref(x, np.ones((1, 1, 1, 1)), ConvSpec(1, 1, 1))
    assert np.array_equal(out, x)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1), seed=st.integers(0, 2**16))
def test_conv_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-1, 1, size=(2, 2, 5, 5))
    w = rng.uniform(-1, 1, size=(2, 2, 3, 3))
    spec = ConvSpec(2, 2, 3, 1, 1)
    lhs = conv2d_ref(a * x + b * y, w, spec)
    rhs = a * conv2d_ref(x, w, spec) + b * conv2d_ref(y, w, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 5, 5\).*\(3, 3, 3, 3\)"):
        conv2d_ref(np.zeros((2, 5, 5)), np.zeros((3, 3, 3, 3)), ConvSpec(3, 3, 3))


def test_convspec_rejects_fractional_output():
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 3, stride=2, padding=1).output_size(32, 32)
    with pytest.raises(ValueError):
        ConvSpec(1, 1, 3, stride=0)
    assert ConvSpec(1, 1, 3, stride=2, padding=1).output_size(33, 33) == (17, 17)


def test_channel_reduce_examples():
    assert channel_reduce(np.ones((1, 2, 2)), "mean")[0] == 1.0
    assert channel_reduce(np.ones((1, 2, 2)), "var")[0] == 0.0
    t = np.array([[0.0, 2.0]])
    assert channel_reduce(t, "mean")[0] == 1.0
    assert channel_reduce(t, "var")[0] == 1.0


def test_channel_reduce_two_pass_oracle():
    t = np.random.default_rng(3).normal(size=(1, 4, 4))
    vals = list(t.ravel())
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    assert abs(channel_reduce(t, "mean")[0] - mean) < 1e-12
    assert abs(channel_reduce(t, "var")[0] - var) < 1e-12


def test_channel_reduce_errors():
    with pytest.raises(ValueError):
        channel_reduce(np.zeros((2, 0)), "mean")
    with pytest.raises(ValueError):
        channel_reduce(np.zeros((2, 3)), "median")


def test_serialization_round_trip(tmp_path):
    t = np.random.default_rng(4).normal(size=(2, 3, 4)).astype(np.float32)
    path = tmp_path / "t.idat"
    save_tensor(path, t)
    raw = path.read_bytes()
    assert raw[:4] == b"IDAT"
    assert np.frombuffer(raw[4:12], dtype="<u4").tolist() == [1, 3]
    assert np.frombuffer(raw[12:24], dtype="<u4").tolist() == [2, 3, 4]
    assert len(raw) == 24 + 4 * t.size
    assert np.array_equal(load_tensor(path), t.astype(np.float64))


def test_serialization_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.idat"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="not an IDAT"):
        load_tensor(path)
