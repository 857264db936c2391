import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ubl import numcore as nc
from ubl.numcore import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)


def test_cosine_examples():
    v = np.array([0.6, 0.8], np.float32)
    assert nc.cosine_sim(v, v).item() == pytest.approx(1.0, abs=1e-6)
    assert nc.cosine_sim([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(0.0, abs=1e-7)
    # 8 / (3 * 3)
    assert nc.cosine_sim([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]).item() == pytest.approx(8 / 9, abs=1e-6)


def test_cosine_zero_vector_raises():
    with pytest.raises(nc.DomainError):
        nc.cosine_sim([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(nc.ShapeError):
        nc.cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax_rows(np.full((1, 4), 3.0)).data, 0.25, atol=1e-7)
    np.testing.assert_allclose(nc.softmax_rows(np.array([[2.5]])).data, [[1.0]])
    np.testing.assert_allclose(nc.softmax_rows(np.array([[0.0, math.log(2)]]), 1.0).data,
                               [[1 / 3, 2 / 3]], atol=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_bad_tau(tau):
    with pytest.raises(nc.DomainError):
        nc.softmax_rows(np.zeros((2, 2)), tau)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite),
       st.floats(0.05, 5.0))
def test_softmax_rows_are_distributions(m, tau):
    s = nc.softmax_rows(m, tau).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@given(arrays(np.float32, st.integers(1, 12), elements=finite),
       arrays(np.float32, st.integers(1, 12), elements=finite))
def test_cosine_bounded(a, b):
    if a.shape != b.shape or not a.any() or not b.any():
        return
    c = nc.cosine_sim(a, b).item()
    assert -1 - 1e-6 <= c <= 1 + 1e-6


def test_backward_gives_every_leaf_a_gradient(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    loss = nc.tsum(nc.relu(nc.matmul(a, b)) * 2.0 + 1.0)
    loss.backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_tensor_keeps_float32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float32 and t.data.size == 4


@pytest.mark.parametrize("op", [
    lambda ts: nc.tsum(nc.mul(nc.l2_normalize(ts[0]), ts[1])),
    lambda ts: nc.tmean(nc.log_softmax_rows(nc.matmul(ts[0], nc.transpose(ts[1])), 0.5)),
    lambda ts: nc.tsum(nc.exp(nc.scale(ts[0], 0.3)) + nc.neg(ts[1])),
    lambda ts: nc.tsum(nc.rowwise_cosine(ts[0], ts[1])),
    lambda ts: nc.tsum(nc.log(nc.exp(ts[0]) + 1.0) * ts[1]),
])
def test_primitive_gradients(op, rng):
    params = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    assert nc.grad_check(op, params) < 1e-5


def test_grad_check_flags_wrong_gradient(rng):
    def bad(ts):
        x = ts[0]
        # forward x^2, backward claims 1
        out = x._child(x.data ** 2, (x,), lambda g: (g,))
        return nc.tsum(out)
    assert nc.grad_check(bad, [rng.normal(size=5) + 3]) > 0.1


@pytest.mark.filterwarnings("ignore:overflow")
def test_grad_check_non_finite():
    with pytest.raises(nc.NumericError):
        nc.grad_check(lambda ts: nc.tsum(nc.exp(nc.scale(ts[0], 1e4))), [np.array([1.0, 2.0])])


def test_log_domain():
    with pytest.raises(nc.DomainError):
        nc.log(Tensor([-1.0, 2.0]))


def test_fft_constant_image_has_only_dc():
    s = nc.fft2(np.full((8, 6), 7.0))
    amp = s.amplitude.copy()
    assert amp[0, 0] == pytest.approx(7 * 48)
    amp[0, 0] = 0
    assert np.all(amp < 1e-9)


@given(arrays(np.float32, st.tuples(st.integers(2, 16), st.integers(2, 16)),
              elements=st.floats(0, 255, width=32)))
def test_fft_roundtrip(x):
    s = nc.fft2(x)
    assert s.amplitude.shape == s.phase.shape
    assert np.all(s.amplitude >= 0)
    np.testing.assert_allclose(nc.ifft2(s).data, x, atol=1e-4 * max(1.0, float(np.abs(x).max())) / 100)


def test_fft_shape_error():
    with pytest.raises(nc.ShapeError):
        nc.fft2(np.zeros(5))


def test_centered_window_is_conjugate_symmetric():
    w = nc.centered_window((64, 64), 0.2)
    assert w[0, 0] and w.sum() == 13 * 13
    flipped = np.roll(w[::-1, ::-1], 1, axis=(0, 1))
    np.testing.assert_array_equal(w, flipped)


@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 4)), elements=finite))
def test_bfmt_roundtrip(a):
    buf = io.BytesIO()
    nc.write_bfmt(buf, a)
    buf.seek(0)
    back = nc.read_bfmt(buf)
    assert back.shape == a.shape and back.dtype == np.float32
    np.testing.assert_array_equal(back, a)


def test_bfmt_truncated():
    buf = io.BytesIO()
    nc.write_bfmt(buf, np.ones((4, 4), np.float32))
    raw = buf.getvalue()
    with pytest.raises(nc.FormatError):
        nc.read_bfmt(io.BytesIO(raw[:-3]))
    with pytest.raises(nc.FormatError):
        nc.read_bfmt(io.BytesIO(b"XXXX" + raw[4:]))
