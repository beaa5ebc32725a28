import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convmae import tensor as T
from convmae.tensor import Param, ShapeError, TapeError, Tensor, backward, grad_check


def test_add_trivial():
    out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [4.0, 6.0])


def test_mul_annihilator():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    np.testing.assert_array_equal(T.mul(x, 0.0).data, np.zeros((3, 4)))


def test_broadcast_trailing():
    out = T.add(Tensor(np.zeros((2, 3))), Tensor(np.arange(3.0)))
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out.data, np.tile(np.arange(3.0), (2, 1)))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)


def test_elementwise_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    np.testing.assert_allclose(T.elementwise("sub", a, b).data, [-2.0, -3.0])
    np.testing.assert_allclose(T.elementwise("mul", a, b).data, [3.0, 10.0])
    np.testing.assert_allclose(T.elementwise("scalar_mul", 2.0, a).data, [2.0, 4.0])


# scalar-loop broadcasting oracle -------------------------------------------

def _broadcast_loop(op, a, b):
    out_shape = np.broadcast_shapes(a.shape, b.shape)
    out = np.zeros(out_shape)

    def pick(arr, idx):
        off = len(idx) - arr.ndim
        return arr[tuple(0 if arr.shape[d] == 1 else idx[off + d] for d in range(arr.ndim))]

    for idx in np.ndindex(out_shape):
        out[idx] = op(pick(a, idx), pick(b, idx))
    return out


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=3),
       st.lists(st.integers(1, 4), min_size=0, max_size=3),
       st.sampled_from(["add", "sub", "mul"]))
def test_broadcast_matches_scalar_loop(sa, sb, opname):
    rng = np.random.default_rng(7)
    a = rng.standard_normal(sa)
    b = rng.standard_normal(sb)
    try:
        expected = _broadcast_loop({"add": lambda x, y: x + y,
                                    "sub": lambda x, y: x - y,
                                    "mul": lambda x, y: x * y}[opname], a, b)
    except ValueError:
        with pytest.raises(ShapeError):
            T.elementwise(opname, Tensor(a), Tensor(b))
        return
    got = T.elementwise(opname, Tensor(a, dtype="f64"), Tensor(b, dtype="f64"))
    np.testing.assert_allclose(got.data, expected, atol=1e-12)


# reductions -----------------------------------------------------------------

def test_l2_norm_345():
    assert T.reduce("l2_norm", Tensor([3.0, 4.0]), axes=(0,)).item() == pytest.approx(5.0)


def test_mean_zeros():
    assert T.reduce("mean", Tensor(np.zeros((2, 2)))).item() == 0.0


def test_l2_norm_spatial_keepdims_matches_loop(rng):
    x = rng.standard_normal((5, 6, 3))
    got = T.reduce("l2_norm", Tensor(x, dtype="f64"), axes=(0, 1), keepdims=True)
    assert got.shape == (1, 1, 3)
    expected = np.zeros(3)
    for c in range(3):
        acc = 0.0
        for i in range(5):
            for j in range(6):
                acc += x[i, j, c] ** 2
        expected[c] = np.sqrt(acc)
    np.testing.assert_allclose(got.data.reshape(3), expected, rtol=1e-12)


def test_invalid_axis():
    with pytest.raises(ShapeError):
        T.reduce("sum", Tensor(np.zeros((2, 2))), axes=(5,))


# backward -------------------------------------------------------------------

def test_backward_linear_grad_is_x():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.zeros(3), dtype="f64", requires_grad=True)
    loss = (w * x).sum()
    backward(loss)
    np.testing.assert_allclose(w.grad, x)


def test_unused_param_grad_stays_zero():
    p = Param("unused", np.ones(4))
    x = Tensor(np.ones(3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(p.grad, np.zeros(4))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError):
        backward(x * 2.0)


def test_double_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_grad_accumulates_additively():
    x = Tensor(np.ones(3), dtype="f64", requires_grad=True)
    backward((x * 2.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, np.full(3, 5.0))


def test_composite_graph_matches_finite_differences(rng):
    def f(a, b):
        return ((a @ b) * (a.sum(axes=1, keepdims=True) + 1.0)).sum()
    a = Tensor(rng.standard_normal((3, 4)), dtype="f64")
    b = Tensor(rng.standard_normal((4, 2)), dtype="f64")
    assert grad_check(f, [a, b]) < 1e-4


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


# grad_check contract ---------------------------------------------------------

def test_grad_check_quadratic():
    x = Tensor(np.random.default_rng(1).standard_normal(6), dtype="f64")
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-6


def test_grad_check_constant():
    x = Tensor(np.random.default_rng(2).standard_normal(4), dtype="f64")
    err = grad_check(lambda t: (t * 0.0).sum() + 0.0 * t.sum(), x)
    assert err == 0.0


def test_grad_check_reports_nonfinite_coordinate():
    x = Tensor(np.array([0.0]), dtype="f64")
    with pytest.raises(FloatingPointError) as exc:
        grad_check(lambda t: T.log(t).sum(), x)
    assert "coordinate" in str(exc.value) or "non-finite" in str(exc.value)


# misc primitives -------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4))
def test_segment_sum_and_repeat_roundtrip(nseg, width):
    rng = np.random.default_rng(3)
    counts = rng.integers(0, 4, size=nseg)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    x = rng.standard_normal((int(offsets[-1]), width))
    s = T.segment_sum(Tensor(x, dtype="f64"), offsets)
    expected = np.stack([x[offsets[i]:offsets[i + 1]].sum(0) if counts[i] else np.zeros(width)
                         for i in range(nseg)])
    np.testing.assert_allclose(s.data, expected, atol=1e-12)
    r = T.repeat_rows(Tensor(expected, dtype="f64"), counts)
    assert r.shape == (int(offsets[-1]), width)


def test_segment_l2_gradients():
    offsets = np.array([0, 3, 5])
    x = Tensor(np.random.default_rng(4).standard_normal((5, 2)), dtype="f64")
    assert grad_check(lambda t: T.segment_l2(t, offsets).sum(), x) < 1e-5


def test_take_rows_gradients():
    idx = np.array([0, 2, 2, 1])
    x = Tensor(np.random.default_rng(5).standard_normal((3, 2)), dtype="f64")
    assert grad_check(lambda t: (T.take_rows(t, idx) * np.arange(8.0).reshape(4, 2)).sum(), x) < 1e-5


def test_deterministic_forward_bit_identical(rng):
    x = rng.standard_normal((4, 5)).astype(np.float32)
    w = rng.standard_normal((5, 3)).astype(np.float32)
    a = (Tensor(x) @ Tensor(w)).data
    b = (Tensor(x) @ Tensor(w)).data
    assert np.array_equal(a, b)


def test_param_unique_names_and_shape():
    p = Param("w", np.zeros((2, 3)))
    assert p.grad.shape == p.shape == (2, 3)


def test_memory_tracker_peak():
    with T.track_memory() as mem:
        x = Tensor(np.zeros(1024, dtype=np.float32))
        assert mem.peak >= 4096
