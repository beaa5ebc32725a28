import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convmae import macs as macs_mod
from convmae import nn
from convmae import sparse as sp
from convmae import tensor as T
from convmae.nn import ConvSpec
from convmae.tensor import ShapeError, Tensor


def _random_mask(rng, h, w, n_masked):
    m = np.zeros(h * w, dtype=np.uint8)
    m[rng.choice(h * w, size=n_masked, replace=False)] = 1
    return m.reshape(h, w)


def _block_uniform_mask(rng, h, w, ratio):
    coarse = np.zeros((h // 2) * (w // 2), dtype=np.uint8)
    n = int(round(ratio * coarse.size))
    coarse[rng.choice(coarse.size, size=n, replace=False)] = 1
    return np.repeat(np.repeat(coarse.reshape(h // 2, w // 2), 2, 0), 2, 1)


# CoordMap / conversion --------------------------------------------------------

def test_all_visible_roundtrip(rng):
    x = rng.standard_normal((4, 4, 3)).astype(np.float32)
    spt = sp.dense_to_sparse(Tensor(x), np.zeros((4, 4), np.uint8))
    assert len(spt.coords) == 16
    back = sp.sparse_to_dense(spt)
    np.testing.assert_array_equal(back.data, x)


def test_all_masked_is_legal(rng):
    x = rng.standard_normal((4, 4, 3)).astype(np.float32)
    spt = sp.dense_to_sparse(Tensor(x), np.ones((4, 4), np.uint8))
    assert len(spt.coords) == 0
    assert spt.features.shape == (0, 3)
    np.testing.assert_array_equal(sp.sparse_to_dense(spt).data, np.zeros((4, 4, 3)))


def test_partial_mask_roundtrip(rng):
    x = rng.standard_normal((4, 4, 2)).astype(np.float32)
    mask = _random_mask(rng, 4, 4, 6)
    spt = sp.dense_to_sparse(Tensor(x), mask)
    assert len(spt.coords) == 10
    back = sp.sparse_to_dense(spt).data
    vis = (mask == 0)[:, :, None]
    np.testing.assert_array_equal(back, np.where(vis, x, 0.0))


def test_coordmap_row_major_order():
    cmap = sp.CoordMap((3, 3), np.array([[2, 1], [0, 2], [0, 0]]))
    np.testing.assert_array_equal(cmap.active, [[0, 0], [0, 2], [2, 1]])
    assert cmap.index[(0, 2)] == 1


def test_coordmap_rejects_out_of_bounds_and_duplicates():
    with pytest.raises(ShapeError):
        sp.CoordMap((2, 2), np.array([[2, 0]]))
    with pytest.raises(ShapeError):
        sp.CoordMap((2, 2), np.array([[0, 0], [0, 0]]))


def test_mask_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        sp.dense_to_sparse(Tensor(rng.standard_normal((4, 4, 3))), np.zeros((3, 3)))


# submanifold conv ---------------------------------------------------------------

def test_single_active_site_sees_only_center_tap(rng):
    mask = np.ones((5, 5), np.uint8)
    mask[2, 2] = 0
    x = rng.standard_normal((5, 5, 3)).astype(np.float64)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), mask)
    spec = ConvSpec(3, 4, 3, 3, padding=1)
    w = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(4)
    out = sp.submanifold_conv(spt, Tensor(w, dtype="f64"), Tensor(b, dtype="f64"), spec)
    expected = x[2, 2] @ w[1, 1] + b
    np.testing.assert_allclose(out.features.data[0], expected, atol=1e-12)


def test_all_active_equals_dense_conv(rng):
    x = rng.standard_normal((6, 6, 3))
    spec = ConvSpec(3, 5, 3, 3, padding=1)
    w = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(5)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), np.zeros((6, 6), np.uint8))
    got = sp.sparse_to_dense(
        sp.submanifold_conv(spt, Tensor(w, dtype="f64"), Tensor(b, dtype="f64"), spec)).data
    ref = nn.conv2d(Tensor(x[None], dtype="f64"), Tensor(w, dtype="f64"),
                    Tensor(b, dtype="f64"), spec).data[0]
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_submanifold_preserves_active_set(rng):
    mask = _random_mask(rng, 8, 8, 40)
    x = rng.standard_normal((8, 8, 4)).astype(np.float32)
    spt = sp.dense_to_sparse(Tensor(x), mask)
    spec = ConvSpec(4, 4, 3, 3, padding=1, groups=4)
    out = sp.submanifold_conv(spt, Tensor(rng.standard_normal(spec.weight_shape())),
                              None, spec)
    np.testing.assert_array_equal(out.coords.active, spt.coords.active)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.booleans())
def test_submanifold_matches_masked_dense(seed, depthwise):
    rng = np.random.default_rng(seed)
    h = w = 6
    c = 4
    mask = _random_mask(rng, h, w, int(rng.integers(0, h * w + 1)))
    spec = ConvSpec(c, c, 3, 3, padding=1, groups=c if depthwise else 1)
    x = rng.standard_normal((h, w, c))
    wt = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(c)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), mask)
    got = sp.sparse_to_dense(
        sp.submanifold_conv(spt, Tensor(wt, dtype="f64"), Tensor(b, dtype="f64"), spec)).data
    ref = sp.masked_dense_conv(Tensor(x[None], dtype="f64"), mask,
                               Tensor(wt, dtype="f64"), Tensor(b, dtype="f64"), spec).data[0]
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_submanifold_gradients_match_masked_dense(rng):
    h = w = 6
    c = 3
    mask = _random_mask(rng, h, w, 14)
    spec = ConvSpec(c, 5, 3, 3, padding=1)
    x = rng.standard_normal((h, w, c))
    r = rng.standard_normal((h, w, 5))
    w1 = T.Param("w1", Tensor(rng.standard_normal(spec.weight_shape()), dtype="f64"))
    b1 = T.Param("b1", Tensor(rng.standard_normal(5), dtype="f64"))

    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), mask)
    out = sp.sparse_to_dense(sp.submanifold_conv(spt, w1.value, b1.value, spec))
    T.backward((out * r).sum())
    g_sparse_w, g_sparse_b = w1.grad.copy(), b1.grad.copy()

    w1.zero_grad(); b1.zero_grad()
    out = sp.masked_dense_conv(Tensor(x[None], dtype="f64"), mask, w1.value, b1.value, spec)
    T.backward((out * r[None]).sum())
    assert T.rel_agreement(g_sparse_w, w1.grad) < 1e-10
    assert T.rel_agreement(g_sparse_b, b1.grad) < 1e-10


# masked dense conv ----------------------------------------------------------------

def test_masked_dense_all_visible_equals_conv(rng):
    x = rng.standard_normal((1, 5, 5, 3))
    spec = ConvSpec(3, 4, 3, 3, padding=1)
    w = rng.standard_normal(spec.weight_shape())
    a = sp.masked_dense_conv(Tensor(x, dtype="f64"), np.zeros((5, 5)),
                             Tensor(w, dtype="f64"), None, spec).data
    b = nn.conv2d(Tensor(x, dtype="f64"), Tensor(w, dtype="f64"), None, spec).data
    np.testing.assert_array_equal(a, b)


def test_masked_dense_all_masked_is_zero(rng):
    x = rng.standard_normal((1, 5, 5, 3))
    spec = ConvSpec(3, 4, 3, 3, padding=1)
    w = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(4)
    out = sp.masked_dense_conv(Tensor(x, dtype="f64"), np.ones((5, 5)),
                               Tensor(w, dtype="f64"), Tensor(b, dtype="f64"), spec)
    np.testing.assert_array_equal(out.data, np.zeros((1, 5, 5, 4)))


# strided sparse conv ----------------------------------------------------------------

def test_strided_fully_active_equals_dense(rng):
    x = rng.standard_normal((4, 4, 3))
    spec = ConvSpec(3, 5, 2, 2, stride=2)
    w = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(5)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), np.zeros((4, 4), np.uint8))
    out = sp.strided_sparse_conv(spt, Tensor(w, dtype="f64"), Tensor(b, dtype="f64"), spec)
    assert out.coords.resolution == (2, 2)
    assert len(out.coords) == 4
    ref = nn.conv2d(Tensor(x[None], dtype="f64"), Tensor(w, dtype="f64"),
                    Tensor(b, dtype="f64"), spec).data[0]
    np.testing.assert_allclose(sp.sparse_to_dense(out).data, ref, atol=1e-12)


def test_strided_single_block(rng):
    mask = np.ones((4, 4), np.uint8)
    mask[2:4, 0:2] = 0
    x = rng.standard_normal((4, 4, 2))
    spec = ConvSpec(2, 3, 2, 2, stride=2)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), mask)
    out = sp.strided_sparse_conv(spt, Tensor(rng.standard_normal(spec.weight_shape()),
                                             dtype="f64"), None, spec)
    np.testing.assert_array_equal(out.coords.active, [[1, 0]])


def test_strided_rejects_partial_blocks(rng):
    mask = np.ones((4, 4), np.uint8)
    mask[0, 0] = 0  # quarter of a block
    spt = sp.dense_to_sparse(Tensor(rng.standard_normal((4, 4, 2)), dtype="f64"), mask)
    spec = ConvSpec(2, 3, 2, 2, stride=2)
    with pytest.raises(sp.BlockUniformityError):
        sp.strided_sparse_conv(spt, Tensor(np.zeros(spec.weight_shape())), None, spec)


def test_submanifold_routes_strided_spec(rng):
    x = rng.standard_normal((4, 4, 2))
    spec = ConvSpec(2, 3, 2, 2, stride=2)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), np.zeros((4, 4), np.uint8))
    out = sp.submanifold_conv(spt, Tensor(rng.standard_normal(spec.weight_shape()),
                                          dtype="f64"), None, spec)
    assert out.coords.resolution == (2, 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_strided_matches_coarsened_masked_dense(seed):
    rng = np.random.default_rng(seed)
    mask = _block_uniform_mask(rng, 8, 8, 0.5)
    x = rng.standard_normal((8, 8, 3))
    spec = ConvSpec(3, 4, 2, 2, stride=2)
    w = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(4)
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), mask)
    got = sp.sparse_to_dense(
        sp.strided_sparse_conv(spt, Tensor(w, dtype="f64"), Tensor(b, dtype="f64"), spec)).data
    ref = sp.masked_dense_conv(Tensor(x[None], dtype="f64"), mask,
                               Tensor(w, dtype="f64"), Tensor(b, dtype="f64"), spec).data[0]
    np.testing.assert_allclose(got, ref, atol=1e-10)


# sparse pointwise -------------------------------------------------------------------

def test_sparse_pointwise_identity(rng):
    spt = sp.dense_to_sparse(Tensor(rng.standard_normal((4, 4, 3))), _random_mask(rng, 4, 4, 5))
    out = sp.sparse_pointwise(spt, lambda f: f)
    np.testing.assert_array_equal(out.features.data, spt.features.data)


def test_sparse_pointwise_all_active_equals_dense(rng):
    x = rng.standard_normal((3, 3, 4))
    g = Tensor(np.ones(4), dtype="f64")
    b = Tensor(np.zeros(4), dtype="f64")
    spt = sp.dense_to_sparse(Tensor(x, dtype="f64"), np.zeros((3, 3), np.uint8))
    got = sp.sparse_to_dense(
        sp.sparse_pointwise(spt, lambda f: nn.layer_norm(f, g, b))).data
    ref = nn.layer_norm(Tensor(x, dtype="f64"), g, b).data
    np.testing.assert_allclose(got, ref, atol=1e-12)


# MAC instrumentation ----------------------------------------------------------------

def test_sparse_macs_are_visible_fraction_of_dense(rng):
    h = w = 8
    c = 4
    mask = _block_uniform_mask(rng, h, w, 0.5)
    visible = float((mask == 0).mean())
    x = rng.standard_normal((h, w, c)).astype(np.float32)
    spec = ConvSpec(c, c, 3, 3, padding=1, groups=c)
    wt = Tensor(rng.standard_normal(spec.weight_shape()).astype(np.float32))
    spt = sp.dense_to_sparse(Tensor(x), mask)
    with macs_mod.count_macs() as counter:
        sp.submanifold_conv(spt, wt, None, spec)
    sparse_macs = counter.total
    with macs_mod.count_macs() as counter:
        nn.conv2d(Tensor(x[None]), wt, None, spec)
    dense_macs = counter.total
    assert sparse_macs == int(visible * dense_macs)
    assert sparse_macs <= (1 - 0.5) * dense_macs + 1e-9


def test_ratio_zero_macs_equal(rng):
    x = rng.standard_normal((6, 6, 3)).astype(np.float32)
    spec = ConvSpec(3, 5, 3, 3, padding=1)
    wt = Tensor(rng.standard_normal(spec.weight_shape()).astype(np.float32))
    spt = sp.dense_to_sparse(Tensor(x), np.zeros((6, 6), np.uint8))
    with macs_mod.count_macs() as counter:
        sp.submanifold_conv(spt, wt, None, spec)
    s = counter.total
    with macs_mod.count_macs() as counter:
        nn.conv2d(Tensor(x[None]), wt, None, spec)
    assert s == counter.total


# batched geometry --------------------------------------------------------------------

def test_batch_matches_per_image(rng):
    h = w = 6
    c = 3
    masks = np.stack([_random_mask(rng, h, w, 10), _random_mask(rng, h, w, 20)])
    x = rng.standard_normal((2, h, w, c))
    spec = ConvSpec(c, 4, 3, 3, padding=1)
    wt = Tensor(rng.standard_normal(spec.weight_shape()), dtype="f64")
    b = Tensor(rng.standard_normal(4), dtype="f64")
    batch = sp.batch_to_sparse(Tensor(x, dtype="f64"), masks)
    out = sp.sparse_to_dense(sp.submanifold_conv(batch, wt, b, spec)).data
    for i in range(2):
        spt = sp.dense_to_sparse(Tensor(x[i], dtype="f64"), masks[i])
        single = sp.sparse_to_dense(sp.submanifold_conv(spt, wt, b, spec)).data
        np.testing.assert_allclose(out[i], single, atol=1e-12)
