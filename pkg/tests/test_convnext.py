import numpy as np
import pytest

from convmae import convnext as cx
from convmae import fcmae as fc
from convmae import sparse as sp
from convmae import tensor as T
from convmae.convnext import ModelConfig, build_model
from convmae.tensor import ShapeError, Tensor

# paper-reported bookkeeping targets (params, flops at 224^2)
PARAM_TARGETS = {
    "atto": 3.7e6, "femto": 5.2e6, "pico": 9.1e6, "nano": 15.6e6,
    "tiny": 28.6e6, "base": 89e6, "large": 198e6, "huge": 659e6,
}
FLOP_TARGETS = {
    "atto": 0.55e9, "femto": 0.78e9, "pico": 1.37e9, "nano": 2.45e9,
    "tiny": 4.47e9, "base": 15.4e9, "large": 34.4e9, "huge": 115e9,
}


def toy_config(**over):
    kw = dict(name="toy", channels=(4, 8, 16, 32), depths=(1, 1, 1, 1),
              num_classes=4, variant="v2")
    kw.update(over)
    return ModelConfig(**kw)


@pytest.mark.parametrize("name", sorted(cx.VARIANTS))
def test_registry_param_counts_match_reported(name):
    cfg = ModelConfig.from_name(name, num_classes=1000)
    got = sum(int(np.prod(s)) for s in _param_shapes(cfg))
    assert abs(got - PARAM_TARGETS[name]) / PARAM_TARGETS[name] < 0.02


def _param_shapes(cfg):
    # shape walk without allocating the big models
    ch = cfg.channels
    shapes = [(4, 4, 3, ch[0]), (ch[0],), (ch[0],), (ch[0],)]
    for s in range(4):
        c = ch[s]
        if s > 0:
            shapes += [(ch[s - 1],), (ch[s - 1],), (2, 2, ch[s - 1], c), (c,)]
        for _ in range(cfg.depths[s]):
            shapes += [(7, 7, 1, c), (c,), (c,), (c,), (c, 4 * c), (4 * c,)]
            if cfg.variant == "v2":
                shapes += [(4 * c,), (4 * c,)]
            else:
                shapes += [(c,)]
            shapes += [(4 * c, c), (c,)]
    shapes += [(ch[3],), (ch[3],), (ch[3], cfg.num_classes), (cfg.num_classes,)]
    return shapes


def test_built_model_matches_shape_walk():
    cfg = ModelConfig.from_name("atto")
    model = build_model(cfg, seed=0)
    assert cx.count_params(model) == sum(int(np.prod(s)) for s in _param_shapes(cfg))


@pytest.mark.parametrize("name", ["atto", "nano", "tiny", "base", "large", "huge"])
def test_flops_match_reported(name):
    cfg = ModelConfig.from_name(name, num_classes=1000)
    got = cx.count_flops(cfg, 224)
    assert abs(got - FLOP_TARGETS[name]) / FLOP_TARGETS[name] < 0.05


def test_v2_vs_v1_param_bookkeeping():
    v2 = ModelConfig.from_name("atto", variant="v2")
    v1 = ModelConfig.from_name("atto", variant="v1")
    n2 = sum(int(np.prod(s)) for s in _param_shapes(v2))
    n1 = sum(int(np.prod(s)) for s in _param_shapes(v1))
    blocks = v2.total_blocks
    # V2 = V1 - LayerScale (C per block) + GRN affine (2 * 4C per block)
    ls = sum(v1.channels[s] * v1.depths[s] for s in range(4))
    grn_affine = sum(2 * 4 * v2.channels[s] * v2.depths[s] for s in range(4))
    assert n2 == n1 - ls + grn_affine


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        ModelConfig.from_name("giga")


def test_param_names_are_unique_and_hierarchical():
    model = build_model(toy_config(), seed=0)
    names = [n for n, _ in model.named_params()]
    assert len(names) == len(set(names))
    assert any(n.startswith("stage2.block0.") for n in names)
    assert "stage1.downsample.conv.weight" in names


def test_v1_has_layerscale_no_grn():
    m = build_model(toy_config(variant="v1"), seed=0)
    names = {n for n, _ in m.named_params()}
    assert "stage0.block0.layerscale.gamma" in names
    assert not any(".grn." in n for n in names)


def test_v2_has_grn_no_layerscale():
    m = build_model(toy_config(), seed=0)
    names = {n for n, _ in m.named_params()}
    assert "stage0.block0.grn.gamma" in names
    assert not any("layerscale" in n for n in names)


# forward ------------------------------------------------------------------------

def test_stage_resolutions_at_224():
    cfg = toy_config()
    model = build_model(cfg, seed=0).eval()
    x = np.zeros((1, 224, 224, 3), np.float32)
    with T.no_grad():
        feats, logits = cx.forward(model, x)
    assert [f.shape[1] for f in feats] == [56, 28, 14, 7]
    assert logits.shape == (1, 4)


def test_indivisible_input_rejected():
    model = build_model(toy_config(), seed=0)
    with pytest.raises(ShapeError):
        cx.forward(model, np.zeros((1, 100, 100, 3), np.float32))


def test_eval_determinism_bit_identical(rng):
    model = build_model(toy_config(), seed=0).eval()
    x = rng.standard_normal((2, 32, 32, 3)).astype(np.float32)
    with T.no_grad():
        _, a = cx.forward(model, x)
        _, b = cx.forward(model, x)
    assert np.array_equal(a.data, b.data)


def test_train_eval_differ_only_by_drop_path(rng):
    cfg = toy_config(drop_path_rate=0.5)
    model = build_model(cfg, seed=0)
    x = rng.standard_normal((2, 32, 32, 3)).astype(np.float32)
    model.eval()
    with T.no_grad():
        _, e1 = cx.forward(model, x)
    model.train()
    model.rng = np.random.default_rng(123)
    with T.no_grad():
        _, t1 = cx.forward(model, x)
    assert not np.allclose(e1.data, t1.data)
    cfg0 = toy_config(drop_path_rate=0.0)
    model0 = build_model(cfg0, seed=0)
    model0.train()
    with T.no_grad():
        _, t0 = cx.forward(model0, x)
    np.testing.assert_allclose(t0.data, e1.data, atol=1e-6)


def test_v2_zero_grn_equals_v1_without_layerscale(rng):
    """With GRN affine at zero (its init), the V2 block output equals the V1
    block on identical weights once LayerScale is removed (gamma = 1)."""
    cfg2 = toy_config()
    m2 = build_model(cfg2, seed=0).eval()
    cfg1 = toy_config(variant="v1")
    m1 = build_model(cfg1, seed=0).eval()
    for name, p in m2.named_params():
        if ".grn." not in name:
            m1.params[name].value.data[...] = p.data
    for name, p in m1.named_params():
        if "layerscale" in name:
            p.value.data[...] = 1.0
    x = rng.standard_normal((1, 32, 32, 3)).astype(np.float32)
    with T.no_grad():
        _, a = cx.forward(m2, x)
        _, b = cx.forward(m1, x)
    np.testing.assert_array_equal(a.data, b.data)


def test_mask_all_visible_matches_dense(rng):
    model = build_model(toy_config(), seed=0).eval()
    x = rng.standard_normal((1, 64, 64, 3)).astype(np.float32)
    pyr = fc.MaskPyramid.from_coarse(np.zeros((2, 2), np.uint8))
    levels = fc.stack_pyramids([pyr])
    with T.no_grad():
        sb = cx.forward_sparse(model, x, levels)
        dense_feats, _ = cx.forward_dense(model, x)
    np.testing.assert_allclose(sp.sparse_to_dense(sb).data, dense_feats[-1].data,
                               atol=1e-5)


def test_full_model_grad_check_two_block_toy(rng):
    from conftest import randomize_params
    cfg = ModelConfig(name="toy2", channels=(4, 8, 16, 32), depths=(1, 1, 0, 0),
                      num_classes=3, variant="v2")
    model = build_model(cfg, seed=0, dtype="f64").eval()
    randomize_params(model)
    x = rng.standard_normal((1, 32, 32, 3))
    labels = np.array([1])
    tensors = [p.value for _, p in model.named_params()]

    def f(*_):
        from convmae import nn
        logits = cx.classify(model, x)
        return nn.cross_entropy(logits, labels)

    err = T.grad_check(f, tensors, eps=1e-5)
    assert err < 1e-4


def test_model_info_totals():
    cfg = ModelConfig.from_name("atto")
    model = build_model(cfg, seed=0)
    info = cx.model_info(model, 224)
    assert info["total_params"] == cx.count_params(model)
    assert info["total_flops"] == cx.count_flops(cfg, 224)
    assert len(info["layers"]) == len(model.params)
