import math

import numpy as np
import pytest

from convmae import convnext as cx
from convmae import optim as om
from convmae.optim import AdamW, Schedule, layerwise_lr_decay, lr_at
from convmae.tensor import Param


def _param(name, arr):
    return Param(name, np.asarray(arr, dtype=np.float64))


def test_zero_grad_zero_wd_no_change():
    p = _param("w", [1.0, -2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_magnitude_is_lr():
    p = _param("w", [0.0, 0.0, 0.0])
    p.grad[...] = [0.5, -2.0, 1e-3]
    opt = AdamW([p], lr=0.01, betas=(0.9, 0.999), eps=1e-12)
    opt.step()
    # bias-corrected first step: lr * g / (|g| + eps) = lr * sign(g)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-6)


def test_decoupled_weight_decay_pure_decay():
    p = _param("w", [2.0, -4.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_nonfinite_gradient_aborts_naming_param():
    p1 = _param("fine", [1.0])
    p2 = _param("broken.weight", [1.0])
    p2.grad[...] = np.nan
    opt = AdamW([p1, p2], lr=0.1)
    with pytest.raises(FloatingPointError) as exc:
        opt.step()
    assert "broken.weight" in str(exc.value)
    np.testing.assert_array_equal(p1.data, [1.0])  # nothing moved


def test_lr_multipliers_apply():
    a = _param("a", [0.0])
    b = _param("b", [0.0])
    a.grad[...] = 1.0
    b.grad[...] = 1.0
    opt = AdamW([a, b], lr=0.1, eps=1e-12, lr_multipliers={"b": 0.5})
    opt.step()
    assert abs(a.data[0] / b.data[0] - 2.0) < 1e-9


def test_duplicate_param_names_rejected():
    with pytest.raises(ValueError):
        AdamW([_param("x", [1.0]), _param("x", [2.0])])


# schedule -------------------------------------------------------------------------

def test_schedule_linear_scaling_rule():
    s = Schedule(base_lr=1.5e-4, batch_size=4096, warmup_epochs=40,
                 total_epochs=800, steps_per_epoch=10)
    assert s.peak_lr == pytest.approx(1.5e-4 * 4096 / 256)


def test_lr_warmup_and_cosine_endpoints():
    s = Schedule(base_lr=2.56e-3, batch_size=100, warmup_epochs=2,
                 total_epochs=10, steps_per_epoch=5)
    peak = s.peak_lr
    assert lr_at(0, s) == 0.0
    assert lr_at(s.warmup_steps, s) == pytest.approx(peak)
    assert lr_at(s.total_steps, s) <= 1e-8 * peak
    mid = lr_at((s.warmup_steps + s.total_steps) // 2, s)
    assert 0.0 < mid < peak


def test_lr_monotone_during_warmup():
    s = Schedule(1e-3, 256, warmup_epochs=1, total_epochs=2, steps_per_epoch=100)
    vals = [lr_at(t, s) for t in range(100)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_lr_negative_step_rejected():
    s = Schedule(1e-3, 256, 1, 2, 10)
    with pytest.raises(ValueError):
        lr_at(-1, s)


# layer-wise decay -------------------------------------------------------------------

def _toy_model():
    cfg = cx.ModelConfig(name="toy", channels=(4, 8, 16, 32), depths=(1, 1, 1, 0),
                         num_classes=2, variant="v2")
    return cx.build_model(cfg, seed=0)


def test_decay_one_gives_all_ones():
    model = _toy_model()
    mults = layerwise_lr_decay(model, 1.0)
    assert set(mults.values()) == {1.0}


def test_layerwise_geometric_sequence():
    model = _toy_model()  # layers: stem + 3 blocks = 4
    mults = layerwise_lr_decay(model, 0.5, "layer_wise")
    assert mults["head.fc.weight"] == 1.0
    assert mults["stem.conv.weight"] == pytest.approx(0.5 ** 4)
    assert mults["stage0.block0.dwconv.weight"] == pytest.approx(0.5 ** 3)
    assert mults["stage2.block0.dwconv.weight"] == pytest.approx(0.5 ** 1)
    # downsample params ride with the following block
    assert mults["stage1.downsample.conv.weight"] == mults["stage1.block0.dwconv.weight"]
    # stem has the smallest multiplier
    assert mults["stem.conv.weight"] == min(mults.values())


def test_groupwise_distinct_value_count():
    cfg = cx.ModelConfig.from_name("atto", num_classes=10)  # 1 + 12 = 13 layers
    model = cx.build_model(cfg, seed=0)
    mults = layerwise_lr_decay(model, 0.9, "group_wise")
    n_layers = 1 + cfg.total_blocks
    assert len(set(mults.values())) == math.ceil(n_layers / 3) + 1


def test_decay_out_of_range():
    with pytest.raises(ValueError):
        layerwise_lr_decay(_toy_model(), 0.0)
    with pytest.raises(ValueError):
        layerwise_lr_decay(_toy_model(), 0.9, "weird")
