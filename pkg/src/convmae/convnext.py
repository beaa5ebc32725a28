"""ConvNeXt V1/V2 blocks and full-model assembly.

Stem: 4x4 stride-4 conv + LayerNorm. Four stages of blocks at channel
widths (C, 2C, 4C, 8C), joined by LayerNorm + 2x2 stride-2 convs. Block:
7x7 depthwise conv -> LayerNorm -> 1x1 expand to 4C -> GELU -> [GRN in V2]
-> 1x1 reduce -> [LayerScale in V1] -> stochastic-depth residual. Head:
global average pool -> LayerNorm -> linear.

The same weights drive three forward paths: plain dense, submanifold
sparse (only visible sites computed) and masked-dense (binary mask
re-applied after every op), the latter two being numerically equivalent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import macs as _macs
from . import nn
from . import sparse as sp
from . import tensor as T
from .grn import GrnConfig, GrnParams, grn_forward, grn_forward_segments
from .nn import ConvSpec
from .tensor import Param, ShapeError, Tensor

# name -> (C, depths); channels per stage are (C, 2C, 4C, 8C)
VARIANTS: dict[str, tuple[int, tuple[int, int, int, int]]] = {
    "atto":  (40,  (2, 2, 6, 2)),
    "femto": (48,  (2, 2, 6, 2)),
    "pico":  (64,  (2, 2, 6, 2)),
    "nano":  (80,  (2, 2, 8, 2)),
    "tiny":  (96,  (3, 3, 9, 3)),
    "base":  (128, (3, 3, 27, 3)),
    "large": (192, (3, 3, 27, 3)),
    "huge":  (352, (3, 3, 27, 3)),
}


@dataclass(frozen=True)
class BlockConfig:
    dim: int
    variant: str = "v2"                 # "v1" (LayerScale) or "v2" (GRN)
    drop_path_rate: float = 0.0
    layer_scale_init: float = 1e-6
    grn: GrnConfig = field(default_factory=GrnConfig)

    def __post_init__(self):
        if self.variant not in ("v1", "v2"):
            raise ValueError(f"unknown block variant {self.variant!r}")


@dataclass(frozen=True)
class ModelConfig:
    name: str
    channels: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    num_classes: int = 1000
    variant: str = "v2"
    drop_path_rate: float = 0.0
    layer_scale_init: float = 1e-6
    grn: GrnConfig = field(default_factory=GrnConfig)

    @classmethod
    def from_name(cls, name: str, **overrides) -> "ModelConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown model variant {name!r}; choose from {sorted(VARIANTS)}")
        c, depths = VARIANTS[name]
        return cls(name=name, channels=(c, 2 * c, 4 * c, 8 * c), depths=depths, **overrides)

    @property
    def total_blocks(self) -> int:
        return sum(self.depths)


class Model:
    """Parameter collection plus configuration; forward passes live in the
    free functions below so sparse/dense paths share one weight set."""

    def __init__(self, config: ModelConfig, params: dict[str, Param],
                 dtype: str = "f32", seed: int = 0):
        self.config = config
        self.params = params
        self.dtype = dtype
        self.mode = "train"
        self.rng = np.random.default_rng(seed + 1)  # drop-path stream

    def train(self): self.mode = "train"; return self
    def eval(self): self.mode = "eval"; return self

    def v(self, name: str) -> Tensor:
        return self.params[name].value

    def named_params(self):
        return self.params.items()

    @property
    def drop_path_rates(self) -> list[float]:
        n = self.config.total_blocks
        if n == 1:
            return [self.config.drop_path_rate]
        return list(np.linspace(0.0, self.config.drop_path_rate, n))


def trunc_normal(shape, std: float, rng: np.random.Generator,
                 dtype=np.float32, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated at +-bound standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


def _block_param_init(prefix: str, dim: int, variant: str, rng, npdt) -> dict[str, Param]:
    p: dict[str, Param] = {}

    def add(rel, arr):
        p[f"{prefix}.{rel}"] = Param(f"{prefix}.{rel}", arr)

    add("dwconv.weight", trunc_normal((7, 7, 1, dim), 0.02, rng, npdt))
    add("dwconv.bias", np.zeros(dim, npdt))
    add("norm.gamma", np.ones(dim, npdt))
    add("norm.beta", np.zeros(dim, npdt))
    add("pwconv1.weight", trunc_normal((dim, 4 * dim), 0.02, rng, npdt))
    add("pwconv1.bias", np.zeros(4 * dim, npdt))
    if variant == "v2":
        add("grn.gamma", np.zeros(4 * dim, npdt))
        add("grn.beta", np.zeros(4 * dim, npdt))
    add("pwconv2.weight", trunc_normal((4 * dim, dim), 0.02, rng, npdt))
    add("pwconv2.bias", np.zeros(dim, npdt))
    return p


def build_model(cfg: ModelConfig, seed: int = 0, dtype: str = "f32") -> Model:
    """Instantiate parameters: trunc-normal(0.02) weights, zero biases,
    unit norms, zero GRN affine, head scaled by 0.001."""
    npdt = T.DTYPES[dtype]
    rng = np.random.default_rng(seed)
    ch = cfg.channels
    params: dict[str, Param] = {}

    def add(name, arr):
        params[name] = Param(name, arr)

    add("stem.conv.weight", trunc_normal((4, 4, 3, ch[0]), 0.02, rng, npdt))
    add("stem.conv.bias", np.zeros(ch[0], npdt))
    add("stem.norm.gamma", np.ones(ch[0], npdt))
    add("stem.norm.beta", np.zeros(ch[0], npdt))
    for s in range(4):
        if s > 0:
            add(f"stage{s}.downsample.norm.gamma", np.ones(ch[s - 1], npdt))
            add(f"stage{s}.downsample.norm.beta", np.zeros(ch[s - 1], npdt))
            add(f"stage{s}.downsample.conv.weight",
                trunc_normal((2, 2, ch[s - 1], ch[s]), 0.02, rng, npdt))
            add(f"stage{s}.downsample.conv.bias", np.zeros(ch[s], npdt))
        for b in range(cfg.depths[s]):
            params.update(_block_param_init(f"stage{s}.block{b}", ch[s], cfg.variant, rng, npdt))
            if cfg.variant == "v1":
                name = f"stage{s}.block{b}.layerscale.gamma"
                params[name] = Param(name, np.full(ch[s], cfg.layer_scale_init, npdt))
    add("head.norm.gamma", np.ones(ch[3], npdt))
    add("head.norm.beta", np.zeros(ch[3], npdt))
    add("head.fc.weight", trunc_normal((ch[3], cfg.num_classes), 0.02, rng, npdt) * 0.001)
    add("head.fc.bias", np.zeros(cfg.num_classes, npdt))
    return Model(cfg, params, dtype=dtype, seed=seed)


# ---------------------------------------------------------------------------
# activation capture (diagnostics hooks)

class ActivationCapture:
    """Collects ("mlp" = post-GELU expansion output, "block" = post-residual
    block output) activations from a dense forward pass."""

    def __init__(self, kinds=("mlp",)):
        self.kinds = set(kinds)
        self.records: list[tuple[str, np.ndarray]] = []

    def add(self, kind: str, name: str, t: Tensor) -> None:
        if kind in self.kinds:
            self.records.append((name, np.array(t.data, copy=True)))


# ---------------------------------------------------------------------------
# block forward (dense / masked-dense / sparse), shared with the decoder

def block_forward_dense(x: Tensor, get, bc: BlockConfig, training: bool,
                        rng, capture: ActivationCapture | None = None,
                        name: str = "", mask: np.ndarray | None = None) -> Tensor:
    """One ConvNeXt block on an NHWC tensor. With `mask` given, the binary
    mask is re-applied after every operation (masked-dense simulation)."""
    c = bc.dim

    def m(t):
        return sp.apply_mask(t, mask) if mask is not None else t

    shortcut = x
    dw_spec = ConvSpec(c, c, 7, 7, stride=1, padding=3, groups=c)
    _macs.set_label(f"{name}.dwconv")
    t = m(nn.conv2d(x, get("dwconv.weight"), get("dwconv.bias"), dw_spec))
    t = m(nn.layer_norm(t, get("norm.gamma"), get("norm.beta")))
    n, h, w, _ = t.shape
    _macs.set_label(f"{name}.pwconv1")
    t = nn.linear(t.reshape(n * h * w, c), get("pwconv1.weight"), get("pwconv1.bias"))
    t = nn.gelu(t).reshape(n, h, w, 4 * c)
    t = m(t)
    if capture is not None:
        capture.add("mlp", f"{name}.mlp", t)
    if bc.variant == "v2":
        t = m(grn_forward(t, GrnParams(get("grn.gamma"), get("grn.beta")), bc.grn))
    _macs.set_label(f"{name}.pwconv2")
    t = nn.linear(t.reshape(n * h * w, 4 * c), get("pwconv2.weight"), get("pwconv2.bias"))
    t = m(t.reshape(n, h, w, c))
    if bc.variant == "v1":
        t = m(t * get("layerscale.gamma"))
    out = nn.drop_path(shortcut, t, bc.drop_path_rate, training, rng)
    out = m(out)
    if capture is not None:
        capture.add("block", f"{name}.block", out)
    return out


def block_forward_sparse(sb: sp.SparseBatch, get, bc: BlockConfig, training: bool,
                         rng, name: str = "") -> sp.SparseBatch:
    """The same block on a sparse feature matrix; spatial aggregation in GRN
    runs per image over active rows."""
    c = bc.dim
    h, w = sb.resolution
    dw_spec = ConvSpec(c, c, 7, 7, stride=1, padding=3, groups=c)
    _macs.set_label(f"{name}.dwconv")
    t = sp.submanifold_conv(sb, get("dwconv.weight"), get("dwconv.bias"), dw_spec)
    f = nn.layer_norm(t.features, get("norm.gamma"), get("norm.beta"))
    _macs.set_label(f"{name}.pwconv1")
    f = nn.linear(f, get("pwconv1.weight"), get("pwconv1.bias"))
    f = nn.gelu(f)
    if bc.variant == "v2":
        f = grn_forward_segments(f, sb.offsets, h * w,
                                 GrnParams(get("grn.gamma"), get("grn.beta")), bc.grn)
    _macs.set_label(f"{name}.pwconv2")
    f = nn.linear(f, get("pwconv2.weight"), get("pwconv2.bias"))
    if bc.variant == "v1":
        f = f * get("layerscale.gamma")
    out = _sparse_drop_path(sb.features, f, sb, bc.drop_path_rate, training, rng)
    return sb.like(out)


def _sparse_drop_path(x_feats: Tensor, branch: Tensor, sb: sp.SparseBatch,
                      rate: float, training: bool, rng) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x_feats + branch
    keep = (rng.random(sb.batch_size) >= rate).astype(branch.data.dtype) / (1.0 - rate)
    counts = np.diff(sb.offsets)
    scale = np.repeat(keep, counts)[:, None]
    return x_feats + branch * scale


# ---------------------------------------------------------------------------
# full-model forward paths

def _check_input(x, cfg: ModelConfig, dtype: str):
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.ndim == 3:
        xd = xd[None]
    if xd.ndim != 4 or xd.shape[-1] != 3:
        raise ShapeError(f"expected NHWC RGB input, got {xd.shape}")
    if xd.shape[1] % 32 or xd.shape[2] % 32:
        raise ShapeError(f"input extents {xd.shape[1:3]} must be divisible by 32")
    want = T.DTYPES[dtype]
    if isinstance(x, Tensor) and xd is x.data and xd.dtype == want:
        return x
    return Tensor(xd.astype(want))


def _block_cfg(model: Model, s: int, rate: float) -> BlockConfig:
    cfg = model.config
    return BlockConfig(dim=cfg.channels[s], variant=cfg.variant,
                       drop_path_rate=rate, layer_scale_init=cfg.layer_scale_init,
                       grn=cfg.grn)


def forward_dense(model: Model, x, capture: ActivationCapture | None = None,
                  pyramid_levels=None):
    """Dense encoder; with `masks`/`pyramid_levels` given this is the
    masked-dense simulation (mask re-applied after every op).

    Returns (stage_features, final); stage_features are the per-stage
    outputs (masked where applicable).
    """
    cfg = model.config
    x = _check_input(x, cfg, model.dtype)
    training = model.mode == "train"
    levels = pyramid_levels  # list of (N, H/4 / 2^s, ...) masks, or None

    def level(s):
        return None if levels is None else levels[s]

    _macs.set_label("stem")
    t = nn.conv2d(x if levels is None else sp.apply_mask(x, _pixel_level(levels)),
                  model.v("stem.conv.weight"), model.v("stem.conv.bias"),
                  ConvSpec(3, cfg.channels[0], 4, 4, stride=4))
    if levels is not None:
        t = sp.apply_mask(t, level(0))
    t = nn.layer_norm(t, model.v("stem.norm.gamma"), model.v("stem.norm.beta"))
    if levels is not None:
        t = sp.apply_mask(t, level(0))

    rates = model.drop_path_rates
    bi = 0
    stage_feats = []
    for s in range(4):
        if s > 0:
            t = nn.layer_norm(t, model.v(f"stage{s}.downsample.norm.gamma"),
                              model.v(f"stage{s}.downsample.norm.beta"))
            if levels is not None:
                t = sp.apply_mask(t, level(s - 1))
            _macs.set_label(f"stage{s}.downsample")
            c_in, c_out = cfg.channels[s - 1], cfg.channels[s]
            spec = ConvSpec(c_in, c_out, 2, 2, stride=2)
            if levels is not None:
                t = sp.masked_dense_conv(t, level(s - 1),
                                         model.v(f"stage{s}.downsample.conv.weight"),
                                         model.v(f"stage{s}.downsample.conv.bias"), spec)
            else:
                t = nn.conv2d(t, model.v(f"stage{s}.downsample.conv.weight"),
                              model.v(f"stage{s}.downsample.conv.bias"), spec)
        for b in range(cfg.depths[s]):
            name = f"stage{s}.block{b}"
            t = block_forward_dense(
                t, lambda rel, n=name: model.v(f"{n}.{rel}"),
                _block_cfg(model, s, rates[bi]), training, model.rng,
                capture=capture, name=name, mask=level(s))
            bi += 1
        stage_feats.append(t)
    return stage_feats, t


def _pixel_level(levels) -> np.ndarray:
    """Pixel-resolution mask: nearest-neighbor upsample of the H/4 level."""
    l0 = levels[0]
    return np.repeat(np.repeat(l0, 4, axis=-2), 4, axis=-1)


def forward_sparse(model: Model, x, pyramid_levels) -> sp.SparseBatch:
    """Sparse encoder: only visible sites are gathered and computed, so
    masked pixels can never influence the output."""
    cfg = model.config
    x = _check_input(x, cfg, model.dtype)
    training = model.mode == "train"
    n, hh, ww, _ = x.shape
    h0, w0 = hh // 4, ww // 4

    # stem: gather each visible H/4 site's 4x4x3 patch, then one matmul
    maps = [sp.CoordMap.from_mask(pyramid_levels[0][i]) for i in range(n)]
    patches = x.data.reshape(n, h0, 4, w0, 4, 3).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(n * h0 * w0, 48)
    rows = np.concatenate([
        i * h0 * w0 + m.active[:, 0] * w0 + m.active[:, 1] for i, m in enumerate(maps)
    ]) if any(len(m) for m in maps) else np.empty(0, dtype=np.int64)
    feats = Tensor(patches[rows].copy())
    _macs.set_label("stem")
    feats = nn.linear(feats, model.v("stem.conv.weight").reshape(48, cfg.channels[0]),
                      model.v("stem.conv.bias"))
    feats = nn.layer_norm(feats, model.v("stem.norm.gamma"), model.v("stem.norm.beta"))
    sb = sp.SparseBatch(maps, feats)

    rates = model.drop_path_rates
    bi = 0
    for s in range(4):
        if s > 0:
            f = nn.layer_norm(sb.features, model.v(f"stage{s}.downsample.norm.gamma"),
                              model.v(f"stage{s}.downsample.norm.beta"))
            _macs.set_label(f"stage{s}.downsample")
            spec = ConvSpec(cfg.channels[s - 1], cfg.channels[s], 2, 2, stride=2)
            sb = sp.strided_sparse_conv(sb.like(f),
                                        model.v(f"stage{s}.downsample.conv.weight"),
                                        model.v(f"stage{s}.downsample.conv.bias"), spec)
        for b in range(cfg.depths[s]):
            name = f"stage{s}.block{b}"
            sb = block_forward_sparse(
                sb, lambda rel, n_=name: model.v(f"{n_}.{rel}"),
                _block_cfg(model, s, rates[bi]), training, model.rng, name=name)
            bi += 1
    return sb


def classify(model: Model, x, capture: ActivationCapture | None = None) -> Tensor:
    """Dense forward through the classification head."""
    _, t = forward_dense(model, x, capture=capture)
    pooled = nn.global_avg_pool(t)
    pooled = nn.layer_norm(pooled, model.v("head.norm.gamma"), model.v("head.norm.beta"))
    _macs.set_label("head.fc")
    return nn.linear(pooled, model.v("head.fc.weight"), model.v("head.fc.bias"))


def forward(model: Model, x, mask=None, path: str = "auto",
            capture: ActivationCapture | None = None):
    """Top-level forward: returns (stage_features, logits).

    Without a mask the dense path runs and logits are produced. With a mask
    (a MaskPyramid-style list of per-stage level arrays) the spatial ops
    route through the requested masked path and logits are None.
    """
    if mask is None:
        stage_feats, t = forward_dense(model, x, capture=capture)
        pooled = nn.global_avg_pool(t)
        pooled = nn.layer_norm(pooled, model.v("head.norm.gamma"), model.v("head.norm.beta"))
        _macs.set_label("head.fc")
        logits = nn.linear(pooled, model.v("head.fc.weight"), model.v("head.fc.bias"))
        return stage_feats, logits
    if path in ("auto", "sparse"):
        sb = forward_sparse(model, x, mask)
        return [sb], None
    if path == "masked-dense":
        stage_feats, _ = forward_dense(model, x, capture=capture, pyramid_levels=mask)
        return stage_feats, None
    raise ValueError(f"unknown path {path!r}")


# ---------------------------------------------------------------------------
# bookkeeping: parameters and FLOPs (1 MAC = 1 FLOP; convs and linears only)

def count_params(model: Model) -> int:
    return sum(p.value.size for p in model.params.values())


def param_records(model: Model) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, p.shape, p.value.size) for name, p in model.named_params()]


def flop_records(cfg: ModelConfig, input_hw: int = 224) -> list[tuple[str, int]]:
    ch = cfg.channels
    recs: list[tuple[str, int]] = []
    r = input_hw // 4
    recs.append(("stem", r * r * 4 * 4 * 3 * ch[0]))
    for s in range(4):
        c = ch[s]
        if s > 0:
            r //= 2
            recs.append((f"stage{s}.downsample", r * r * 2 * 2 * ch[s - 1] * c))
        for b in range(cfg.depths[s]):
            name = f"stage{s}.block{b}"
            recs.append((f"{name}.dwconv", r * r * 7 * 7 * c))
            recs.append((f"{name}.pwconv1", r * r * c * 4 * c))
            recs.append((f"{name}.pwconv2", r * r * 4 * c * c))
    recs.append(("head.fc", ch[3] * cfg.num_classes))
    return recs


def count_flops(model_or_cfg, input_hw: int = 224) -> int:
    cfg = model_or_cfg.config if isinstance(model_or_cfg, Model) else model_or_cfg
    return sum(f for _, f in flop_records(cfg, input_hw))


def model_info(model: Model, input_hw: int = 224) -> dict:
    """Structured per-layer summary consumed by the CLI."""
    flops = dict(flop_records(model.config, input_hw))
    layers = [{"name": name, "shape": list(shape), "params": n}
              for name, shape, n in param_records(model)]
    info = {
        "name": model.config.name,
        "variant": model.config.variant,
        "input_hw": input_hw,
        "layers": layers,
        "flops_by_layer": [{"name": k, "flops": v} for k, v in flops.items()],
        "total_params": count_params(model),
        "total_flops": count_flops(model.config, input_hw),
    }
    return info
