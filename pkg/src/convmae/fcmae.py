"""Fully convolutional masked autoencoding.

A random mask is drawn on the coarsest (stride-32) grid and replicated up
through every encoder resolution, so downsampling always meets whole 2x2
blocks. The encoder runs sparsely on the visible sites; a shared learnable
token fills the masked positions of the projected final-stage map; a small
stack of dense ConvNeXt V2 blocks predicts the patch-normalized pixels, and
the MSE is averaged over masked patches only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import convnext as cx
from . import nn
from . import sparse as sp
from . import tensor as T
from .convnext import BlockConfig, Model, trunc_normal
from .grn import GrnConfig
from .tensor import Param, Tensor


@dataclass(frozen=True)
class MaskSpec:
    ratio: float = 0.6
    grid: tuple[int, int] = (4, 4)   # input extents / 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must be in [0, 1), got {self.ratio}")

    @property
    def n_masked(self) -> int:
        # round-half-up so counts are portable across platforms
        return int(np.floor(self.ratio * self.grid[0] * self.grid[1] + 0.5))


def generate_mask(spec: MaskSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Coarsest-stage binary grid (1 = masked), exactly spec.n_masked ones."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    h, w = spec.grid
    cells = h * w
    mask = np.zeros(cells, dtype=np.uint8)
    if spec.n_masked:
        mask[rng.choice(cells, size=spec.n_masked, replace=False)] = 1
    return mask.reshape(h, w)


def upsample_mask(coarse: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor block replication; keeps masks block-uniform."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    return np.repeat(np.repeat(coarse, factor, axis=-2), factor, axis=-1)


def downsample_mask(fine: np.ndarray, factor: int) -> np.ndarray:
    return fine[..., ::factor, ::factor]


@dataclass
class MaskPyramid:
    """Visibility masks at each encoder stage resolution (H/4 ... H/32),
    all nearest-neighbor upsamplings of one coarsest-stage sample."""

    levels: list[np.ndarray]

    @classmethod
    def from_coarse(cls, coarse: np.ndarray) -> "MaskPyramid":
        return cls([upsample_mask(coarse, f) for f in (8, 4, 2, 1)])

    @property
    def coarse(self) -> np.ndarray:
        return self.levels[3]

    def pixel_mask(self) -> np.ndarray:
        return upsample_mask(self.levels[0], 4)


def stack_pyramids(pyramids: list[MaskPyramid]) -> list[np.ndarray]:
    """Per-stage (N, h_s, w_s) arrays for a batch of pyramids."""
    return [np.stack([p.levels[s] for p in pyramids]) for s in range(4)]


def batch_masks(n: int, spec: MaskSpec, rng: np.random.Generator) -> list[MaskPyramid]:
    return [MaskPyramid.from_coarse(generate_mask(spec, rng)) for _ in range(n)]


# ---------------------------------------------------------------------------
# reconstruction target

def patchify_and_normalize(img: np.ndarray, patch: int = 32,
                           eps: float = 1e-6) -> np.ndarray:
    """Split into patch x patch tiles and standardize each tile by its own
    pixel mean and std (variance floored at eps).

    (H, W, 3) -> (h*w, patch*patch*3); a leading batch axis is preserved.
    """
    img = np.asarray(img)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    n, hh, ww, c = img.shape
    if hh % patch or ww % patch:
        raise T.ShapeError(f"extents {hh}x{ww} not divisible by patch {patch}")
    h, w = hh // patch, ww // patch
    tiles = img.reshape(n, h, patch, w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    tiles = tiles.reshape(n, h * w, patch * patch * c)
    # normalize in f64: the eps floor would otherwise amplify f32 roundoff
    # of a constant patch's mean into visible garbage
    wide = tiles.astype(np.float64)
    mu = wide.mean(axis=-1, keepdims=True)
    var = wide.var(axis=-1, keepdims=True)
    out = ((wide - mu) / np.sqrt(var + eps)).astype(img.dtype)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# decoder

@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 512
    depth: int = 1
    patch: int = 32
    out_channels: int = 3
    grn: GrnConfig = field(default_factory=GrnConfig)

    @property
    def pred_dim(self) -> int:
        return self.patch * self.patch * self.out_channels


class Decoder:
    """Pointwise projection -> mask-token fill -> LayerNorm -> ConvNeXt V2
    block(s) -> pointwise prediction head. Always runs densely: every patch,
    visible or masked, gets a prediction."""

    def __init__(self, enc_channels: int, cfg: DecoderConfig = DecoderConfig(),
                 seed: int = 0, dtype: str = "f32"):
        self.cfg = cfg
        self.enc_channels = enc_channels
        self.dtype = dtype
        npdt = T.DTYPES[dtype]
        rng = np.random.default_rng(seed)
        d = cfg.dim
        params: dict[str, Param] = {}

        def add(name, arr):
            params[name] = Param(name, arr)

        add("proj.weight", trunc_normal((enc_channels, d), 0.02, rng, npdt))
        add("proj.bias", np.zeros(d, npdt))
        add("mask_token", trunc_normal((d,), 0.02, rng, npdt))
        add("norm.gamma", np.ones(d, npdt))
        add("norm.beta", np.zeros(d, npdt))
        for i in range(cfg.depth):
            params.update(cx._block_param_init(f"block{i}", d, "v2", rng, npdt))
        add("pred.weight", trunc_normal((d, cfg.pred_dim), 0.02, rng, npdt))
        add("pred.bias", np.zeros(cfg.pred_dim, npdt))
        self.params = params

    def v(self, name: str) -> Tensor:
        return self.params[name].value

    def named_params(self):
        return self.params.items()

    def forward(self, encoded, coarse_masks: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """encoded: SparseBatch or dense (N, h, w, C_enc) Tensor at the
        coarsest resolution; coarse_masks: (N, h, w) with 1 = masked.
        Returns predictions (N, h*w, patch*patch*out_channels)."""
        cfg = self.cfg
        coarse_masks = np.asarray(coarse_masks)
        if coarse_masks.ndim == 2:
            coarse_masks = coarse_masks[None]
        if isinstance(encoded, sp.SparseBatch):
            if encoded.resolution != coarse_masks.shape[1:]:
                raise T.ShapeError(
                    f"encoded resolution {encoded.resolution} != mask "
                    f"{coarse_masks.shape[1:]}")
            f = nn.linear(encoded.features, self.v("proj.weight"), self.v("proj.bias"))
            dense = sp.sparse_to_dense(encoded.like(f))
            if dense.ndim == 3:
                dense = dense.reshape(1, *dense.shape)
        else:
            x = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
            if x.ndim == 3:
                x = x.reshape(1, *x.shape)
            if x.shape[1:3] != coarse_masks.shape[1:]:
                raise T.ShapeError(
                    f"encoded resolution {x.shape[1:3]} != mask {coarse_masks.shape[1:]}")
            n, h, w, c = x.shape
            f = nn.linear(x.reshape(n * h * w, c), self.v("proj.weight"), self.v("proj.bias"))
            dense = f.reshape(n, h, w, cfg.dim)

        n, h, w, d = dense.shape
        m = coarse_masks.astype(dense.data.dtype)[..., None]       # (N, h, w, 1)
        filled = dense * (1.0 - m) + self.v("mask_token") * m
        t = nn.layer_norm(filled, self.v("norm.gamma"), self.v("norm.beta"))
        bc = BlockConfig(dim=d, variant="v2", drop_path_rate=0.0, grn=cfg.grn)
        for i in range(cfg.depth):
            t = cx.block_forward_dense(
                t, lambda rel, i_=i: self.v(f"block{i_}.{rel}"), bc,
                training, rng, name=f"decoder.block{i}")
        t = nn.linear(t.reshape(n * h * w, d), self.v("pred.weight"), self.v("pred.bias"))
        return t.reshape(n, h * w, cfg.pred_dim)


def decode(encoded, mask: np.ndarray, decoder: Decoder) -> Tensor:
    """Functional front end over Decoder.forward (eval-mode)."""
    return decoder.forward(encoded, mask, training=False)


# ---------------------------------------------------------------------------
# loss

def reconstruction_loss(pred: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked patches of the per-patch mean squared error.

    Visible patches contribute exactly zero; an all-visible mask is an
    error because the loss would be undefined.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if pred.ndim == 2:
        pred = pred.reshape(1, *pred.shape)
        targets = targets[None] if targets.ndim == 2 else targets
    n, npatch, dd = pred.shape
    mask_flat = mask.reshape(n, -1).astype(pred.data.dtype)
    if mask_flat.shape[1] != npatch:
        raise T.ShapeError(f"mask cells {mask_flat.shape[1]} != patches {npatch}")
    m = float(mask_flat.sum())
    if m == 0:
        raise ValueError("reconstruction loss undefined: zero masked patches")
    diff = pred - targets.astype(pred.data.dtype)
    patch_mse = (diff * diff).mean(axes=-1)       # (N, npatch)
    return (patch_mse * mask_flat).sum() * (1.0 / m)


# ---------------------------------------------------------------------------
# one pre-training step

def pretrain_forward(model: Model, decoder: Decoder, batch: np.ndarray,
                     pyramids: list[MaskPyramid], path: str = "sparse") -> Tensor:
    """Sparse (or masked-dense) encode -> decode -> masked loss."""
    levels = stack_pyramids(pyramids)
    if path == "sparse":
        encoded = cx.forward_sparse(model, batch, levels)
    elif path == "masked-dense":
        _, encoded = cx.forward_dense(model, batch, pyramid_levels=levels)
    else:
        raise ValueError(f"unknown pretrain path {path!r}")
    coarse = levels[3]
    pred = decoder.forward(encoded, coarse, training=model.mode == "train",
                           rng=model.rng)
    targets = patchify_and_normalize(
        np.asarray(batch, dtype=T.DTYPES[model.dtype]), patch=decoder.cfg.patch)
    return reconstruction_loss(pred, targets, coarse)


def pretrain_step(model: Model, decoder: Decoder, batch: np.ndarray,
                  spec: MaskSpec, opt, rng_mask: np.random.Generator,
                  path: str = "sparse") -> float:
    """One full update; returns the pre-update loss."""
    if model.mode != "train":
        raise RuntimeError("pretrain_step requires the model in train mode")
    pyramids = batch_masks(batch.shape[0], spec, rng_mask)
    loss = pretrain_forward(model, decoder, batch, pyramids, path=path)
    T.backward(loss)
    opt.step()
    opt.zero_grad()
    return float(loss.item())


def export_mask_pyramid_pgm(pyramid: MaskPyramid, out_dir, prefix: str = "mask") -> list[str]:
    """Write each pyramid level (and the coarse grid) as a PGM image."""
    from .pgm import write_pgm
    import os
    paths = []
    for s, level in enumerate(pyramid.levels):
        path = os.path.join(str(out_dir), f"{prefix}_level{s}.pgm")
        write_pgm(path, (level * 255).astype(np.uint8))
        paths.append(path)
    return paths
