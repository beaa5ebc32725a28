"""Global response normalization: aggregate -> normalize -> calibrate.

The default unit computes per-channel spatial L2 norms, divides them by
their cross-channel mean, rescales the input by those scores, and applies a
zero-initialized affine plus a residual connection — so a freshly built
layer is the identity. Aggregation (l2 | l1 | avg) and normalization
(divisive | standardize | inverse_sum) are configurable ablation axes, and
either step can be dropped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

AGGREGATIONS = ("l2", "l1", "avg")
NORMALIZATIONS = ("divisive", "standardize", "inverse_sum")


@dataclass(frozen=True)
class GrnConfig:
    aggregation: str = "l2"
    normalization: str = "divisive"
    residual: bool = True
    channel_scale: bool = True   # divisive denominator: mean (True) vs sum (False)
    eps: float = 1e-6
    use_aggregation: bool = True
    use_normalization: bool = True

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


@dataclass
class GrnParams:
    """Per-channel affine, zero-initialized so the residual unit starts as
    the identity."""

    gamma: Tensor
    beta: Tensor

    @classmethod
    def zeros(cls, channels: int, dtype: str = "f32") -> "GrnParams":
        return cls(T.zeros((channels,), dtype), T.zeros((channels,), dtype))


def aggregate(x, cfg: GrnConfig, spatial_axes=None, keepdims: bool = False) -> Tensor:
    """Pool each channel's spatial map to one scalar.

    For an H x W x C input the result is a C-vector; `spatial_axes` defaults
    to every axis but the last.
    """
    nd = x.ndim if isinstance(x, Tensor) else np.asarray(x).ndim
    if spatial_axes is None:
        spatial_axes = tuple(range(nd - 1))
    if cfg.aggregation == "l2":
        return T.reduce("l2_norm", x, spatial_axes, keepdims)
    if cfg.aggregation == "l1":
        return T.reduce("l1_norm", x, spatial_axes, keepdims)
    return T.reduce("mean", x, spatial_axes, keepdims)


def normalize(gx, cfg: GrnConfig) -> Tensor:
    """Cross-channel response normalization of the aggregated vector.

    divisive: gx / mean(gx) (channel_scale=True; plain sum denominator
    otherwise), with the denominator floored at eps so all-zero input maps
    to zero. standardize: (gx - mu) / (sigma + eps). inverse_sum:
    1 / (sum(gx) + eps), identical for every channel.
    """
    if not isinstance(gx, Tensor):
        gx = Tensor(gx)
    if cfg.normalization == "divisive":
        denom = T.reduce("mean" if cfg.channel_scale else "sum", gx, -1, keepdims=True)
        return gx / T.maximum_scalar(denom, cfg.eps)
    if cfg.normalization == "standardize":
        mu = T.reduce("mean", gx, -1, keepdims=True)
        centered = gx - mu
        sigma = T.sqrt(T.reduce("mean", centered * centered, -1, keepdims=True))
        return centered / (sigma + cfg.eps)
    total = T.reduce("sum", gx, -1, keepdims=True)
    inv = 1.0 / (total + cfg.eps)
    return inv * T.ones(gx.shape, gx.dtype)  # broadcast to a full C-vector


def _scores(x, cfg: GrnConfig, spatial_axes) -> Tensor | None:
    """Per-element multiplicative scores, or None when both steps are off."""
    if cfg.use_aggregation and cfg.use_normalization:
        gx = aggregate(x, cfg, spatial_axes, keepdims=True)
        return normalize(gx, cfg)
    if cfg.use_aggregation:
        return aggregate(x, cfg, spatial_axes, keepdims=True)
    if cfg.use_normalization:
        # experimental: divisive normalization over raw spatial-channel values
        all_axes = tuple(spatial_axes) + (x.ndim - 1,)
        denom = T.reduce("mean", x, all_axes, keepdims=True)
        return x / T.maximum_scalar(denom, cfg.eps)
    return None


def grn_forward(x, params: GrnParams, cfg: GrnConfig = GrnConfig()) -> Tensor:
    """y = gamma * (x * scores) + beta [+ x].

    Accepts H x W x C or N x H x W x C; scores broadcast over space.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if params.gamma.shape != (x.shape[-1],) or params.beta.shape != (x.shape[-1],):
        raise T.ShapeError(
            f"GRN affine {params.gamma.shape} does not match channels {x.shape[-1]}")
    spatial_axes = tuple(range(x.ndim))[-3:-1] if x.ndim >= 3 else (0,) * 0
    if x.ndim == 2:  # bare feature matrix: rows are sites
        spatial_axes = (0,)
    nx = _scores(x, cfg, spatial_axes)
    calibrated = x if nx is None else x * nx
    y = params.gamma * calibrated + params.beta
    if cfg.residual:
        y = y + x
    return y


def grn_forward_segments(features: Tensor, offsets: np.ndarray, total_sites: int,
                         params: GrnParams, cfg: GrnConfig = GrnConfig()) -> Tensor:
    """GRN over per-image row segments of a sparse feature matrix.

    Aggregation runs over each image's active rows. Sums (l2, l1) match the
    zero-filled dense computation automatically; `avg` divides by the full
    site count `total_sites` so the dense and sparse paths stay equivalent.
    """
    counts = np.diff(offsets)
    if cfg.use_aggregation and cfg.use_normalization:
        gx = _segment_aggregate(features, offsets, total_sites, cfg)
        nx = normalize(gx, cfg)
        scores = T.repeat_rows(nx, counts)
    elif cfg.use_aggregation:
        gx = _segment_aggregate(features, offsets, total_sites, cfg)
        scores = T.repeat_rows(gx, counts)
    elif cfg.use_normalization:
        c = features.shape[1]
        mean_all = T.segment_sum(features, offsets).sum(-1, keepdims=True) \
            * (1.0 / (total_sites * c))
        denom = T.maximum_scalar(mean_all, cfg.eps)
        scores = features / T.repeat_rows(denom * T.ones((len(counts), c)), counts)
    else:
        scores = None
    calibrated = features if scores is None else features * scores
    y = params.gamma * calibrated + params.beta
    if cfg.residual:
        y = y + features
    return y


def _segment_aggregate(features, offsets, total_sites, cfg: GrnConfig) -> Tensor:
    if cfg.aggregation == "l2":
        return T.segment_l2(features, offsets)
    if cfg.aggregation == "l1":
        return T.segment_sum(T.absolute(features), offsets)
    return T.segment_sum(features, offsets) * (1.0 / total_sites)
