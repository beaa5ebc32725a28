"""Dense NN primitives: 2-D convolution, LayerNorm, GELU, stochastic depth,
cross-entropy, pooling and linear layers.

Convolutions take NHWC activations and (kh, kw, Cin/groups, Cout) weights.
Each op is a fused tape primitive with a hand-written backward; a scalar-loop
reference convolution is kept alongside the optimized paths as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import macs as _macs
from .tensor import ShapeError, Tensor, _coerce, record_op

LN_EPS = 1e-6


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible "
                f"by groups {self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return oh, ow

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, self.in_channels // self.groups, self.out_channels)


# ---------------------------------------------------------------------------
# convolution forward/backward kernels (numpy level)

def _conv_pointwise(x, w):
    n, h, wd, cin = x.shape
    y = x.reshape(-1, cin) @ w.reshape(cin, -1)
    return y.reshape(n, h, wd, -1)


def _conv_pointwise_bwd(x, w, dy):
    cin = x.shape[-1]
    cout = dy.shape[-1]
    dy2 = dy.reshape(-1, cout)
    x2 = x.reshape(-1, cin)
    dx = (dy2 @ w.reshape(cin, cout).T).reshape(x.shape)
    dw = (x2.T @ dy2).reshape(1, 1, cin, cout)
    return dx, dw


def _conv_depthwise(x, w, spec):
    n, h, wd, c = x.shape
    p, kh, kw = spec.padding, spec.kernel_h, spec.kernel_w
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    oh, ow = spec.out_hw(h, wd)
    y = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, i:i + oh, j:j + ow, :] * w[i, j, 0]
    return y


def _conv_depthwise_bwd(x, w, dy, spec):
    n, h, wd, c = x.shape
    p, kh, kw = spec.padding, spec.kernel_h, spec.kernel_w
    oh, ow = dy.shape[1], dy.shape[2]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + oh, j:j + ow, :] += dy * w[i, j, 0]
            dw[i, j, 0] = (xp[:, i:i + oh, j:j + ow, :] * dy).sum(axis=(0, 1, 2))
    dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
    return dx, dw


def _conv_patch(x, w, spec):
    # non-overlapping case: stride == kernel, no padding (stem / downsample)
    n, h, wd, cin = x.shape
    k = spec.stride
    oh, ow = h // k, wd // k
    cols = x.reshape(n, oh, k, ow, k, cin).transpose(0, 1, 3, 2, 4, 5).reshape(-1, k * k * cin)
    y = cols @ w.reshape(k * k * cin, -1)
    return y.reshape(n, oh, ow, -1), cols


def _conv_patch_bwd(cols, w, dy, x_shape, spec):
    n, h, wd, cin = x_shape
    k = spec.stride
    oh, ow = h // k, wd // k
    cout = dy.shape[-1]
    dy2 = dy.reshape(-1, cout)
    w2 = w.reshape(k * k * cin, cout)
    dcols = dy2 @ w2.T
    dw = (cols.T @ dy2).reshape(w.shape)
    dx = dcols.reshape(n, oh, ow, k, k, cin).transpose(0, 1, 3, 2, 4, 5).reshape(x_shape)
    return dx, dw


def _im2col(x, spec):
    n, h, wd, cin = x.shape
    p, s = spec.padding, spec.stride
    kh, kw = spec.kernel_h, spec.kernel_w
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    oh, ow = spec.out_hw(h, wd)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]                      # (n, oh, ow, cin, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    return np.ascontiguousarray(cols), (oh, ow, xp.shape)


def _conv_general(x, w, spec):
    cols, (oh, ow, _) = _im2col(x, spec)
    y = cols @ w.reshape(-1, w.shape[-1])
    return y.reshape(x.shape[0], oh, ow, -1), cols


def _conv_general_bwd(x, cols, w, dy, spec):
    n, h, wd, cin = x.shape
    p, s = spec.padding, spec.stride
    kh, kw = spec.kernel_h, spec.kernel_w
    oh, ow = dy.shape[1], dy.shape[2]
    cout = dy.shape[-1]
    dy2 = dy.reshape(-1, cout)
    w2 = w.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    dcols = (dy2 @ w2.T).reshape(n, oh, ow, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
    return dx, dw


def conv2d(x, w, b, spec: ConvSpec) -> Tensor:
    """Dense 2-D convolution (NHWC). Dispatches to a pointwise, depthwise,
    non-overlapping-patch or im2col path; all paths share one tape node."""
    xd, xt = _coerce(x)
    wd_, wt = _coerce(w)
    bd, bt = (None, None) if b is None else _coerce(b)
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {xd.shape}")
    if xd.shape[-1] != spec.in_channels:
        raise ShapeError(
            f"input channels {xd.shape[-1]} != spec.in_channels {spec.in_channels} "
            f"(input {xd.shape}, weight {wd_.shape})")
    if wd_.shape != spec.weight_shape():
        raise ShapeError(f"weight shape {wd_.shape} != expected {spec.weight_shape()}")

    n, h, wdt, _ = xd.shape
    oh, ow = spec.out_hw(h, wdt)
    _macs.record("conv2d", n * oh * ow * spec.kernel_h * spec.kernel_w
                 * (spec.in_channels // spec.groups) * spec.out_channels,
                 out_sites=n * oh * ow, spec=spec)

    if spec.groups == 1:
        if spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1 and spec.padding == 0:
            y = _conv_pointwise(xd, wd_)

            def bwd(g):
                dx, dw = _conv_pointwise_bwd(xd, wd_, g)
                db = g.sum(axis=(0, 1, 2)) if bt is not None else None
                return dx, dw, db
        elif (spec.stride == spec.kernel_h == spec.kernel_w and spec.padding == 0
              and h % spec.stride == 0 and wdt % spec.stride == 0):
            y, cols = _conv_patch(xd, wd_, spec)

            def bwd(g):
                dx, dw = _conv_patch_bwd(cols, wd_, g, xd.shape, spec)
                db = g.sum(axis=(0, 1, 2)) if bt is not None else None
                return dx, dw, db
        else:
            y, cols = _conv_general(xd, wd_, spec)

            def bwd(g):
                dx, dw = _conv_general_bwd(xd, cols, wd_, g, spec)
                db = g.sum(axis=(0, 1, 2)) if bt is not None else None
                return dx, dw, db
    elif spec.depthwise and spec.stride == 1:
        y = _conv_depthwise(xd, wd_, spec)

        def bwd(g):
            dx, dw = _conv_depthwise_bwd(xd, wd_, g, spec)
            db = g.sum(axis=(0, 1, 2)) if bt is not None else None
            return dx, dw, db
    else:
        # generic grouped convolution: per-group im2col
        cg_in = spec.in_channels // spec.groups
        cg_out = spec.out_channels // spec.groups
        sub = ConvSpec(cg_in, cg_out, spec.kernel_h, spec.kernel_w,
                       spec.stride, spec.padding, 1)
        ys, colss = [], []
        for gi in range(spec.groups):
            yg, cg = _conv_general(xd[..., gi * cg_in:(gi + 1) * cg_in],
                                   wd_[..., gi * cg_out:(gi + 1) * cg_out], sub)
            ys.append(yg)
            colss.append(cg)
        y = np.concatenate(ys, axis=-1)

        def bwd(g):
            dxs, dws = [], []
            for gi in range(spec.groups):
                dxg, dwg = _conv_general_bwd(
                    xd[..., gi * cg_in:(gi + 1) * cg_in], colss[gi],
                    wd_[..., gi * cg_out:(gi + 1) * cg_out],
                    g[..., gi * cg_out:(gi + 1) * cg_out], sub)
                dxs.append(dxg)
                dws.append(dwg)
            db = g.sum(axis=(0, 1, 2)) if bt is not None else None
            return np.concatenate(dxs, axis=-1), np.concatenate(dws, axis=-1), db

    if bd is not None:
        y = y + bd
    return record_op(y, [xt, wt, bt], bwd)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                     spec: ConvSpec) -> np.ndarray:
    """Naive scalar-loop convolution: the oracle for every optimized path."""
    n, h, wd, _ = x.shape
    oh, ow = spec.out_hw(h, wd)
    cg_in = spec.in_channels // spec.groups
    cg_out = spec.out_channels // spec.groups
    y = np.zeros((n, oh, ow, spec.out_channels), dtype=np.float64)
    for ni in range(n):
        for oi in range(oh):
            for oj in range(ow):
                for g in range(spec.groups):
                    for co in range(cg_out):
                        acc = 0.0
                        for ki in range(spec.kernel_h):
                            for kj in range(spec.kernel_w):
                                ii = oi * spec.stride + ki - spec.padding
                                jj = oj * spec.stride + kj - spec.padding
                                if 0 <= ii < h and 0 <= jj < wd:
                                    for ci in range(cg_in):
                                        acc += (x[ni, ii, jj, g * cg_in + ci]
                                                * w[ki, kj, ci, g * cg_out + co])
                        oc = g * cg_out + co
                        y[ni, oi, oj, oc] = acc + (b[oc] if b is not None else 0.0)
    return y.astype(x.dtype)


# ---------------------------------------------------------------------------
# normalization / activation

def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """LayerNorm over the trailing (channel) axis of x."""
    xd, xt = _coerce(x)
    gd, gt = _coerce(gamma)
    bd, bt = _coerce(beta)
    c = xd.shape[-1]
    if gd.shape != (c,) or bd.shape != (c,):
        raise ShapeError(f"affine params {gd.shape}/{bd.shape} != ({c},)")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * gd + bd

    def bwd(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return record_op(y, [xt, gt, bt], bwd)


def gelu(x) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd, xt = _coerce(x)
    phi = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    y = xd * phi

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return (g * (phi + xd * pdf),)
    return record_op(y.astype(xd.dtype), [xt], bwd)


def drop_path(x, residual_branch, rate: float, training: bool,
              rng: np.random.Generator | None = None) -> Tensor:
    """Per-sample stochastic depth on the residual branch.

    Eval mode (or rate 0) is a plain residual add; train mode keeps each
    sample's branch with probability 1-rate and rescales by 1/(1-rate).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x + residual_branch
    if rng is None:
        raise ValueError("training drop_path with rate > 0 needs an rng")
    bd, _ = _coerce(residual_branch)
    n = bd.shape[0]
    keep = (rng.random(n) >= rate).astype(bd.dtype) / (1.0 - rate)
    scale = keep.reshape((n,) + (1,) * (bd.ndim - 1))
    return x + residual_branch * scale


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy, stabilized by max subtraction."""
    ld, lt = _coerce(logits)
    labels = np.asarray(labels)
    if ld.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {ld.shape}")
    n, k = ld.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)
    return record_op(np.asarray(loss, dtype=ld.dtype), [lt], bwd)


def global_avg_pool(x) -> Tensor:
    """NHWC -> (N, C) spatial mean."""
    from .tensor import reduce
    return reduce("mean", x, axes=(1, 2))


def linear(x, w, b=None) -> Tensor:
    """(N, Cin) @ (Cin, Cout) + b, recorded as one node."""
    xd, xt = _coerce(x)
    wd_, wt = _coerce(w)
    bd, bt = (None, None) if b is None else _coerce(b)
    if xd.ndim != 2 or xd.shape[1] != wd_.shape[0]:
        raise ShapeError(f"linear shapes {xd.shape} and {wd_.shape} do not align")
    _macs.record("linear", xd.shape[0] * wd_.shape[0] * wd_.shape[1],
                 out_sites=xd.shape[0])
    y = xd @ wd_
    if bd is not None:
        y = y + bd

    def bwd(g):
        db = g.sum(axis=0) if bt is not None else None
        return g @ wd_.T, xd.T @ g, db
    return record_op(y, [xt, wt, bt], bwd)
