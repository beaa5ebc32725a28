"""Submanifold sparse convolution over masked 2-D feature maps.

A masked feature map is stored as a CoordMap (the active sites, row-major,
with a site -> row hash index) plus a dense |active| x C feature matrix.
Spatial convolutions run gather-scatter per kernel offset; everything
pointwise acts on the feature matrix directly.

The masked-dense simulation (binary mask applied before and after each dense
operation) lives here too; the two paths are numerically equivalent and each
serves as the other's oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import macs as _macs
from . import nn
from .nn import ConvSpec
from .tensor import ShapeError, Tensor, _coerce, record_op


class BlockUniformityError(ValueError):
    """A strided sparse conv met a 2x2 block that was only partially active."""


class CoordMap:
    """Active (row, col) sites of one image at one resolution.

    Sites are unique, in bounds and stored in row-major order; `index` maps a
    site to its row in the feature matrix. Kernel maps (per-offset source and
    destination row indices) are cached here because a CoordMap is shared by
    every layer of a stage.
    """

    def __init__(self, resolution: tuple[int, int], active: np.ndarray):
        h, w = resolution
        active = np.asarray(active, dtype=np.int64).reshape(-1, 2)
        if active.size:
            if active[:, 0].min() < 0 or active[:, 0].max() >= h \
                    or active[:, 1].min() < 0 or active[:, 1].max() >= w:
                raise ShapeError(f"site out of bounds for resolution {resolution}")
        order = np.lexsort((active[:, 1], active[:, 0]))
        active = active[order]
        flat = active[:, 0] * w + active[:, 1]
        if len(np.unique(flat)) != len(flat):
            raise ShapeError("duplicate active sites")
        self.resolution = (h, w)
        self.active = active
        self.index = {(int(r), int(c)): i for i, (r, c) in enumerate(active)}
        grid = np.full((h, w), -1, dtype=np.int64)
        if active.size:
            grid[active[:, 0], active[:, 1]] = np.arange(len(active))
        self._grid = grid
        self._kmaps: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray]]] = {}
        self._strided: tuple[CoordMap, np.ndarray] | None = None

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "CoordMap":
        """Active sites are the mask==0 (visible) positions."""
        mask = np.asarray(mask)
        return cls(mask.shape, np.argwhere(mask == 0))

    def __len__(self) -> int:
        return len(self.active)

    def mask(self) -> np.ndarray:
        """Reconstruct the binary mask (1 = masked)."""
        m = np.ones(self.resolution, dtype=np.uint8)
        if len(self):
            m[self.active[:, 0], self.active[:, 1]] = 0
        return m

    def kernel_pairs(self, kh: int, kw: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per kernel offset, (source rows, destination rows) of active pairs.

        Offsets are enumerated row-major over the kernel; padding is implied
        to be (k-1)//2 so the map is resolution-preserving (odd kernels).
        """
        key = (kh, kw)
        if key in self._kmaps:
            return self._kmaps[key]
        h, w = self.resolution
        pairs = []
        dst_all = np.arange(len(self), dtype=np.int64)
        for i in range(kh):
            for j in range(kw):
                di, dj = i - (kh - 1) // 2, j - (kw - 1) // 2
                if di == 0 and dj == 0:
                    pairs.append((dst_all, dst_all))
                    continue
                nr = self.active[:, 0] + di
                nc = self.active[:, 1] + dj
                ok = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
                src = np.full(len(self), -1, dtype=np.int64)
                src[ok] = self._grid[nr[ok], nc[ok]]
                hit = src >= 0
                pairs.append((src[hit], dst_all[hit]))
        self._kmaps[key] = pairs
        return pairs

    def strided_children(self) -> tuple["CoordMap", np.ndarray]:
        """Coarse CoordMap at half resolution plus the (m, 4) child rows of
        each coarse site, ordered (0,0),(0,1),(1,0),(1,1) within the block.

        Requires 2x2 block uniformity; raises BlockUniformityError otherwise.
        """
        if self._strided is not None:
            return self._strided
        h, w = self.resolution
        if h % 2 or w % 2:
            raise ShapeError(f"resolution {self.resolution} not divisible by 2")
        coarse_flat = (self.active[:, 0] // 2) * (w // 2) + self.active[:, 1] // 2
        uniq, counts = np.unique(coarse_flat, return_counts=True)
        if counts.size and (counts != 4).any():
            bad = uniq[counts != 4][0]
            raise BlockUniformityError(
                f"2x2 block at coarse site ({bad // (w // 2)}, {bad % (w // 2)}) is "
                f"partially active; masks must be built at the coarsest stage "
                f"and upsampled")
        coarse_sites = np.stack([uniq // (w // 2), uniq % (w // 2)], axis=1)
        coarse = CoordMap((h // 2, w // 2), coarse_sites)
        children = np.empty((len(coarse), 4), dtype=np.int64)
        for o, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            children[:, o] = self._grid[coarse.active[:, 0] * 2 + di,
                                        coarse.active[:, 1] * 2 + dj]
        self._strided = (coarse, children)
        return self._strided


@dataclass
class SparseTensor:
    """Features at the active sites of one image."""

    coords: CoordMap
    features: Tensor

    def __post_init__(self):
        if self.features.shape[0] != len(self.coords):
            raise ShapeError(
                f"feature rows {self.features.shape[0]} != active sites {len(self.coords)}")

    @property
    def channels(self) -> int:
        return self.features.shape[1]


class SparseBatch:
    """A batch of per-image CoordMaps with one concatenated feature matrix.

    Geometry (maps, row offsets, concatenated kernel maps) is shared across
    all layers of a stage, so the expensive index arithmetic happens once.
    """

    def __init__(self, maps: list[CoordMap], features: Tensor,
                 _shared: "SparseBatch | None" = None):
        self.maps = list(maps)
        counts = np.array([len(m) for m in self.maps], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.features = features
        if features.shape[0] != self.offsets[-1]:
            raise ShapeError(
                f"feature rows {features.shape[0]} != total sites {self.offsets[-1]}")
        if _shared is not None and _shared.maps is self.maps:
            self._kmaps = _shared._kmaps
        else:
            self._kmaps = {}

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps[0].resolution

    @property
    def batch_size(self) -> int:
        return len(self.maps)

    def like(self, features: Tensor) -> "SparseBatch":
        out = SparseBatch.__new__(SparseBatch)
        out.maps = self.maps
        out.offsets = self.offsets
        out.features = features
        out._kmaps = self._kmaps
        if features.shape[0] != self.offsets[-1]:
            raise ShapeError("feature rows do not match geometry")
        return out

    def kernel_pairs(self, kh: int, kw: int):
        key = (kh, kw)
        if key not in self._kmaps:
            nk = kh * kw
            srcs: list[list[np.ndarray]] = [[] for _ in range(nk)]
            dsts: list[list[np.ndarray]] = [[] for _ in range(nk)]
            for img, cmap in enumerate(self.maps):
                base = self.offsets[img]
                for o, (s, d) in enumerate(cmap.kernel_pairs(kh, kw)):
                    srcs[o].append(s + base)
                    dsts[o].append(d + base)
            self._kmaps[key] = [
                (np.concatenate(srcs[o]), np.concatenate(dsts[o])) for o in range(nk)
            ]
        return self._kmaps[key]

    def strided_children(self):
        key = "strided"
        if key not in self._kmaps:
            coarse_maps = []
            child_rows = []
            out_base = 0
            for img, cmap in enumerate(self.maps):
                coarse, children = cmap.strided_children()
                coarse_maps.append(coarse)
                child_rows.append(children + self.offsets[img])
                out_base += len(coarse)
            self._kmaps[key] = (coarse_maps, np.concatenate(child_rows, axis=0)
                                if child_rows else np.empty((0, 4), dtype=np.int64))
        return self._kmaps[key]


def _geometry(x: SparseTensor | SparseBatch) -> SparseBatch:
    if isinstance(x, SparseBatch):
        return x
    return SparseBatch([x.coords], x.features)


def _rewrap(template: SparseTensor | SparseBatch, batch: SparseBatch,
            features: Tensor) -> SparseTensor | SparseBatch:
    if isinstance(template, SparseBatch):
        return template.like(features)
    return SparseTensor(template.coords, features)


# ---------------------------------------------------------------------------
# dense <-> sparse conversion

def dense_to_sparse(x, mask: np.ndarray) -> SparseTensor:
    """Extract the visible (mask==0) sites of an HWC (or 1HWC) map."""
    xd, xt = _coerce(x)
    if xd.ndim == 4:
        if xd.shape[0] != 1:
            raise ShapeError("dense_to_sparse takes one image; use batch_to_sparse")
        xd, xt_s = xd[0], xt
    else:
        xt_s = xt
    mask = np.asarray(mask)
    if mask.shape != xd.shape[:2]:
        raise ShapeError(f"mask {mask.shape} != spatial extents {xd.shape[:2]}")
    cmap = CoordMap.from_mask(mask)
    rows, cols = cmap.active[:, 0], cmap.active[:, 1]

    def bwd(g):
        dx = np.zeros_like(xd)
        dx[rows, cols] = g
        return (dx.reshape(x.shape if hasattr(x, "shape") else dx.shape),)
    feats = record_op(xd[rows, cols].copy(), [xt_s], bwd)
    return SparseTensor(cmap, feats)


def sparse_to_dense(sp: SparseTensor | SparseBatch, fill: float = 0.0) -> Tensor:
    """Densify to HWC (single image) or NHWC (batch); inactive sites = fill."""
    batch = _geometry(sp)
    h, w = batch.resolution
    n = batch.batch_size
    c = batch.features.shape[1]
    fd, ft = _coerce(batch.features)
    flat_idx = np.concatenate([
        img * h * w + m.active[:, 0] * w + m.active[:, 1]
        for img, m in enumerate(batch.maps)
    ]) if batch.offsets[-1] else np.empty(0, dtype=np.int64)

    out = np.full((n * h * w, c), fill, dtype=fd.dtype)
    out[flat_idx] = fd
    out = out.reshape(n, h, w, c)

    def bwd(g):
        return (g.reshape(n * h * w, c)[flat_idx],)
    dense = record_op(out, [ft], bwd)
    if isinstance(sp, SparseTensor):
        return dense.reshape(h, w, c)
    return dense


def batch_to_sparse(x, masks: np.ndarray) -> SparseBatch:
    """NHWC batch + per-image (N, H, W) masks -> SparseBatch."""
    xd, xt = _coerce(x)
    n, h, w, c = xd.shape
    masks = np.asarray(masks)
    if masks.shape != (n, h, w):
        raise ShapeError(f"masks {masks.shape} != {(n, h, w)}")
    maps = [CoordMap.from_mask(masks[i]) for i in range(n)]
    flat_idx = np.concatenate([
        i * h * w + m.active[:, 0] * w + m.active[:, 1] for i, m in enumerate(maps)
    ]) if any(len(m) for m in maps) else np.empty(0, dtype=np.int64)
    x2 = xd.reshape(n * h * w, c)

    def bwd(g):
        dx = np.zeros_like(x2)
        dx[flat_idx] = g
        return (dx.reshape(xd.shape),)
    feats = record_op(x2[flat_idx].copy(), [xt], bwd)
    return SparseBatch(maps, feats)


# ---------------------------------------------------------------------------
# sparse convolutions

def _gather_scatter(feats_t, w_t, b_t, pairs, n_out, depthwise, op_name, site_cost):
    """Shared gather-multiply-scatter kernel for submanifold and strided convs.

    pairs: per kernel offset, (source rows, destination rows); within one
    offset both index arrays are duplicate-free, so fancy-index accumulation
    is exact.
    """
    fd, ft = _coerce(feats_t)
    wd, wt = _coerce(w_t)
    bd, bt = (None, None) if b_t is None else _coerce(b_t)
    nk = len(pairs)
    if depthwise:
        wk = wd.reshape(nk, -1)            # (k*k, C)
        cout = wk.shape[1]
    else:
        wk = wd.reshape(nk, wd.shape[-2], wd.shape[-1])  # (k*k, Cin, Cout)
        cout = wk.shape[2]
    _macs.record(op_name, n_out * site_cost, out_sites=n_out)

    out = np.zeros((n_out, cout), dtype=fd.dtype)
    for o, (src, dst) in enumerate(pairs):
        if len(src) == 0:
            continue
        if depthwise:
            out[dst] += fd[src] * wk[o]
        else:
            out[dst] += fd[src] @ wk[o]
    if bd is not None:
        out += bd

    def bwd(g):
        dfe = np.zeros_like(fd)
        dwk = np.zeros_like(wk)
        for o, (src, dst) in enumerate(pairs):
            if len(src) == 0:
                continue
            go = g[dst]
            if depthwise:
                dfe[src] += go * wk[o]
                dwk[o] = (fd[src] * go).sum(axis=0)
            else:
                dfe[src] += go @ wk[o].T
                dwk[o] = fd[src].T @ go
        db = g.sum(axis=0) if bt is not None else None
        return dfe, dwk.reshape(wd.shape), db
    return record_op(out, [ft, wt, bt], bwd)


def submanifold_conv(x: SparseTensor | SparseBatch, w, b, spec: ConvSpec):
    """Sparse convolution whose output sites equal the input sites.

    Each output site accumulates only contributions from active sites inside
    its kernel window. Strided specs are routed to strided_sparse_conv.
    """
    if spec.stride != 1:
        return strided_sparse_conv(x, w, b, spec)
    batch = _geometry(x)
    if batch.features.shape[1] != spec.in_channels:
        raise ShapeError(
            f"sparse features have {batch.features.shape[1]} channels, "
            f"spec.in_channels is {spec.in_channels}")
    if spec.kernel_h % 2 == 0 or spec.kernel_w % 2 == 0:
        raise ShapeError("submanifold conv requires odd kernels")
    pairs = batch.kernel_pairs(spec.kernel_h, spec.kernel_w)
    site_cost = (spec.kernel_h * spec.kernel_w
                 * (spec.in_channels // spec.groups) * spec.out_channels)
    if spec.depthwise:
        wd, _ = _coerce(w)
        out = _gather_scatter(batch.features, w, b, pairs,
                              int(batch.offsets[-1]), True, "submanifold_conv", site_cost)
    elif spec.groups != 1:
        raise ShapeError("sparse conv supports depthwise or ungrouped kernels")
    else:
        out = _gather_scatter(batch.features, w, b, pairs,
                              int(batch.offsets[-1]), False, "submanifold_conv", site_cost)
    return _rewrap(x, batch, out)


def strided_sparse_conv(x: SparseTensor | SparseBatch, w, b, spec: ConvSpec):
    """2x2 stride-2 downsampling conv over a block-uniform active set."""
    if spec.stride != 2 or spec.kernel_h != 2 or spec.kernel_w != 2:
        raise ShapeError("strided_sparse_conv handles 2x2 stride-2 kernels only")
    if spec.groups != 1:
        raise ShapeError("strided sparse conv is ungrouped")
    batch = _geometry(x)
    coarse_maps, children = batch.strided_children()
    n_out = children.shape[0]
    pairs = [(children[:, o], np.arange(n_out, dtype=np.int64)) for o in range(4)]
    site_cost = 4 * spec.in_channels * spec.out_channels
    out_feats = _gather_scatter(batch.features, w, b, pairs, n_out, False,
                                "strided_sparse_conv", site_cost)
    out_batch = SparseBatch(coarse_maps, out_feats)
    if isinstance(x, SparseTensor):
        return SparseTensor(coarse_maps[0], out_feats)
    return out_batch


def sparse_pointwise(x: SparseTensor | SparseBatch, f):
    """Apply a per-site function (linear/LayerNorm/GELU/...) to the feature
    matrix; the coordinate map is untouched."""
    batch = _geometry(x)
    return _rewrap(x, batch, f(batch.features))


# ---------------------------------------------------------------------------
# masked-dense simulation

def apply_mask(x, mask: np.ndarray) -> Tensor:
    """Zero the masked (mask==1) sites of an NHWC (or HWC) tensor."""
    xd, _ = _coerce(x)
    mask = np.asarray(mask)
    vis = (1.0 - mask).astype(xd.dtype)
    if xd.ndim == 4 and vis.ndim == 2:
        vis = vis[None, :, :, None]
    elif xd.ndim == 4 and vis.ndim == 3:
        vis = vis[:, :, :, None]
    elif xd.ndim == 3 and vis.ndim == 2:
        vis = vis[:, :, None]
    else:
        raise ShapeError(f"mask rank {vis.ndim} incompatible with input rank {xd.ndim}")
    from .tensor import mul
    return mul(x, vis)


def coarsen_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Mask at the output resolution of a strided conv (block-uniform input)."""
    if mask.ndim == 2:
        return mask[::stride, ::stride]
    return mask[:, ::stride, ::stride]


def masked_dense_conv(x, mask: np.ndarray, w, b, spec: ConvSpec) -> Tensor:
    """Binary mask applied before and after a dense convolution; the dense
    twin of the sparse path (masked sites cannot influence visible ones, and
    bias never leaks into masked sites)."""
    xd, _ = _coerce(x)
    mask = np.asarray(mask)
    mh = mask.shape[-2:]
    if mh != xd.shape[1:3]:
        raise ShapeError(f"mask extents {mh} != input spatial extents {xd.shape[1:3]}")
    y = nn.conv2d(apply_mask(x, mask), w, b, spec)
    out_mask = coarsen_mask(mask, spec.stride) if spec.stride > 1 else mask
    return apply_mask(y, out_mask)
