"""Dense tensors with reverse-mode autodiff over a dynamically recorded tape.

Storage and raw kernels are numpy; the tape, backward pass and gradient
checking live here. Channels-last (NHWC) layout is assumed by the layers
built on top, but nothing in this module cares about layout.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

Axes = int | tuple[int, ...] | None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on tape misuse (double backward, non-scalar loss, ...)."""


# ---------------------------------------------------------------------------
# memory tracking shim (used by the efficiency benchmark)

class MemoryTracker:
    """High-water mark of live Tensor buffers, in bytes."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def _add(self, nbytes: int) -> None:
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def _remove(self, nbytes: int) -> None:
        self.current -= nbytes


_mem_tracker: MemoryTracker | None = None


class track_memory:
    """Context manager enabling the allocator shim; exposes .tracker."""

    def __enter__(self) -> MemoryTracker:
        global _mem_tracker
        self.tracker = MemoryTracker()
        _mem_tracker = self.tracker
        return self.tracker

    def __exit__(self, *exc):
        global _mem_tracker
        _mem_tracker = None
        return False


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("parents", "backward_fn", "tensor")

    def __init__(self, parents, backward_fn, tensor=None):
        self.parents = parents          # node ids of differentiable inputs
        self.backward_fn = backward_fn  # grad_out -> per-parent grads; None for leaves
        self.tensor = tensor            # leaf Tensor (grad accumulation target)


class Tape:
    """Ordered record of operations; topological by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


_grad_enabled = True
_current_tape: Tape | None = None


def _ensure_tape() -> Tape:
    global _current_tape
    if _current_tape is None or _current_tape.consumed:
        _current_tape = Tape()
    return _current_tape


def current_tape() -> Tape | None:
    return _current_tape


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "__weakref__")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPES[dtype] if dtype else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None
        if _mem_tracker is not None:
            _mem_tracker._add(arr.nbytes)
            weakref.finalize(self, _mem_tracker._remove, arr.nbytes)

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- tape participation ---------------------------------------------------
    def _leaf_id(self, tape: Tape) -> int:
        """Node id of this tensor on `tape`, registering a leaf if needed."""
        if self._tape is tape and self._node is not None:
            return self._node
        nid = tape._append(_Node((), None, tensor=self))
        self._tape = tape
        self._node = nid
        return nid

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return power(self, p)

    def sum(self, axes: Axes = None, keepdims: bool = False): return reduce("sum", self, axes, keepdims)
    def mean(self, axes: Axes = None, keepdims: bool = False): return reduce("mean", self, axes, keepdims)
    def reshape(self, *shape): return reshape(self, shape if len(shape) != 1 else shape[0])
    def transpose(self, axes): return transpose(self, axes)


class Param:
    """Named trainable tensor. Gradient buffer is allocated eagerly so an
    untouched parameter reports an all-zero gradient."""

    def __init__(self, name: str, value: Tensor | np.ndarray, dtype: str | None = None):
        if not isinstance(value, Tensor):
            value = Tensor(value, dtype=dtype)
        value.requires_grad = True
        value.zero_grad()
        self.name = name
        self.value = value

    @property
    def grad(self) -> np.ndarray:
        assert self.value.grad is not None
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# recording helper (shared by every primitive, including those defined in
# other modules such as the sparse convolution kernels)

def record_op(out_data: np.ndarray, inputs: Sequence[Tensor | None],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap `out_data` in a Tensor, recording a tape node if any input
    participates in differentiation.

    `backward_fn(grad_out)` must return one gradient (or None) per entry of
    `inputs`; entries that are None or non-differentiable are skipped.
    """
    out = Tensor(out_data)
    if not _grad_enabled:
        return out
    live = [t for t in inputs if isinstance(t, Tensor) and t.requires_grad]
    if not live:
        return out
    tape = _ensure_tape()
    pids = tuple(
        t._leaf_id(tape) if (isinstance(t, Tensor) and t.requires_grad) else -1
        for t in inputs
    )
    out.requires_grad = True
    out._tape = tape
    out._node = tape._append(_Node(pids, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into leaf .grad.

    The tape is consumed: a second backward on the same tape raises.
    """
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not connected to any recorded operation")
    if tape.consumed:
        raise TapeError("backward already invoked on this tape")
    tape.consumed = True
    global _current_tape
    if _current_tape is tape:
        _current_tape = None

    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for nid in range(loss._node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            t = node.tensor
            if t is not None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
        else:
            for pid, pg in zip(node.parents, node.backward_fn(g)):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        node.parents = ()
        node.backward_fn = None  # free saved activations as we go
    tape.nodes = []


# ---------------------------------------------------------------------------
# broadcasting helpers

def _coerce(x, like: np.ndarray | None = None):
    """Return (ndarray, Tensor-or-None) for a Tensor / array / scalar operand."""
    if isinstance(x, Tensor):
        return x.data, x
    dt = like.dtype if like is not None else np.float32
    return np.asarray(x, dtype=dt), None


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b, like=ad)
    _check_broadcast(ad, bd)
    return record_op(ad + bd, [at, bt], lambda g: (
        unbroadcast(g, ad.shape), unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b, like=ad)
    _check_broadcast(ad, bd)
    return record_op(ad - bd, [at, bt], lambda g: (
        unbroadcast(g, ad.shape), unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b, like=ad)
    _check_broadcast(ad, bd)
    return record_op(ad * bd, [at, bt], lambda g: (
        unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b, like=ad)
    _check_broadcast(ad, bd)
    out = ad / bd
    return record_op(out, [at, bt], lambda g: (
        unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def scalar_mul(s: float, a: Tensor) -> Tensor:
    return mul(a, float(s))


def neg(a) -> Tensor:
    ad, at = _coerce(a)
    return record_op(-ad, [at], lambda g: (-g,))


def power(a, p: float) -> Tensor:
    ad, at = _coerce(a)
    p = float(p)
    return record_op(ad ** p, [at], lambda g: (g * p * ad ** (p - 1.0),))


def square(a) -> Tensor:
    ad, at = _coerce(a)
    return record_op(ad * ad, [at], lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    ad, at = _coerce(a)
    out = np.sqrt(ad)
    return record_op(out, [at], lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    ad, at = _coerce(a)
    out = np.exp(ad)
    return record_op(out, [at], lambda g: (g * out,))


def log(a) -> Tensor:
    ad, at = _coerce(a)
    return record_op(np.log(ad), [at], lambda g: (g / ad,))


def absolute(a) -> Tensor:
    ad, at = _coerce(a)
    return record_op(np.abs(ad), [at], lambda g: (g * np.sign(ad),))


def maximum_scalar(a, s: float) -> Tensor:
    """max(a, s) with subgradient 1 where a >= s."""
    ad, at = _coerce(a)
    s = float(s)
    return record_op(np.maximum(ad, s), [at], lambda g: (g * (ad >= s),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "scalar_mul": None}


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch-by-name front end: op in {add, mul, sub, div, scalar_mul}."""
    if op == "scalar_mul":
        return scalar_mul(a if not isinstance(a, Tensor) else b, b if not isinstance(a, Tensor) else a)
    if op not in _ELEMENTWISE or _ELEMENTWISE[op] is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _ELEMENTWISE[op](a, b)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes: Axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        a = ax + ndim if ax < 0 else ax
        if not (0 <= a < ndim):
            raise ShapeError(f"axis {ax} invalid for rank-{ndim} tensor")
        out.append(a)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def _restore_dims(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    return np.expand_dims(g, axes)


def reduce(op: str, x, axes: Axes = None, keepdims: bool = False) -> Tensor:
    """Reduction by name: sum | mean | l2_norm | l1_norm | max."""
    xd, xt = _coerce(x)
    ax = _norm_axes(axes, xd.ndim)
    count = int(np.prod([xd.shape[a] for a in ax])) if ax else 1

    if op == "sum":
        out = xd.sum(axis=ax, keepdims=keepdims)
        return record_op(out, [xt], lambda g: (
            np.broadcast_to(_restore_dims(g, ax, keepdims), xd.shape).copy(),))
    if op == "mean":
        out = xd.mean(axis=ax, keepdims=keepdims)
        return record_op(out, [xt], lambda g: (
            np.broadcast_to(_restore_dims(g, ax, keepdims) / count, xd.shape).copy(),))
    if op == "max":
        out = xd.max(axis=ax, keepdims=keepdims)
        full = xd.max(axis=ax, keepdims=True)

        def bwd_max(g):
            mask = (xd == full)
            nmax = mask.sum(axis=ax, keepdims=True)
            return ((_restore_dims(g, ax, keepdims) * mask) / nmax,)
        return record_op(out, [xt], bwd_max)
    if op == "l2_norm":
        out = np.sqrt((xd * xd).sum(axis=ax, keepdims=keepdims))
        safe = np.sqrt((xd * xd).sum(axis=ax, keepdims=True))

        def bwd_l2(g):
            return (_restore_dims(g, ax, keepdims) * xd / np.maximum(safe, 1e-30),)
        return record_op(out, [xt], bwd_l2)
    if op == "l1_norm":
        out = np.abs(xd).sum(axis=ax, keepdims=keepdims)
        return record_op(out, [xt], lambda g: (
            _restore_dims(g, ax, keepdims) * np.sign(xd),))
    raise ValueError(f"unknown reduction {op!r}")


def l2_norm(x, axes: Axes = None, keepdims: bool = False) -> Tensor:
    return reduce("l2_norm", x, axes, keepdims)


def l1_norm(x, axes: Axes = None, keepdims: bool = False) -> Tensor:
    return reduce("l1_norm", x, axes, keepdims)


# ---------------------------------------------------------------------------
# shape / indexing primitives

def reshape(x, shape) -> Tensor:
    xd, xt = _coerce(x)
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    return record_op(xd.reshape(shape), [xt], lambda g: (g.reshape(xd.shape),))


def transpose(x, axes) -> Tensor:
    xd, xt = _coerce(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(xd.transpose(axes), [xt], lambda g: (g.transpose(inv),))


def matmul(a, b) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b, like=ad)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {ad.shape} and {bd.shape} do not align")
    return record_op(ad @ bd, [at, bt], lambda g: (g @ bd.T, ad.T @ g))


def take_rows(x, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; scatter-add on the way back."""
    xd, xt = _coerce(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(xd)
        np.add.at(out, idx, g)
        return (out,)
    return record_op(xd[idx], [xt], bwd)


def segment_sum(x, offsets: np.ndarray) -> Tensor:
    """Sum rows of x within segments [offsets[i], offsets[i+1])."""
    xd, xt = _coerce(x)
    offsets = np.asarray(offsets, dtype=np.int64)
    nseg = len(offsets) - 1
    out = np.zeros((nseg,) + xd.shape[1:], dtype=xd.dtype)
    for i in range(nseg):
        seg = xd[offsets[i]:offsets[i + 1]]
        if seg.size:
            out[i] = seg.sum(axis=0)
    counts = np.diff(offsets)
    return record_op(out, [xt], lambda g: (np.repeat(g, counts, axis=0),))


def segment_l2(x, offsets: np.ndarray) -> Tensor:
    """Per-segment, per-column L2 norm with a guarded gradient at zero."""
    xd, xt = _coerce(x)
    offsets = np.asarray(offsets, dtype=np.int64)
    nseg = len(offsets) - 1
    sq = np.zeros((nseg,) + xd.shape[1:], dtype=xd.dtype)
    for i in range(nseg):
        seg = xd[offsets[i]:offsets[i + 1]]
        if seg.size:
            sq[i] = (seg * seg).sum(axis=0)
    out = np.sqrt(sq)
    counts = np.diff(offsets)

    def bwd(g):
        scale = g / np.maximum(out, 1e-30)
        return (np.repeat(scale, counts, axis=0) * xd,)
    return record_op(out, [xt], bwd)


def repeat_rows(x, counts: np.ndarray) -> Tensor:
    """Repeat row i of x counts[i] times (inverse of segment_sum)."""
    xd, xt = _coerce(x)
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    def bwd(g):
        out = np.zeros_like(xd)
        for i in range(len(counts)):
            seg = g[offsets[i]:offsets[i + 1]]
            if seg.size:
                out[i] = seg.sum(axis=0)
        return (out,)
    return record_op(np.repeat(xd, counts, axis=0), [xt], bwd)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must produce a scalar Tensor from the given tensors. Relative error
    per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.requires_grad = True
        t.grad = None
        t._tape = None
        t._node = None

    loss = f(*xs)
    if loss.size != 1:
        raise TapeError("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

    worst = 0.0
    with no_grad():
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(
                        f"non-finite value while perturbing tensor {ti} coordinate {i}")
                num[i] = (fp - fm) / (2 * eps)
            a = analytic[ti].reshape(-1)
            rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
            worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def rel_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Tensor-level relative disagreement: ||a-b||_inf / max(||a||_inf, ||b||_inf, 1e-8)."""
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0, 1e-8)
    return num / den


def zeros(shape, dtype: str = "f32") -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPES[dtype]))


def ones(shape, dtype: str = "f32") -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPES[dtype]))
