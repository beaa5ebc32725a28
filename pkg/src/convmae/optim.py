"""AdamW with decoupled weight decay, cosine-with-warmup schedules and
layer-wise learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Param


class AdamW:
    """Bias-corrected Adam with decoupled weight decay:
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).

    Per-parameter learning-rate multipliers (layer-wise decay) are applied
    on top of the step learning rate. A non-finite gradient aborts the step
    before any parameter is touched.
    """

    def __init__(self, params: list[Param], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0,
                 lr_multipliers: dict[str, float] | None = None):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_multipliers = dict(lr_multipliers or {})
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(
                    f"non-finite gradient for parameter {p.name!r}; step aborted")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr_p = lr * self.lr_multipliers.get(p.name, 1.0)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.value.data -= (lr_p * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers + step counter, for checkpointing."""
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        out["optim.t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.m:
            self.m[name][...] = tensors[f"optim.m.{name}"]
            self.v[name][...] = tensors[f"optim.v.{name}"]
        self.t = int(tensors["optim.t"][0])


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to base_lr * batch_size / 256, then half-cosine to zero."""

    base_lr: float
    batch_size: int
    warmup_epochs: float
    total_epochs: float
    steps_per_epoch: int

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))


def lr_at(step: int, sched: Schedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = sched.peak_lr
    wu = sched.warmup_steps
    if wu > 0 and step < wu:
        return peak * step / wu
    span = max(sched.total_steps - wu, 1)
    progress = min((step - wu) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# layer-wise lr decay

def model_layer_of(name: str, depths: tuple[int, ...]) -> int | None:
    """Layer index of a parameter: stem = 0, each block its own layer (the
    downsample joins the first block of its stage); head = None."""
    if name.startswith("stem."):
        return 0
    if name.startswith("head."):
        return None
    parts = name.split(".")
    s = int(parts[0].removeprefix("stage"))
    base = 1 + sum(depths[:s])
    if parts[1] == "downsample":
        return base
    b = int(parts[1].removeprefix("block"))
    return base + b


def layerwise_lr_decay(model, decay: float, mode: str = "layer_wise") -> dict[str, float]:
    """Per-parameter lr multipliers: head at 1.0, each earlier (layer or
    3-layer group) multiplied by `decay` once more; the stem ends up with
    the smallest multiplier."""
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    if mode not in ("layer_wise", "group_wise"):
        raise ValueError(f"unknown layer-decay mode {mode!r}")
    depths = model.config.depths
    n_layers = 1 + sum(depths)
    out: dict[str, float] = {}
    for name in model.params:
        layer = model_layer_of(name, depths)
        if layer is None:
            out[name] = 1.0
            continue
        if mode == "layer_wise":
            out[name] = decay ** (n_layers - layer)
        else:
            n_groups = math.ceil(n_layers / 3)
            out[name] = decay ** (n_groups - layer // 3)
    return out
