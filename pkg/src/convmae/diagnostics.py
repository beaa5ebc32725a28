"""Feature diagnostics: channel cosine-distance collapse profiles,
activation-grid images, class selectivity indices, the sparse-encoding
efficiency benchmark and the masking-ratio sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import convnext as cx
from . import fcmae
from . import macs as _macs
from . import tensor as T
from .convnext import ActivationCapture, Model
from .pgm import write_pgm


def cosine_distance(x: np.ndarray) -> float:
    """Average pairwise channel cosine distance of an H x W x C map:
    (1/C^2) sum_ij (1 - cos(X_i, X_j)) / 2.

    Channels are flattened to HW-vectors. Diagonal pairs contribute 0; a
    pair involving a zero channel uses cos := 0 (contribution 0.5).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected H x W x C, got {x.shape}")
    c = x.shape[-1]
    flat = x.reshape(-1, c).T                     # (C, HW)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = flat / safe[:, None]
    cos = unit @ unit.T
    zero = norms == 0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    np.fill_diagonal(cos, 1.0)
    dist = (1.0 - cos) / 2.0
    return float(dist.sum() / (c * c))


def collapse_profile(model: Model, images: np.ndarray,
                     hook: str = "mlp") -> list[tuple[str, float, float]]:
    """Rows (layer_name, normalized_layer_index, mean_distance), averaged
    over the sample images; hook is "mlp" (expansion output) or "block"
    (post-residual)."""
    if hook not in ("mlp", "block"):
        raise ValueError(f"hook must be 'mlp' or 'block', got {hook!r}")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] < 1:
        raise ValueError("need at least one image")
    was = model.mode
    model.eval()
    sums: dict[str, float] = {}
    order: list[str] = []
    try:
        for i in range(images.shape[0]):
            cap = ActivationCapture(kinds=(hook,))
            with T.no_grad():
                cx.forward_dense(model, images[i:i + 1], capture=cap)
            for name, act in cap.records:
                if name not in sums:
                    sums[name] = 0.0
                    order.append(name)
                sums[name] += cosine_distance(act[0])
    finally:
        model.mode = was
    n_img = images.shape[0]
    n_layers = len(order)
    rows = []
    for li, name in enumerate(order):
        idx = li / (n_layers - 1) if n_layers > 1 else 0.0
        rows.append((name, idx, sums[name] / n_img))
    return rows


def write_profile_csv(path, rows: list[tuple[str, float, float]]) -> None:
    with open(path, "w") as f:
        f.write("layer,normalized_layer_index,mean_distance\n")
        for name, idx, d in rows:
            f.write(f"{name},{idx:.6f},{d:.6f}\n")


# ---------------------------------------------------------------------------
# class selectivity

def class_selectivity(activities: np.ndarray, labels: np.ndarray,
                      eps: float = 1e-8) -> np.ndarray:
    """Per-unit selectivity index in [0, 1].

    `activities` is (n_images, n_units): the rectified (clamped at 0)
    spatial mean of each unit per image. The index contrasts the largest
    class-conditional mean activity with the mean of the remaining ones:
    (mu_max - mu_rest) / (mu_max + mu_rest + eps).
    """
    activities = np.maximum(np.asarray(activities, dtype=np.float64), 0.0)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("class selectivity needs at least two classes present")
    means = np.stack([activities[labels == c].mean(axis=0) for c in classes])
    mu_max = means.max(axis=0)
    mu_rest = (means.sum(axis=0) - mu_max) / (len(classes) - 1)
    return (mu_max - mu_rest) / (mu_max + mu_rest + eps)


def unit_activities(model: Model, images: np.ndarray,
                    batch: int = 16) -> tuple[list[str], np.ndarray]:
    """Rectified spatial-mean activity of every block-output channel.

    Returns (unit names "layer:channel", (n_images, n_units) activities).
    """
    images = np.asarray(images)
    was = model.mode
    model.eval()
    rows = []
    names: list[str] | None = None
    try:
        for s in range(0, images.shape[0], batch):
            cap = ActivationCapture(kinds=("block",))
            with T.no_grad():
                cx.forward_dense(model, images[s:s + batch], capture=cap)
            per_layer = []
            if names is None:
                names = []
                for lname, act in cap.records:
                    names.extend(f"{lname}:{c}" for c in range(act.shape[-1]))
            for lname, act in cap.records:
                per_layer.append(np.maximum(act.mean(axis=(1, 2)), 0.0))
            rows.append(np.concatenate(per_layer, axis=1))
    finally:
        model.mode = was
    return names or [], np.concatenate(rows, axis=0)


def write_selectivity_csv(path, names: list[str], indices: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("unit,selectivity\n")
        for name, v in zip(names, indices):
            f.write(f"{name},{v:.6f}\n")


# ---------------------------------------------------------------------------
# activation grid export

def export_activation_grid(x: np.ndarray, n: int, path) -> None:
    """Tile the first n channels (each min-max normalized) into a
    sqrt(n) x sqrt(n) PGM image."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[0]
    h, w, c = x.shape
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError(f"n must be a perfect square, got {n}")
    if n > c:
        raise ValueError(f"requested {n} channels but tensor has {c}")
    grid = np.zeros((side * h, side * w), dtype=np.uint8)
    for k in range(n):
        ch = x[:, :, k].astype(np.float64)
        lo, hi = ch.min(), ch.max()
        tile = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
        r, cc = divmod(k, side)
        grid[r * h:(r + 1) * h, cc * w:(cc + 1) * w] = np.round(tile * 255).astype(np.uint8)
    write_pgm(path, grid)


# ---------------------------------------------------------------------------
# efficiency benchmark

@dataclass
class EfficiencyReport:
    config: str
    mask_ratio: float
    sparse_macs: int
    dense_macs: int
    sparse_ms: float
    masked_dense_ms: float
    peak_bytes_sparse: int
    peak_bytes_masked_dense: int
    sparse_by_layer: dict[str, int]
    dense_by_layer: dict[str, int]


def efficiency_benchmark(model: Model, mask_ratio: float, trials: int = 3,
                         image_hw: int = 224, batch: int = 1,
                         seed: int = 0) -> EfficiencyReport:
    """Median wall time, exact MAC counts and peak live-buffer bytes for the
    sparse vs masked-dense encoder forward."""
    if trials < 3:
        raise ValueError("need at least 3 trials for a median")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, image_hw, image_hw, 3)).astype(np.float32)
    spec = fcmae.MaskSpec(ratio=mask_ratio, grid=(image_hw // 32, image_hw // 32), seed=seed)
    pyramids = fcmae.batch_masks(batch, spec, np.random.default_rng(seed))
    levels = fcmae.stack_pyramids(pyramids)
    was = model.mode
    model.eval()

    def run(path):
        times = []
        with _macs.count_macs() as counter:
            with T.track_memory() as mem:
                with T.no_grad():
                    for t in range(trials):
                        t0 = time.perf_counter()
                        if path == "sparse":
                            cx.forward_sparse(model, x, levels)
                        else:
                            cx.forward_dense(model, x, pyramid_levels=levels)
                        times.append((time.perf_counter() - t0) * 1e3)
        by_label = counter.by_label()
        per_pass = {k: v // trials for k, v in by_label.items()}
        return float(np.median(times)), counter.total // trials, mem.peak, per_pass

    try:
        sparse_ms, sparse_macs, sparse_peak, sparse_layers = run("sparse")
        dense_ms, dense_macs, dense_peak, dense_layers = run("masked-dense")
    finally:
        model.mode = was
    return EfficiencyReport(
        config=model.config.name, mask_ratio=mask_ratio,
        sparse_macs=sparse_macs, dense_macs=dense_macs,
        sparse_ms=sparse_ms, masked_dense_ms=dense_ms,
        peak_bytes_sparse=sparse_peak, peak_bytes_masked_dense=dense_peak,
        sparse_by_layer=sparse_layers, dense_by_layer=dense_layers)


# ---------------------------------------------------------------------------
# masking-ratio sweep

def masking_ratio_sweep(ratios, steps: int, seed: int, image_size: int = 64,
                        variant: str = "atto", batch_size: int = 8,
                        n_images: int = 64, probe_steps: int = 100) -> list[dict]:
    """Run one identical desk-scale pretrain per ratio; report the final
    reconstruction loss and a linear-probe accuracy on frozen features."""
    from . import data as D
    from . import optim as opt_mod
    from .fcmae import Decoder, DecoderConfig, MaskSpec, pretrain_step
    from . import nn

    rows = []
    for ratio in ratios:
        if not 0.0 < ratio < 1.0:
            raise ValueError(f"mask ratio {ratio} outside (0, 1); the loss is "
                             f"undefined with zero masked patches")
        cfg = cx.ModelConfig.from_name(variant, num_classes=len(D.SYNTH_CLASSES))
        model = cx.build_model(cfg, seed=seed)
        decoder = Decoder(cfg.channels[3], DecoderConfig(dim=128), seed=seed)
        ds = D.synth_dataset(seed, n_images, image_size)
        params = [p for _, p in model.named_params()] + \
                 [p for _, p in decoder.named_params()]
        optimizer = opt_mod.AdamW(params, lr=1.5e-4 * batch_size / 256,
                                  betas=(0.9, 0.95), weight_decay=0.05)
        spec = MaskSpec(ratio=ratio, grid=(image_size // 32, image_size // 32), seed=seed)
        rng_mask = np.random.default_rng(seed + 1)
        rng_data = np.random.default_rng(seed + 2)
        model.train()
        loss = float("nan")
        for step in range(steps):
            idx = rng_data.choice(n_images, size=batch_size, replace=False)
            loss = pretrain_step(model, decoder, ds.images[idx], spec,
                                 optimizer, rng_mask)
        acc = _linear_probe(model, ds, probe_steps, seed)
        rows.append({"ratio": ratio, "final_loss": loss, "probe_accuracy": acc})
    return rows


def _linear_probe(model: Model, ds, steps: int, seed: int) -> float:
    """Multinomial logistic probe on frozen pooled final features."""
    from . import optim as opt_mod
    from . import nn

    was = model.mode
    model.eval()
    try:
        with T.no_grad():
            feats = []
            for s in range(0, len(ds.labels), 16):
                _, t = cx.forward_dense(model, ds.images[s:s + 16])
                feats.append(t.data.mean(axis=(1, 2)))
        feats = np.concatenate(feats).astype(np.float32)
    finally:
        model.mode = was
    k = len(np.unique(ds.labels))
    rng = np.random.default_rng(seed)
    w = T.Param("probe.weight", 0.01 * rng.standard_normal((feats.shape[1], k)).astype(np.float32))
    b = T.Param("probe.bias", np.zeros(k, np.float32))
    optimizer = opt_mod.AdamW([w, b], lr=0.05, betas=(0.9, 0.999))
    for _ in range(steps):
        logits = nn.linear(T.Tensor(feats), w.value, b.value)
        loss = nn.cross_entropy(logits, ds.labels)
        T.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
    with T.no_grad():
        pred = (feats @ w.data + b.data).argmax(axis=1)
    return float((pred == ds.labels).mean())


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write("ratio,final_loss,probe_accuracy\n")
        for r in rows:
            f.write(f"{r['ratio']:.2f},{r['final_loss']:.6f},{r['probe_accuracy']:.4f}\n")
