"""Command-line entry point.

Subcommands: pretrain | finetune | evaluate | model-info | equivalence-check
| diagnose-collapse | diagnose-selectivity | bench-sparse | mask-preview
| sweep-mask-ratio. Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import convnext as cx
from . import data as D
from . import diagnostics as diag
from . import fcmae
from . import optim as opt_mod
from . import sparse as sp
from . import tensor as T
from .config import RunConfig
from .grn import GrnConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config file (key = value, [sections])")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--variant", choices=sorted(cx.VARIANTS), default=None)
    p.add_argument("--arch", dest="arch", choices=["v1", "v2"], default=None)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)
    p.add_argument("--decoder-dim", dest="decoder_dim", type=int, default=None)
    p.add_argument("--decoder-depth", dest="decoder_depth", type=int, default=None)
    p.add_argument("--grn-agg", dest="grn_agg", choices=["l2", "l1", "avg"], default=None)
    p.add_argument("--grn-norm", dest="grn_norm",
                   choices=["divisive", "standardize", "inverse-sum"], default=None)
    p.add_argument("--grn-residual", dest="grn_residual", choices=["on", "off"], default=None)
    p.add_argument("--path", choices=["sparse", "masked-dense", "dense"], default=None)
    p.add_argument("--data", default=None, help="synth or cifar10:<dir>")
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p.add_argument("--layer-decay", dest="layer_decay", type=float, default=None)
    p.add_argument("--layer-decay-mode", dest="layer_decay_mode",
                   choices=["layer", "group"], default=None)
    p.add_argument("--init", default=None, help="checkpoint to initialize from")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n-images", dest="n_images", type=int, default=None)


_CONFIG_KEYS = ("seed", "out", "variant", "arch", "mask_ratio", "decoder_dim",
                "decoder_depth", "grn_agg", "grn_norm", "grn_residual", "path",
                "data", "image_size", "steps", "epochs", "batch_size", "base_lr",
                "layer_decay", "layer_decay_mode", "init", "trials", "n_images")


def _resolve(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    return RunConfig.load(args.config, overrides)


def _grn_config(cfg: RunConfig) -> GrnConfig:
    return GrnConfig(aggregation=cfg.grn_agg,
                     normalization=cfg.grn_norm.replace("-", "_"),
                     residual=cfg.grn_residual == "on")


def _model_config(cfg: RunConfig, num_classes: int) -> cx.ModelConfig:
    return cx.ModelConfig.from_name(cfg.variant, num_classes=num_classes,
                                    variant=cfg.arch, drop_path_rate=cfg.drop_path,
                                    grn=_grn_config(cfg))


def _load_data(cfg: RunConfig, split: str = "train") -> D.Dataset:
    if cfg.data == "synth":
        seed = cfg.seed if split == "train" else cfg.seed + 9999
        return D.synth_dataset(seed, cfg.n_images, cfg.image_size)
    if cfg.data.startswith("cifar10:"):
        ds = D.load_cifar10(cfg.data.split(":", 1)[1], split=split)
        if cfg.image_size != 32:
            ds = D.upsample_images(ds, cfg.image_size)
        mean, std = D.compute_channel_stats(ds.images)
        return D.Dataset(D.standardize(ds.images, mean, std), ds.labels, ds.class_names)
    raise ValueError(f"unknown data source {cfg.data!r}")


class MetricsLog:
    """Append-only CSV: step, lr, loss, wall_ms."""

    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path)
        self.f = open(path, "a")
        if new:
            self.f.write("step,lr,loss,wall_ms\n")

    def write(self, step, lr, loss, wall_ms):
        self.f.write(f"{step},{lr:.8g},{loss:.8g},{wall_ms:.3f}\n")
        self.f.flush()

    def close(self):
        self.f.close()


# ---------------------------------------------------------------------------
# commands

def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    if cfg.path == "dense":
        raise ValueError("pretraining needs a masked path: sparse or masked-dense")
    ds = _load_data(cfg)
    n_classes = max(len(np.unique(ds.labels)), 2)
    mcfg = _model_config(cfg, n_classes)
    model = cx.build_model(mcfg, seed=cfg.seed)
    decoder = fcmae.Decoder(mcfg.channels[3],
                            fcmae.DecoderConfig(dim=cfg.decoder_dim, depth=cfg.decoder_depth),
                            seed=cfg.seed)
    params = [p for _, p in model.named_params()] + [p for _, p in decoder.named_params()]
    optimizer = opt_mod.AdamW(params, betas=(0.9, 0.95), weight_decay=cfg.weight_decay)
    steps = cfg.steps if cfg.steps else cfg.epochs * max(len(ds.labels) // cfg.batch_size, 1)
    sched = opt_mod.Schedule(cfg.base_lr, cfg.batch_size,
                             warmup_epochs=cfg.warmup_frac * steps,
                             total_epochs=steps, steps_per_epoch=1)
    grid = (cfg.image_size // 32, cfg.image_size // 32)
    spec = fcmae.MaskSpec(ratio=cfg.mask_ratio, grid=grid, seed=cfg.seed)
    rng_mask = np.random.default_rng(cfg.seed + 1)
    rng_data = np.random.default_rng(cfg.seed + 2)
    log = MetricsLog(os.path.join(cfg.out, "metrics.csv"))
    model.train()
    for step in range(steps):
        idx = rng_data.integers(0, len(ds.labels), size=cfg.batch_size)
        t0 = time.perf_counter()
        lr = opt_mod.lr_at(step, sched)
        optimizer.lr = lr
        loss = fcmae.pretrain_step(model, decoder, ds.images[idx], spec,
                                   optimizer, rng_mask, path=cfg.path)
        log.write(step, lr, loss, (time.perf_counter() - t0) * 1e3)
    log.close()
    ckpt.save_checkpoint(os.path.join(cfg.out, "final.ckpt"),
                         ckpt.model_tensors(model, optimizer, decoder),
                         step=steps, config=cfg.as_flat_dict())
    print(f"pretrained {steps} steps; checkpoint at {cfg.out}/final.ckpt")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    train = _load_data(cfg, "train")
    val = _load_data(cfg, "test")
    n_classes = max(len(np.unique(train.labels)), 2)
    mcfg = _model_config(cfg, n_classes)
    model = cx.build_model(mcfg, seed=cfg.seed)
    if cfg.init:
        tensors, _, _ = ckpt.load_checkpoint(cfg.init)
        loaded = ckpt.init_encoder_from_pretrained(model, tensors)
        print(f"initialized {len(loaded)} encoder tensors from {cfg.init}")
    mults = opt_mod.layerwise_lr_decay(
        model, cfg.layer_decay,
        "layer_wise" if cfg.layer_decay_mode == "layer" else "group_wise")
    params = [p for _, p in model.named_params()]
    optimizer = opt_mod.AdamW(params, betas=(0.9, 0.999),
                              weight_decay=cfg.weight_decay, lr_multipliers=mults)
    steps_per_epoch = max(len(train.labels) // cfg.batch_size, 1)
    epochs = cfg.epochs if cfg.epochs else max(cfg.steps // steps_per_epoch, 1)
    sched = opt_mod.Schedule(cfg.base_lr, cfg.batch_size, warmup_epochs=0,
                             total_epochs=epochs, steps_per_epoch=steps_per_epoch)
    rng_data = np.random.default_rng(cfg.seed + 2)
    log = MetricsLog(os.path.join(cfg.out, "metrics.csv"))
    model.train()
    step = 0
    for _ in range(epochs):
        for xb, yb in D.iterate_batches(train, cfg.batch_size, rng_data):
            t0 = time.perf_counter()
            lr = opt_mod.lr_at(step, sched)
            loss = finetune_step(model, (xb, yb), optimizer, lr)
            log.write(step, lr, loss, (time.perf_counter() - t0) * 1e3)
            step += 1
    log.close()
    acc = evaluate_accuracy(model, val)
    ckpt.save_checkpoint(os.path.join(cfg.out, "final.ckpt"),
                         ckpt.model_tensors(model, optimizer),
                         step=step, config=cfg.as_flat_dict())
    print(f"finetuned {step} steps; val accuracy {acc:.4f}")
    return 0


def finetune_step(model, batch, optimizer, lr: float | None = None) -> float:
    """Cross-entropy step with the optimizer's layer-decayed multipliers."""
    from . import nn
    xb, yb = batch
    logits = cx.classify(model, xb)
    loss = nn.cross_entropy(logits, yb)
    T.backward(loss)
    optimizer.step(lr)
    optimizer.zero_grad()
    return float(loss.item())


def evaluate_accuracy(model, ds: D.Dataset, batch: int = 64) -> float:
    was = model.mode
    model.eval()
    correct = 0
    try:
        for s in range(0, len(ds.labels), batch):
            with T.no_grad():
                logits = cx.classify(model, ds.images[s:s + batch])
            correct += int((logits.data.argmax(axis=1) == ds.labels[s:s + batch]).sum())
    finally:
        model.mode = was
    return correct / len(ds.labels)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    ds = _load_data(cfg, "test")
    n_classes = max(len(np.unique(ds.labels)), 2)
    model = cx.build_model(_model_config(cfg, n_classes), seed=cfg.seed)
    if cfg.init:
        tensors, _, _ = ckpt.load_checkpoint(cfg.init)
        ckpt.load_model_tensors(model, tensors, strict=False)
    acc = evaluate_accuracy(model, ds)
    print(f"accuracy {acc:.4f} on {len(ds.labels)} samples")
    return 0


def cmd_model_info(args) -> int:
    cfg = _resolve(args)
    mcfg = _model_config(cfg, cfg.num_classes)
    model = cx.build_model(mcfg, seed=cfg.seed)
    hw = cfg.image_size if cfg.image_size else 224
    info = cx.model_info(model, hw)
    print(f"{'layer':44s} {'shape':20s} {'params':>12s}")
    for rec in info["layers"]:
        print(f"{rec['name']:44s} {str(tuple(rec['shape'])):20s} {rec['params']:>12,d}")
    print(f"{'FLOP layer':44s} {'':20s} {'MACs':>12s}")
    for rec in info["flops_by_layer"]:
        print(f"{rec['name']:44s} {'':20s} {rec['flops']:>12,d}")
    print(f"total params {info['total_params']:,d} "
          f"({info['total_params'] / 1e6:.2f}M); "
          f"flops @{hw}^2 {info['total_flops'] / 1e9:.3f}G")
    return 0


def cmd_equivalence_check(args) -> int:
    cfg = _resolve(args)
    mcfg = _model_config(cfg, 10)
    worst = 0.0
    rng = np.random.default_rng(cfg.seed)
    hw = cfg.image_size if cfg.image_size else 64
    for trial in range(cfg.trials):
        model = cx.build_model(mcfg, seed=cfg.seed + trial).eval()
        x = rng.standard_normal((1, hw, hw, 3)).astype(np.float32)
        spec = fcmae.MaskSpec(ratio=cfg.mask_ratio, grid=(hw // 32, hw // 32),
                              seed=cfg.seed + trial)
        pyr = fcmae.MaskPyramid.from_coarse(fcmae.generate_mask(spec, rng))
        levels = fcmae.stack_pyramids([pyr])
        with T.no_grad():
            sb = cx.forward_sparse(model, x, levels)
            dense_from_sparse = sp.sparse_to_dense(sb).data
            _, md = cx.forward_dense(model, x, pyramid_levels=levels)
        worst = max(worst, float(np.abs(dense_from_sparse - md.data).max()))
    print(f"max abs diff over {cfg.trials} trials: {worst:.3e}")
    return 0 if worst <= 1e-5 else 2


def cmd_diagnose_collapse(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    ds = _load_data(cfg)
    model = cx.build_model(_model_config(cfg, 10), seed=cfg.seed)
    if cfg.init:
        tensors, _, _ = ckpt.load_checkpoint(cfg.init)
        ckpt.load_model_tensors(model, tensors, strict=False)
    rows = diag.collapse_profile(model, ds.images[:min(len(ds.labels), 100)])
    path = os.path.join(cfg.out, "collapse_profile.csv")
    diag.write_profile_csv(path, rows)
    print(f"wrote {len(rows)} layers to {path}")
    return 0


def cmd_diagnose_selectivity(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    ds = _load_data(cfg)
    model = cx.build_model(_model_config(cfg, 10), seed=cfg.seed)
    if cfg.init:
        tensors, _, _ = ckpt.load_checkpoint(cfg.init)
        ckpt.load_model_tensors(model, tensors, strict=False)
    names, acts = diag.unit_activities(model, ds.images)
    idx = diag.class_selectivity(acts, ds.labels)
    path = os.path.join(cfg.out, "selectivity.csv")
    diag.write_selectivity_csv(path, names, idx)
    print(f"wrote {len(names)} units to {path}")
    return 0


def cmd_bench_sparse(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    model = cx.build_model(_model_config(cfg, 10), seed=cfg.seed)
    hw = cfg.image_size if cfg.image_size else 128
    rep = diag.efficiency_benchmark(model, cfg.mask_ratio, trials=max(cfg.trials, 3),
                                    image_hw=hw, seed=cfg.seed)
    print(f"config={rep.config} ratio={rep.mask_ratio}")
    print(f"sparse_macs={rep.sparse_macs} dense_macs={rep.dense_macs} "
          f"(ratio {rep.sparse_macs / max(rep.dense_macs, 1):.4f})")
    print(f"sparse_ms={rep.sparse_ms:.2f} masked_dense_ms={rep.masked_dense_ms:.2f}")
    print(f"peak_bytes_sparse={rep.peak_bytes_sparse} "
          f"peak_bytes_masked_dense={rep.peak_bytes_masked_dense}")
    path = os.path.join(cfg.out, "bench.csv")
    with open(path, "w") as f:
        w = csv.writer(f)
        w.writerow(["layer", "sparse_macs", "dense_macs"])
        for layer in sorted(rep.dense_by_layer):
            w.writerow([layer, rep.sparse_by_layer.get(layer, 0), rep.dense_by_layer[layer]])
    print(f"per-layer MACs at {path}")
    return 0


def cmd_mask_preview(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    grid = (cfg.image_size // 32, cfg.image_size // 32)
    spec = fcmae.MaskSpec(ratio=cfg.mask_ratio, grid=grid, seed=cfg.seed)
    pyr = fcmae.MaskPyramid.from_coarse(fcmae.generate_mask(spec))
    paths = fcmae.export_mask_pyramid_pgm(pyr, cfg.out)
    print("wrote " + ", ".join(paths))
    return 0


def cmd_sweep_mask_ratio(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.snapshot()
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = diag.masking_ratio_sweep(ratios, cfg.steps, cfg.seed,
                                    image_size=cfg.image_size, variant=cfg.variant,
                                    batch_size=cfg.batch_size, n_images=cfg.n_images)
    path = os.path.join(cfg.out, "mask_ratio_sweep.csv")
    diag.write_sweep_csv(path, rows)
    for r in rows:
        print(f"ratio {r['ratio']:.2f}: final_loss {r['final_loss']:.4f} "
              f"probe_acc {r['probe_accuracy']:.4f}")
    print(f"wrote {path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="convmae", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    commands = {
        "pretrain": cmd_pretrain,
        "finetune": cmd_finetune,
        "evaluate": cmd_evaluate,
        "model-info": cmd_model_info,
        "equivalence-check": cmd_equivalence_check,
        "diagnose-collapse": cmd_diagnose_collapse,
        "diagnose-selectivity": cmd_diagnose_selectivity,
        "bench-sparse": cmd_bench_sparse,
        "mask-preview": cmd_mask_preview,
        "sweep-mask-ratio": cmd_sweep_mask_ratio,
    }
    for name, fn in commands.items():
        p = subs.add_parser(name, help=fn.__doc__)
        _add_common(p)
        if name == "sweep-mask-ratio":
            p.add_argument("--ratios", default="0.3,0.6,0.9",
                           help="comma-separated mask ratios")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
