"""Run configuration: key = value files with [section] headers, merged with
CLI flag overrides; every run writes a resolved snapshot to its output dir."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

# field name -> (section, type). Every CLI flag has a twin here.
_SCHEMA = {
    "seed": ("run", int),
    "out": ("run", str),
    "path": ("run", str),
    "variant": ("model", str),
    "arch": ("model", str),
    "image_size": ("model", int),
    "num_classes": ("model", int),
    "drop_path": ("model", float),
    "grn_agg": ("grn", str),
    "grn_norm": ("grn", str),
    "grn_residual": ("grn", str),
    "mask_ratio": ("mask", float),
    "decoder_dim": ("decoder", int),
    "decoder_depth": ("decoder", int),
    "data": ("data", str),
    "steps": ("train", int),
    "epochs": ("train", int),
    "batch_size": ("train", int),
    "base_lr": ("train", float),
    "weight_decay": ("train", float),
    "warmup_frac": ("train", float),
    "layer_decay": ("train", float),
    "layer_decay_mode": ("train", str),
    "init": ("train", str),
    "trials": ("run", int),
    "n_images": ("data", int),
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    path: str = "sparse"            # sparse | masked-dense | dense
    variant: str = "atto"
    arch: str = "v2"
    image_size: int = 128
    num_classes: int = 10
    drop_path: float = 0.0
    grn_agg: str = "l2"
    grn_norm: str = "divisive"
    grn_residual: str = "on"
    mask_ratio: float = 0.6
    decoder_dim: int = 512
    decoder_depth: int = 1
    data: str = "synth"             # synth | cifar10:<dir>
    steps: int = 500
    epochs: int = 0
    batch_size: int = 16
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    layer_decay: float = 0.9
    layer_decay_mode: str = "layer"  # layer | group
    init: str = ""                  # checkpoint to initialize from
    trials: int = 20
    n_images: int = 64

    @classmethod
    def load(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        """Defaults <- config file <- explicit CLI overrides."""
        cfg = cls()
        if config_path:
            parser = configparser.ConfigParser()
            read = parser.read(config_path)
            if not read:
                raise FileNotFoundError(f"config file {config_path} not found")
            for f in fields(cls):
                section, typ = _SCHEMA[f.name]
                if parser.has_option(section, f.name):
                    setattr(cfg, f.name, typ(parser.get(section, f.name)))
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _SCHEMA:
                raise KeyError(f"unknown config key {key!r}")
            setattr(cfg, key, _SCHEMA[key][1](val))
        return cfg

    def snapshot(self, out_dir: str | None = None) -> str:
        """Write the resolved configuration; the file reproduces the run."""
        out_dir = out_dir or self.out
        os.makedirs(out_dir, exist_ok=True)
        parser = configparser.ConfigParser()
        for f in fields(self):
            section, _ = _SCHEMA[f.name]
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, f.name, str(getattr(self, f.name)))
        path = os.path.join(out_dir, "config.ini")
        with open(path, "w") as fh:
            parser.write(fh)
        return path

    def as_flat_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}
