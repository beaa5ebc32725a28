"""Checkpoints: a plain-text manifest followed by raw little-endian tensors.

Layout (documented byte-exactly; see README):

    line 1            CONVMAE-CKPT 1
    line 2            step=<int>
    config lines      config.<key>=<value>            (config echo, sorted)
    tensor lines      tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
    terminator        @payload\n
    payload           concatenated little-endian buffers at the stated offsets

dtype is one of f4/f8 (little-endian float32/float64). Offsets are relative
to the first payload byte. Round trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

MAGIC = "CONVMAE-CKPT 1"
_DT = {"f4": "<f4", "f8": "<f8"}


def save_checkpoint(path, tensors: dict[str, np.ndarray], step: int = 0,
                    config: dict[str, str] | None = None) -> None:
    lines = [MAGIC, f"step={int(step)}"]
    for k in sorted((config or {})):
        v = str((config or {})[k])
        if "\n" in v:
            raise ValueError(f"config value for {k!r} contains a newline")
        lines.append(f"config.{k}={v}")
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "f8" if arr.dtype == np.float64 else "f4"
        buf = arr.astype(_DT[code]).tobytes()
        shape = ",".join(map(str, arr.shape)) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {code} {shape} {len(payload)} {len(buf)}")
        payload.extend(buf)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n@payload\n").encode())
        f.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    head, _, payload = blob.partition(b"\n@payload\n")
    lines = head.decode().split("\n")
    if lines[0] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {lines[0]!r}")
    step = int(lines[1].removeprefix("step="))
    config: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in lines[2:]:
        if line.startswith("config."):
            k, _, v = line.removeprefix("config.").partition("=")
            config[k] = v
        elif line.startswith("tensor "):
            _, name, code, shape_s, off_s, nb_s = line.split(" ")
            off, nb = int(off_s), int(nb_s)
            arr = np.frombuffer(payload[off:off + nb], dtype=_DT[code]).copy()
            if shape_s != "scalar":
                shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
                arr = arr.reshape(shape)
            else:
                arr = arr.reshape(())
            tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, step, config


# ---------------------------------------------------------------------------
# model-level helpers

def model_tensors(model, optimizer=None, decoder=None) -> dict[str, np.ndarray]:
    out = {f"model.{name}": p.data for name, p in model.named_params()}
    if decoder is not None:
        out.update({f"decoder.{name}": p.data for name, p in decoder.named_params()})
    if optimizer is not None:
        out.update(optimizer.state_tensors())
    return out


def load_model_tensors(model, tensors: dict[str, np.ndarray],
                       strict: bool = True) -> list[str]:
    """Copy `model.*` entries into the model; returns loaded names."""
    loaded = []
    for name, p in model.named_params():
        key = f"model.{name}"
        if key in tensors:
            if tensors[key].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{tensors[key].shape} vs {p.shape}")
            p.value.data[...] = tensors[key]
            loaded.append(name)
        elif strict:
            raise KeyError(f"checkpoint is missing parameter {name}")
    return loaded


def init_encoder_from_pretrained(model, tensors: dict[str, np.ndarray]) -> list[str]:
    """Fine-tuning initialization: copy every encoder weight that exists in
    the pre-trained checkpoint (the sparse layers' weights are their dense
    twins, so no conversion is needed); the head stays freshly initialized."""
    loaded = []
    for name, p in model.named_params():
        key = f"model.{name}"
        if name.startswith("head."):
            continue
        if key in tensors and tensors[key].shape == p.shape:
            p.value.data[...] = tensors[key].astype(p.data.dtype)
            loaded.append(name)
    return loaded
