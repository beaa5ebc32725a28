"""Dataset ingestion: CIFAR-10 binary batches, a procedural synthetic shape
dataset, bilinear resizing and the random-resized-crop augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes (planar RGB)


@dataclass
class Dataset:
    images: np.ndarray   # (N, H, W, 3) float32
    labels: np.ndarray   # (N,) int64
    class_names: tuple[str, ...] = ()


def read_cifar10_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of the {RECORD_BYTES}-byte "
            f"record (truncated file?)")
    recs = raw.reshape(-1, RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range [0, 9]")
    pix = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pix.astype(np.float32) / 255.0, labels


def write_cifar10_file(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of read_cifar10_file, for round-trip tests and synthetic sets."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    n = images.shape[0]
    recs = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    recs[:, 0] = np.asarray(labels, dtype=np.uint8)
    recs[:, 1:] = images.transpose(0, 3, 1, 2).reshape(n, -1)
    recs.tofile(path)


def load_cifar10(path: str, split: str = "train") -> Dataset:
    """Load the published binary layout: data_batch_{1..5}.bin / test_batch.bin."""
    if split == "train":
        files = [os.path.join(path, f"data_batch_{i}.bin") for i in range(1, 6)]
    elif split == "test":
        files = [os.path.join(path, "test_batch.bin")]
    else:
        raise ValueError(f"unknown split {split!r}")
    files = [f for f in files if os.path.exists(f)]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 binary files under {path}")
    imgs, labs = zip(*(read_cifar10_file(f) for f in files))
    return Dataset(np.concatenate(imgs), np.concatenate(labs),
                   ("airplane", "automobile", "bird", "cat", "deer",
                    "dog", "frog", "horse", "ship", "truck"))


def compute_channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def standardize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images - mean) / std).astype(np.float32)


def bilinear_resize(images: np.ndarray, size: int) -> np.ndarray:
    """Batch bilinear resize to size x size (half-pixel-center convention)."""
    images = np.asarray(images, dtype=np.float32)
    squeeze = images.ndim == 3
    if squeeze:
        images = images[None]
    n, h, w, c = images.shape
    if (h, w) == (size, size):
        out = images.copy()
        return out[0] if squeeze else out
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[None, :, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, None, :, None]
    top = images[:, y0][:, :, x0] * (1 - wx) + images[:, y0][:, :, x1] * wx
    bot = images[:, y1][:, :, x0] * (1 - wx) + images[:, y1][:, :, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[0] if squeeze else out


def upsample_images(ds: Dataset, size: int) -> Dataset:
    return Dataset(bilinear_resize(ds.images, size), ds.labels, ds.class_names)


def random_resized_crop(img: np.ndarray, rng: np.random.Generator, out_size: int,
                        scale: tuple[float, float] = (0.67, 1.0),
                        ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> np.ndarray:
    """Random area/aspect crop, bilinear-resized to out_size."""
    h, w, _ = img.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.integers(0, h - ch + 1)
            left = rng.integers(0, w - cw + 1)
            crop = img[top:top + ch, left:left + cw]
            return bilinear_resize(crop, out_size)
    return bilinear_resize(img, out_size)


# ---------------------------------------------------------------------------
# synthetic shapes

SYNTH_CLASSES = ("rectangle", "disk", "stripes", "gradient")


def _noise_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((size // 8 + 1, size // 8 + 1, 3)).astype(np.float32)
    return bilinear_resize(coarse, size) * 0.4 + 0.2


def _synth_image(rng: np.random.Generator, size: int, cls: int) -> np.ndarray:
    img = _noise_background(rng, size)
    color = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if cls == 0:    # rectangle
        h = rng.integers(size // 4, size // 2)
        w = rng.integers(size // 4, size // 2)
        top = rng.integers(0, size - h)
        left = rng.integers(0, size - w)
        img[top:top + h, left:left + w] = color
    elif cls == 1:  # disk
        r = rng.integers(size // 8, size // 3)
        cy = rng.integers(r, size - r)
        cx = rng.integers(r, size - r)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[inside] = color
    elif cls == 2:  # diagonal stripes
        period = int(rng.integers(size // 8, size // 3))
        phase = rng.integers(0, period)
        stripe = ((yy + xx + phase) % (2 * period)) < period
        img[stripe] = color
    else:           # horizontal gradient of the color
        ramp = (xx / (size - 1))[..., None]
        img = img * (1 - ramp) + color * ramp
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, n: int, size: int) -> Dataset:
    """Class-balanced procedural shapes on noise; deterministic per seed."""
    rng = np.random.default_rng(seed)
    labels = np.array([i % len(SYNTH_CLASSES) for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    images = np.zeros((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        images[i] = _synth_image(rng, size, int(labels[i]))
    return Dataset(images, labels, SYNTH_CLASSES)


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator,
                    shuffle: bool = True):
    """Yield (images, labels) minibatches; drops no samples."""
    idx = np.arange(len(ds.labels))
    if shuffle:
        rng.shuffle(idx)
    for start in range(0, len(idx), batch_size):
        part = idx[start:start + batch_size]
        yield ds.images[part], ds.labels[part]
