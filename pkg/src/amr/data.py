"""Dataset ingestion, normalization, batching, and synthetic oriented bars.

MNIST is read from the original IDX containers (gzip-compressed copies are
accepted transparently). Normalization statistics always come from a train
split. The synthetic bar corpus provides an analytically known canonical
orientation for angle-recovery tests without any external data.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import circular_mask, mask_batch, rotate_array, resize_bilinear

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when an IDX file fails structural validation."""


@dataclass
class Dataset:
    """Images (N, H, W, C) float32 with integer labels and split metadata."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be NxHxWxC, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.images) == 0:
            raise ValueError("empty dataset")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        n = min(n, len(self))
        return replace(self, images=self.images[:n], labels=self.labels[:n])


@dataclass
class Batch:
    """Model-ready batch: NCHW images plus labels (and angles when rotated)."""

    images: np.ndarray
    labels: np.ndarray
    angles: np.ndarray | None = None


def _open_maybe_gzip(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated IDX file while reading {what}")
    return buf


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse a big-endian IDX image/label file pair into a raw [0,1] dataset."""
    with _open_maybe_gzip(images_path) as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad image magic 0x{magic:08x} (expected 0x{IMAGES_MAGIC:08x})"
            )
        raw = _read_exact(f, n * h * w, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 1)
    images = images.astype(np.float32) / np.float32(255.0)

    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise IdxFormatError(
                f"bad label magic 0x{magic:08x} (expected 0x{LABELS_MAGIC:08x})"
            )
        raw = _read_exact(f, n_labels, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_labels:
        raise IdxFormatError(f"image count {n} != label count {n_labels}")
    return Dataset(images=images, labels=labels, split=split)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(data_dir, split: str = "train") -> Dataset:
    """Load MNIST from a directory holding the standard IDX file names."""
    data_dir = Path(data_dir)
    img_name, lbl_name = _MNIST_FILES[split]
    paths = []
    for name in (img_name, lbl_name):
        plain, gz = data_dir / name, data_dir / (name + ".gz")
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            raise FileNotFoundError(f"missing {name}[.gz] under {data_dir}")
    return load_mnist_idx(paths[0], paths[1], split=split)


def write_idx_fixture(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write a uint8 image stack and labels back out in IDX format (tests/tools)."""
    n, h, w = images.shape[0], images.shape[1], images.shape[2]
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def compute_norm_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std; only meaningful on a train split."""
    if ds.split != "train":
        raise ValueError("normalization statistics must come from the train split")
    mean = ds.images.mean(axis=(0, 1, 2))
    std = ds.images.std(axis=(0, 1, 2))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(ds: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Map pixels to (v - mean) / std per channel; stats default to ds's own train stats."""
    if stats is None:
        stats = compute_norm_stats(ds)
    mean, std = stats
    images = (ds.images - mean) / std
    return replace(
        ds,
        images=images.astype(np.float32),
        mean=np.asarray(mean, dtype=np.float32),
        std=np.asarray(std, dtype=np.float32),
        normalized=True,
    )


def resize_dataset(ds: Dataset, size: int) -> Dataset:
    """Bilinear per-image resize to size x size (for the full-width preset)."""
    out = np.stack([resize_bilinear(img, size, size) for img in ds.images])
    return replace(ds, images=out)


def synth_oriented_bars(n: int, size: int, rng: np.random.Generator) -> Dataset:
    """Soft-edged horizontal bars with a brighter right end (canonical 0 degrees).

    The brightness asymmetry breaks the 180-degree ambiguity so a rotation
    of the bar determines its angle uniquely. All content fits inside the
    inscribed disk, so masking never clips it.
    """
    if size < 16:
        raise ValueError("bar images need size >= 16")
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    imgs = np.zeros((n, size, size, 1), dtype=np.float32)
    for i in range(n):
        half_len = (0.30 + 0.06 * rng.random()) * size
        sigma = (0.035 + 0.015 * rng.random()) * size
        bright = 0.85 + 0.15 * rng.random()
        dx = xs - c
        dy = ys - c
        across = np.exp(-0.5 * (dy / sigma) ** 2)
        along = np.exp(-0.5 * (np.maximum(np.abs(dx) - half_len, 0.0) / (0.06 * size)) ** 2)
        ramp = 0.35 + 0.65 * np.clip((dx + half_len) / (2 * half_len), 0.0, 1.0)
        img = bright * across * along * ramp
        imgs[i, :, :, 0] = img
    np.clip(imgs, 0.0, 1.0, out=imgs)
    labels = np.zeros(n, dtype=np.int64)
    return Dataset(images=imgs, labels=labels, split="train", num_classes=1)


def batch_iter(
    ds: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    regime: str = "upright",
) -> Iterator[Batch]:
    """One shuffled epoch of masked NCHW batches.

    upright: circular mask only. rotated: uniform random integer-degree
    rotation then mask, angle discarded. angle: same but the angle becomes
    the label of interest. The final short batch is emitted.
    """
    if regime not in ("upright", "rotated", "angle"):
        raise ValueError(f"unknown regime {regime!r}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not ds.normalized:
        raise ValueError("batch_iter expects a normalized dataset")
    order = rng.permutation(len(ds))
    fill = 0.0  # normalized space: dataset mean
    keep = circular_mask(ds.images.shape[1], ds.images.shape[2])
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        imgs = ds.images[idx]
        angles = None
        if regime == "upright":
            imgs = imgs.copy()
            imgs[:, ~keep] = fill
        else:
            rotated = np.empty_like(imgs)
            angles = np.empty(len(idx), dtype=np.int64)
            for j in range(len(idx)):
                theta = int(rng.integers(0, 360))
                rotated[j] = rotate_array(imgs[j], theta, fill)
                angles[j] = theta
            rotated[:, ~keep] = fill
            imgs = rotated
        nchw = np.ascontiguousarray(imgs.transpose(0, 3, 1, 2), dtype=np.float32)
        yield Batch(
            images=nchw,
            labels=ds.labels[idx],
            angles=angles if regime == "angle" else None,
        )


def eval_batches(images: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    """Unshuffled NCHW batches over an already-prepared NHWC image stack."""
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        yield np.ascontiguousarray(chunk.transpose(0, 3, 1, 2), dtype=np.float32)


def prepare_upright(ds: Dataset) -> np.ndarray:
    """Masked NHWC images of a normalized dataset (the upright eval input)."""
    if not ds.normalized:
        raise ValueError("expected a normalized dataset")
    return mask_batch(ds.images, 0.0)
