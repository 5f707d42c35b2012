"""Datasets: synthetic gratings, IDX files, splits."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Rng, randn

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError("image and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise FormatError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 16
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.samples_per_class < 1 or self.image_size < 1:
            raise ConfigError("synthetic dataset sizes must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def grating_template(k: int, n_classes: int, size: int) -> np.ndarray:
    """Sinusoidal grating for class ``k``: orientation ``pi*k/K``, ``1 + k % 4`` cycles per image."""
    theta = math.pi * k / n_classes
    cycles = 1 + (k % 4)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    return 0.5 + 0.5 * np.sin(2.0 * math.pi * cycles * proj / size)


def gen_synthetic(spec: SyntheticSpec, rng: Rng | None = None) -> Dataset:
    """Class-interleaved grating images with Gaussian pixel noise, clipped to [0, 1]."""
    rng = rng or Rng(spec.seed)
    K, n, S = spec.n_classes, spec.samples_per_class, spec.image_size
    templates = np.stack([grating_template(k, K, S) for k in range(K)])
    labels = np.tile(np.arange(K), n)
    noise = randn([K * n, S, S], spec.noise_std, rng) if spec.noise_std > 0 else np.zeros((K * n, S, S))
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return Dataset(images[..., None], labels, K)


def split(ds: Dataset, val_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Seeded permutation split; validation gets ``round(N * val_fraction)`` items."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")
    perm = rng.permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


# -- IDX -------------------------------------------------------------------------

def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(image_path, label_path, max_samples: int | None = None,
             n_classes: int | None = None) -> Dataset:
    """Read big-endian IDX ubyte images (``0x803``) and labels (``0x801``)."""
    img, lab = _read(image_path), _read(label_path)
    if len(img) < 16:
        raise FormatError(f"{image_path}: truncated header")
    magic, n_img, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{image_path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    if len(lab) < 8:
        raise FormatError(f"{label_path}: truncated header")
    lmagic, n_lab = struct.unpack(">II", lab[:8])
    if lmagic != LABEL_MAGIC:
        raise FormatError(f"{label_path}: bad magic 0x{lmagic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}")
    if len(img) < 16 + n_img * rows * cols:
        raise FormatError(f"{image_path}: truncated pixel data")
    if len(lab) < 8 + n_lab:
        raise FormatError(f"{label_path}: truncated label data")
    n = n_img if max_samples is None else min(n_img, int(max_samples))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    k = n_classes if n_classes is not None else (int(labels.max()) + 1 if n else 1)
    return Dataset(images, labels, k)


def write_idx(ds: Dataset, image_path, label_path) -> None:
    """Write a single-channel dataset as IDX ubyte (pixels rounded from [0, 1])."""
    if ds.images.shape[-1] != 1:
        raise FormatError("IDX ubyte images are single-channel")
    n, rows, cols = ds.images.shape[:3]
    pix = np.rint(np.clip(ds.images[..., 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(pix.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


IDX_IMAGES = "images-idx3-ubyte"
IDX_LABELS = "labels-idx1-ubyte"


def write_idx_dir(ds: Dataset, out_dir) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = os.path.join(out_dir, IDX_IMAGES), os.path.join(out_dir, IDX_LABELS)
    write_idx(ds, *paths)
    return paths
