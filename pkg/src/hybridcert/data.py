"""Datasets: IDX files (MNIST layout) and small synthetic 2-D problems."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray                # [N, *shape] float32
    y: np.ndarray                # [N] int64
    value_range: tuple[float, float]
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataFormatError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], self.value_range, self.num_classes)

    def take(self, n: int | None) -> Dataset:
        return self if n is None else self.subset(slice(0, n))


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _header(buf: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated header at offset {len(buf)}")
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", buf, 4)


def read_idx_images(path) -> np.ndarray:
    buf = _read(path)
    count, rows, cols = _header(buf, path, IMAGE_MAGIC, 3)
    end = 16 + count * rows * cols
    if len(buf) < end:
        raise DataFormatError(f"{path}: truncated pixel data at offset {len(buf)}, expected {end} bytes")
    pix = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pix.reshape(count, 1, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read(path)
    (count,) = _header(buf, path, LABEL_MAGIC, 1)
    if len(buf) < 8 + count:
        raise DataFormatError(f"{path}: truncated label data at offset {len(buf)}, expected {8 + count} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Images scaled to [0, 1] with shape [N, 1, rows, cols]."""
    pix = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pix) != len(labels):
        raise DataFormatError(f"{images_path} has {len(pix)} images but {labels_path} has {len(labels)} labels")
    return Dataset((pix / np.float32(255)).astype(np.float32), labels, (0.0, 1.0), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress: bool = False) -> None:
    """Write uint8 images [N, rows, cols] (or [N, 1, rows, cols]) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    images = images.reshape(len(images), images.shape[-2], images.shape[-1])
    n, rows, cols = images.shape
    img = struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + images.tobytes()
    lab = struct.pack(">2I", LABEL_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    wrap = gzip.compress if compress else (lambda b: b)
    Path(images_path).write_bytes(wrap(img))
    Path(labels_path).write_bytes(wrap(lab))


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    return tuple(load_idx(_find(directory, img), _find(directory, lab)) for img, lab in
                 (_MNIST_NAMES["train"], _MNIST_NAMES["test"]))


# -- synthetic ------------------------------------------------------------------

SYNTHETIC_RANGE = (-1.0, 1.0)


def blobs(n: int, noise: float = 0.15, seed: int = 0) -> Dataset:
    """Two Gaussian clusters at (-0.5,-0.5) and (0.5,0.5), clipped to [-1, 1]."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    centers = np.where(y[:, None] == 1, 0.5, -0.5)
    x = np.clip(centers + noise * rng.standard_normal((n, 2)), *SYNTHETIC_RANGE)
    return Dataset(x.astype(np.float32), y.astype(np.int64), SYNTHETIC_RANGE, 2)


def moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles rescaled into [-1, 1]."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    theta = rng.uniform(0, np.pi, size=n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(theta), np.sin(theta)], 1),
                 np.stack([1 - np.cos(theta), 0.5 - np.sin(theta)], 1))
    x = (x - [0.5, 0.25]) / [1.5, 0.75]
    x = np.clip(x + noise * rng.standard_normal((n, 2)), *SYNTHETIC_RANGE)
    return Dataset(x.astype(np.float32), y.astype(np.int64), SYNTHETIC_RANGE, 2)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = len(ds) - int(round(test_fraction * len(ds)))
    return ds.subset(perm[:cut]), ds.subset(perm[cut:])


def load_dataset(spec: str) -> tuple[Dataset, Dataset]:
    """Resolve a dataset spec string into (train, test).

    ``mnist:DIR``  standard MNIST file names inside DIR (optionally gzipped)
    ``idx:TRAIN_IMAGES,TRAIN_LABELS,TEST_IMAGES,TEST_LABELS``
    ``blobs:N[,NOISE[,SEED]]`` / ``moons:N[,NOISE[,SEED]]``  80/20 split
    """
    kind, _, rest = spec.partition(":")
    if kind == "mnist":
        return load_mnist_dir(rest)
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 4:
            raise ValueError("idx dataset needs four comma-separated paths")
        return load_idx(parts[0], parts[1]), load_idx(parts[2], parts[3])
    if kind in ("blobs", "moons"):
        parts = rest.split(",") if rest else []
        if not parts or len(parts) > 3:
            raise ValueError(f"{kind} dataset spec is {kind}:N[,NOISE[,SEED]]")
        n = int(parts[0])
        kwargs = {}
        if len(parts) > 1:
            kwargs["noise"] = float(parts[1])
        if len(parts) > 2:
            kwargs["seed"] = int(parts[2])
        ds = (blobs if kind == "blobs" else moons)(n, **kwargs)
        return train_test_split(ds, 0.2, kwargs.get("seed", 0))
    raise ValueError(f"unknown dataset kind {kind!r} (expected mnist, idx, blobs or moons)")
