"""Dataset ingestion: IDX images (MNIST/FMNIST), CIFAR-10 binary, batching.

Files are parsed bit-exactly against the published formats (big-endian IDX
magic numbers, 3073-byte CIFAR records), pixels scaled to [0, 1], and no
other preprocessing applied.  Gzip-compressed IDX files are accepted
transparently.  Shuffled batch order is a pure function of (seed, epoch).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .sampler import PbitStream, PURPOSE_SHUFFLE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

DATA_ROOT_ENV = "BSFF_DATA_ROOT"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Images (N, C, H, W) float32 in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError("image/label count mismatch")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def ncat(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _read_file(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse a big-endian IDX image/label file pair."""
    raw = _read_file(images_path)
    if len(raw) < 16:
        raise DataFormatError(f"{images_path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{images_path}: wrong magic 0x{magic:08x}, expected image magic "
            f"0x{IDX_IMAGES_MAGIC:08x}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{images_path}: truncated at byte {len(raw)}, need {need}")
    images = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = images.reshape(n, 1, rows, cols).astype(np.float32) / 255.0

    raw = _read_file(labels_path)
    if len(raw) < 8:
        raise DataFormatError(f"{labels_path}: truncated header")
    magic, n_labels = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{labels_path}: wrong magic 0x{magic:08x}, expected label magic "
            f"0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8 + n_labels:
        raise DataFormatError(f"{labels_path}: truncated at byte {len(raw)}")
    if n_labels != n:
        raise DataFormatError(f"count mismatch: {n} images vs {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    return Dataset(images, labels, split)


def load_cifar10(batch_files, split: str = "train") -> Dataset:
    """Parse CIFAR-10 binary batches: 1 label byte + 3x1024 channel planes."""
    all_images, all_labels = [], []
    for path in batch_files:
        raw = _read_file(path)
        if len(raw) % CIFAR_RECORD:
            offset = len(raw) - (len(raw) % CIFAR_RECORD)
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                f"trailing partial record at byte {offset}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        all_labels.append(records[:, 0].astype(np.int64))
        imgs = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        all_images.append(imgs)
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels), split)


def resolve_root(data_root=None) -> Path:
    root = data_root or os.environ.get(DATA_ROOT_ENV, "data")
    return Path(root)


def dataset_available(name: str, data_root=None) -> bool:
    try:
        _dataset_paths(name, resolve_root(data_root))
        return True
    except FileNotFoundError:
        return False


def _find(dirpath: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        p = dirpath / (stem + suffix)
        if p.exists():
            return p
    raise FileNotFoundError(f"{dirpath / stem}[.gz] not found")


def _dataset_paths(name: str, root: Path):
    if name in ("mnist", "fmnist"):
        sub = root / name
        out = {}
        for split, (img, lab) in MNIST_FILES.items():
            out[split] = (_find(sub, img), _find(sub, lab))
        return out
    if name == "cifar10":
        sub = root / "cifar10"
        train = [_find(sub, f"data_batch_{i}.bin") for i in range(1, 6)]
        test = [_find(sub, "test_batch.bin")]
        return {"train": train, "test": test}
    raise DataFormatError(f"unknown dataset {name!r}")


def load_dataset(name: str, split: str, data_root=None) -> Dataset:
    """Load a named dataset split from the data root directory.

    Layout: ``<root>/mnist/train-images-idx3-ubyte[.gz]`` etc. for the IDX
    datasets, ``<root>/cifar10/data_batch_1.bin`` ... for CIFAR-10.  The
    root defaults to ``$BSFF_DATA_ROOT`` or ``./data``.
    """
    paths = _dataset_paths(name, resolve_root(data_root))[split]
    if name == "cifar10":
        return load_cifar10(paths, split)
    return load_idx(paths[0], paths[1], split)


def batches(ds: Dataset, batch_size: int, epoch: int, seed: int):
    """Deterministic shuffled minibatches; the short final batch is kept.

    Yields ``(sample_ids, images, labels)`` where ``sample_ids`` are the
    dataset-level indices, stable regardless of batch size.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    gen = PbitStream(seed, PURPOSE_SHUFFLE).generator(epoch=epoch)
    order = gen.permutation(ds.n)
    for start in range(0, ds.n, batch_size):
        ids = order[start:start + batch_size]
        yield ids, ds.images[ids], ds.labels[ids]
