"""MNIST (IDX) and CIFAR-10 (binary batch) readers."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DatasetError(ValueError):
    """A dataset file is malformed. ``offset`` is the byte position at fault."""

    def __init__(self, path, message, offset=None):
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}{where}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, n_or_index):
        idx = np.arange(min(n_or_index, len(self))) if np.isscalar(n_or_index) else n_or_index
        return LabeledDataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic):
    """Return the array stored in an unsigned-byte IDX file."""
    raw = _read(path)
    if len(raw) < 4:
        raise DatasetError(path, f"file is {len(raw)} bytes, too short for a magic number", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(path, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(path, f"truncated header: expected {header} bytes, got {len(raw)}",
                           len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DatasetError(path, f"expected {expected} bytes for dims {dims}, got {len(raw)}",
                           min(len(raw), expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX; magic encodes ubyte type and rank."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_mnist(path, split="train", images_file=None, labels_file=None):
    """Load one MNIST split from a directory of uncompressed IDX files."""
    img_name, lbl_name = MNIST_FILES[split]
    img_path = images_file or os.path.join(path, img_name)
    lbl_path = labels_file or os.path.join(path, lbl_name)
    images = read_idx(img_path, IDX_IMAGES_MAGIC)
    labels = read_idx(lbl_path, IDX_LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise DatasetError(img_path, f"unexpected ranks {images.ndim}/{labels.ndim}")
    if len(images) != len(labels):
        raise DatasetError(lbl_path, f"{len(images)} images but {len(labels)} labels", 4)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(lbl_path, f"label {labels[bad]} out of range", 8 + bad)
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64), split)


def read_cifar_records(path):
    raw = _read(path)
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) - len(raw) % CIFAR_RECORD
        raise DatasetError(path, f"size {len(raw)} is not a multiple of {CIFAR_RECORD}", whole)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(path, f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(path, split="train"):
    """Load CIFAR-10 from the binary distribution directory or a single batch file."""
    files = [path] if os.path.isfile(path) else [os.path.join(path, f) for f in CIFAR_FILES[split]]
    parts = [read_cifar_records(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(images.astype(np.float32) / 255.0, labels.astype(np.int64), split)


def load_dataset(name, path, split):
    if name == "mnist":
        return load_mnist(path, split)
    if name == "cifar10":
        return load_cifar10(path, split)
    raise ValueError(f"unknown dataset {name!r}")
