import os

import numpy as np
import pytest

from conftest import MNIST_DIR, needs_mnist
from tclsnn.data import (DatasetError, LabeledDataset, load_cifar10, load_dataset, load_mnist,
                         read_idx, write_idx)


def write_mnist_fixture(tmp_path, images, labels, split="test"):
    names = {"test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
             "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")}[split]
    write_idx(tmp_path / names[0], images)
    write_idx(tmp_path / names[1], labels)
    return tmp_path / names[0], tmp_path / names[1]


def test_two_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (2, 28, 28), dtype=np.uint8)
    write_mnist_fixture(tmp_path, images, np.array([3, 9], np.uint8))
    ds = load_mnist(tmp_path, "test")
    assert ds.images.shape == (2, 1, 28, 28) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), images)
    np.testing.assert_array_equal(ds.labels, [3, 9])


def test_magic_numbers_written_big_endian(tmp_path):
    img, lbl = write_mnist_fixture(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
    assert img.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert lbl.read_bytes()[:4] == b"\x00\x00\x08\x01"


def test_truncated_image_file_reports_lengths(tmp_path):
    img, _ = write_mnist_fixture(tmp_path, np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8))
    raw = img.read_bytes()
    img.write_bytes(raw[:-100])
    with pytest.raises(DatasetError) as info:
        load_mnist(tmp_path, "test")
    msg = str(info.value)
    assert str(len(raw)) in msg and str(len(raw) - 100) in msg
    assert info.value.offset == len(raw) - 100


def test_bad_magic_rejected_at_offset_zero(tmp_path):
    img, _ = write_mnist_fixture(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    img.write_bytes(bytes(raw))
    with pytest.raises(DatasetError) as info:
        load_mnist(tmp_path, "test")
    assert info.value.offset == 0 and "magic" in str(info.value)


def test_count_mismatch_rejected(tmp_path):
    write_mnist_fixture(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(DatasetError):
        load_mnist(tmp_path, "test")


def test_idx_header_only_file_rejected(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"\x00\x00\x08\x03\x00\x00")
    with pytest.raises(DatasetError):
        read_idx(p, 0x803)


@needs_mnist
def test_official_test_split():
    ds = load_mnist(MNIST_DIR, "test")
    # independent oracle: read the raw header and first records with plain byte indexing
    lbl = (MNIST_DIR / "t10k-labels-idx1-ubyte").read_bytes()
    img = (MNIST_DIR / "t10k-images-idx3-ubyte").read_bytes()
    assert int.from_bytes(lbl[4:8], "big") == 10000 == len(ds)
    assert lbl[8] == 7 == ds.labels[0]
    assert [int.from_bytes(img[i:i + 4], "big") for i in (4, 8, 12)] == [10000, 28, 28]
    first = [img[16 + k] / 255 for k in range(784)]
    np.testing.assert_allclose(ds.images[0].reshape(-1), first, rtol=0, atol=1e-7)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


@needs_mnist
def test_official_train_split_size():
    assert len(load_mnist(MNIST_DIR, "train")) == 60000


def cifar_record(label, seed=0):
    pixels = np.random.default_rng(seed).integers(0, 256, 3072, dtype=np.uint8)
    return bytes([label]) + pixels.tobytes(), pixels


def test_single_cifar_record(tmp_path):
    raw, pixels = cifar_record(9)
    (tmp_path / "b.bin").write_bytes(raw)
    ds = load_cifar10(str(tmp_path / "b.bin"))
    assert len(ds) == 1 and ds.labels[0] == 9 and ds.images.shape == (1, 3, 32, 32)
    # planes are R then G then B, each row-major 32x32
    np.testing.assert_allclose(ds.images[0, 1, 0, 0], pixels[1024] / 255)


def test_cifar_directory_layout(tmp_path):
    raw = b"".join(cifar_record(k % 10, k)[0] for k in range(4))
    (tmp_path / "test_batch.bin").write_bytes(raw)
    ds = load_dataset("cifar10", str(tmp_path), "test")
    assert len(ds) == len(raw) // 3073 == 4
    np.testing.assert_array_equal(ds.labels, [0, 1, 2, 3])


def test_cifar_label_ten_rejected(tmp_path):
    raw, _ = cifar_record(10)
    (tmp_path / "b.bin").write_bytes(raw)
    with pytest.raises(DatasetError):
        load_cifar10(str(tmp_path / "b.bin"))


def test_cifar_misaligned_rejected(tmp_path):
    raw, _ = cifar_record(1)
    (tmp_path / "b.bin").write_bytes(raw + b"\x00")
    with pytest.raises(DatasetError) as info:
        load_cifar10(str(tmp_path / "b.bin"))
    assert info.value.offset == 3073


def test_dataset_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.zeros(3, np.int64))
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((1, 1, 2, 2)), np.array([10]))


def test_unknown_dataset_rejected(tmp_path):
    with pytest.raises(ValueError):
        load_dataset("imagenet", os.fspath(tmp_path), "test")
