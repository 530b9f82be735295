"""Dataset readers: seeded synthetic data, MNIST IDX files, CIFAR-10 binary batches."""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DatasetError(ValueError):
    pass


class FormatError(DatasetError):
    pass


class LengthError(DatasetError):
    pass


class DatasetMissing(FileNotFoundError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    name: str

    @property
    def input_shape(self):
        return self.x_train.shape[1:]


def parse_idx(buf: bytes, expected_magic: int) -> np.ndarray:
    """Parse an IDX file holding unsigned bytes (big-endian header)."""
    if len(buf) < 4:
        raise LengthError(f"IDX data too short for a header ({len(buf)} bytes)")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise LengthError("IDX header truncated")
    dims = tuple(int(d) for d in np.frombuffer(buf, dtype=">u4", count=ndim, offset=4))
    need = int(np.prod(dims))
    if len(buf) - header != need:
        raise LengthError(f"IDX payload has {len(buf) - header} bytes, header declares {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def parse_cifar_bin(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR-10 binary batch into (N,3,32,32) uint8 images and labels."""
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise LengthError(f"CIFAR batch length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def _read(root: Path, stem: str) -> bytes:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = root / name
        if p.exists():
            data = p.read_bytes()
            return gzip.decompress(data) if name.endswith(".gz") else data
    raise DatasetMissing(f"{stem} not found under {root}")


def load_mnist(root) -> Dataset:
    root = Path(root)
    out = []
    for split in ("train", "t10k"):
        imgs = parse_idx(_read(root, f"{split}-images-idx3-ubyte"), IDX_IMAGES_MAGIC)
        labels = parse_idx(_read(root, f"{split}-labels-idx1-ubyte"), IDX_LABELS_MAGIC)
        if len(imgs) != len(labels):
            raise LengthError(f"{split}: {len(imgs)} images but {len(labels)} labels")
        x = ((imgs.astype(np.float32) / 255.0 - MNIST_MEAN) / MNIST_STD)[:, None]
        out += [x, labels.astype(np.int64)]
    return Dataset(*out, n_classes=10, name="mnist-idx")


def load_cifar10(root) -> Dataset:
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [parse_cifar_bin(_read(root, f"data_batch_{i}.bin")) for i in range(1, 6)]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = parse_cifar_bin(_read(root, "test_batch.bin"))

    def norm(x):
        x = x.astype(np.float32) / 255.0
        return ((x - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]).astype(np.float32)

    return Dataset(norm(xtr), ytr, norm(xte), yte, n_classes=10, name="cifar10-bin")


def synthetic_gauss(
    n_samples=6000, n_classes=10, input_shape=(1, 28, 28), class_sep=0.15, seed=0, test_frac=1 / 6
) -> Dataset:
    """Gaussian-mixture classification: one random mean per class, unit noise."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(input_shape))
    means = rng.standard_normal((n_classes, d)) * class_sep
    y = rng.integers(0, n_classes, n_samples)
    x = (means[y] + rng.standard_normal((n_samples, d))).astype(np.float32)
    x = x.reshape((n_samples,) + tuple(input_shape))
    n_test = int(round(n_samples * test_frac))
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test], n_classes, "synthetic-gauss")


def load_dataset(name: str, root: str = "", **synthetic_kw) -> Dataset:
    if name == "synthetic-gauss":
        return synthetic_gauss(**synthetic_kw)
    if not root or not Path(root).is_dir():
        raise DatasetMissing(f"dataset {name!r} needs an existing data_root, got {root!r}")
    if name == "mnist-idx":
        return load_mnist(root)
    if name == "cifar10-bin":
        return load_cifar10(root)
    raise DatasetError(f"unknown dataset {name!r}")


def random_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Standard CIFAR augmentation: pad-and-crop plus horizontal flip."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        img = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out
