"""Datasets: synthetic generators, MNIST IDX and CIFAR-10 binary readers, augmentation.

All randomness is derived from explicit seeds. Batch order and augmentation for
a given epoch depend only on ``(seed, epoch)`` (and the batch index), so a data
stream can be replayed or reset between training cycles.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class MagicMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class DimensionMismatchError(DataFormatError):
    pass


@dataclass
class Split:
    x: np.ndarray  # float32 samples, (N, ...) already normalized
    y: np.ndarray  # int64 labels

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DimensionMismatchError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    name: str
    classes: int
    train: Split
    val: Split
    test: Split
    image: bool = False
    mean: tuple = ()
    std: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for split in (self.train, self.val, self.test):
            if len(split) and (split.y.min() < 0 or split.y.max() >= self.classes):
                raise ValueError(f"labels outside [0, {self.classes})")

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.train.x.shape[1:])


def split_holdout(x: np.ndarray, y: np.ndarray, fractions: tuple[float, float], seed: int):
    """Shuffle and cut into train / val / test using (val, test) fractions."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_val = int(round(fractions[0] * len(y)))
    n_test = int(round(fractions[1] * len(y)))
    val, test, train = np.split(order, [n_val, n_val + n_test])
    return Split(x[train], y[train]), Split(x[val], y[val]), Split(x[test], y[test])


# ---------------------------------------------------------------------------
# synthetic data

def simplex_means(classes: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= classes:
        means = np.zeros((classes, dim))
        means[np.arange(classes), np.arange(classes)] = 1.0
        means -= means.mean(axis=0)
    else:
        means = rng.standard_normal((classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return scale * means


def synth_gaussians(classes: int, dim: int, n_per_class: int, seed: int = 0, scale: float = 4.0,
                    noise: float = 1.0, fractions=(0.1, 0.1)) -> Dataset:
    """Isotropic Gaussian blobs centred on a scaled simplex."""
    rng = np.random.default_rng(seed)
    means = simplex_means(classes, dim, scale, rng)
    y = np.repeat(np.arange(classes), n_per_class)
    x = means[y] + noise * rng.standard_normal((len(y), dim))
    train, val, test = split_holdout(x.astype(np.float32), y.astype(np.int64), fractions, seed + 1)
    return Dataset("synth_gaussians", classes, train, val, test,
                   meta={"dim": dim, "n_per_class": n_per_class, "seed": seed})


def synth_mixture(classes: int = 10, dim: int = 32, clusters: int = 8, n_samples: int = 12000,
                  seed: int = 0, spread: float = 1.0, noise: float = 0.35, fractions=(0.1, 0.1)) -> Dataset:
    """Harder benchmark: each class is a union of ``clusters`` Gaussian blobs.

    Blob centres are drawn at random, so classes interleave and a network
    needs several hidden units per class; accuracy degrades visibly once
    capacity is pruned away.
    """
    rng = np.random.default_rng(seed)
    centres = spread * rng.standard_normal((classes * clusters, dim))
    blob = rng.integers(0, classes * clusters, size=n_samples)
    y = blob % classes
    x = centres[blob] + noise * rng.standard_normal((n_samples, dim))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    train, val, test = split_holdout(x.astype(np.float32), y.astype(np.int64), fractions, seed + 1)
    return Dataset("synth_mixture", classes, train, val, test,
                   meta={"dim": dim, "clusters": clusters, "n_samples": n_samples, "seed": seed})


# ---------------------------------------------------------------------------
# file formats

IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into an array."""
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    zero, dtype_code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or dtype_code not in IDX_DTYPES or ndim == 0:
        raise MagicMismatchError(f"{path}: bad IDX magic 0x{magic:08x}")
    if expected_magic is not None and magic != expected_magic:
        raise MagicMismatchError(f"{path}: expected magic 0x{expected_magic:08x}, found 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = np.dtype(IDX_DTYPES[dtype_code])
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(buf) - header
    if payload < need:
        raise TruncatedFileError(f"{path}: expected {need} payload bytes, found {payload}")
    if payload > need:
        raise DimensionMismatchError(f"{path}: {payload - need} trailing bytes beyond dimensions {dims}")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, *([1] * (x.ndim - 2)))
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, *([1] * (x.ndim - 2)))
    return ((x - mean) / std).astype(np.float32)


MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN, CIFAR_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)


def load_idx(images_path, labels_path, *, test_images=None, test_labels=None, mean=MNIST_MEAN,
             std=MNIST_STD, train_subset: int | None = 10000, val_fraction: float = 0.1,
             seed: int = 0) -> Dataset:
    """MNIST-style dataset from IDX image/label files.

    Without separate test files, a test split of the same size as the
    validation split is held out from the training files.
    """
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    x = normalize(imgs.astype(np.float32)[:, None] / 255.0, mean, std)
    y = labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    if train_subset is not None and train_subset < len(y):
        keep = np.sort(rng.choice(len(y), size=train_subset, replace=False))
        x, y = x[keep], y[keep]
    if test_images is not None:
        ti = read_idx(test_images, IDX_IMAGES_MAGIC)
        tl = read_idx(test_labels, IDX_LABELS_MAGIC)
        if ti.shape[0] != tl.shape[0]:
            raise DimensionMismatchError(f"{ti.shape[0]} test images but {tl.shape[0]} labels")
        if ti.shape[1:] != imgs.shape[1:]:
            raise DimensionMismatchError(f"test images {ti.shape[1:]} vs train {imgs.shape[1:]}")
        test = Split(normalize(ti.astype(np.float32)[:, None] / 255.0, mean, std), tl.astype(np.int64))
        train, val, _ = split_holdout(x, y, (val_fraction, 0.0), seed + 1)
    else:
        train, val, test = split_holdout(x, y, (val_fraction, val_fraction), seed + 1)
    classes = int(max(y.max(), test.y.max() if len(test) else 0)) + 1
    return Dataset("mnist", max(classes, 10), train, val, test, image=True, mean=tuple(mean), std=tuple(std))


CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (CHW)."""
    buf = _read_bytes(path)
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise TruncatedFileError(f"{path}: size {len(buf)} is not a positive multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    y = raw[:, 0].astype(np.int64)
    if y.max() > 9:
        raise MagicMismatchError(f"{path}: label byte {y.max()} outside 0..9; not a CIFAR-10 batch")
    return raw[:, 1:].reshape(-1, 3, 32, 32), y


def load_cifar10(path, *, mean=CIFAR_MEAN, std=CIFAR_STD, train_subset: int | None = 10000,
                 val_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """CIFAR-10 from a directory of ``data_batch_*.bin`` / ``test_batch.bin`` or a single batch file."""
    path = Path(path)
    if path.is_dir():
        train_files = sorted(path.glob("data_batch_*.bin"))
        if not train_files:
            raise FileNotFoundError(f"no data_batch_*.bin files under {path}")
        parts = [read_cifar10_batch(p) for p in train_files]
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        test_file = path / "test_batch.bin"
        test_xy = read_cifar10_batch(test_file) if test_file.exists() else None
    else:
        x, y = read_cifar10_batch(path)
        test_xy = None
    rng = np.random.default_rng(seed)
    if train_subset is not None and train_subset < len(y):
        keep = np.sort(rng.choice(len(y), size=train_subset, replace=False))
        x, y = x[keep], y[keep]
    xf = normalize(x.astype(np.float32) / 255.0, mean, std)
    if test_xy is not None:
        test = Split(normalize(test_xy[0].astype(np.float32) / 255.0, mean, std), test_xy[1])
        train, val, _ = split_holdout(xf, y, (val_fraction, 0.0), seed + 1)
    else:
        train, val, test = split_holdout(xf, y, (val_fraction, val_fraction), seed + 1)
    return Dataset("cifar10", 10, train, val, test, image=True, mean=tuple(mean), std=tuple(std))


def dataset_root(flag: str | None = None) -> Path | None:
    root = flag or os.environ.get("ST3_DATA_ROOT")
    return Path(root) if root else None


# ---------------------------------------------------------------------------
# batching and augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    crop_pad: int = 4
    flip: bool = True


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def augment(batch: np.ndarray, policy: AugmentPolicy | None, seed: int, epoch: int, index: int) -> np.ndarray:
    """Pad-and-crop plus random horizontal flip, determined by (seed, epoch, index)."""
    if policy is None or batch.ndim != 4:
        return batch
    rng = np.random.default_rng([seed, epoch, index])
    out = random_crop(batch, policy.crop_pad, rng) if policy.crop_pad else batch.copy()
    if policy.flip:
        flip = rng.random(len(out)) < 0.5
        out[flip] = hflip(out[flip])
    return np.ascontiguousarray(out)


def iterate_batches(split: Split, batch_size: int, seed: int, epoch: int, shuffle: bool = True,
                    policy: AugmentPolicy | None = None):
    n = len(split)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        x = split.x[idx]
        if policy is not None:
            x = augment(x, policy, seed, epoch, b)
        yield x, split.y[idx]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
