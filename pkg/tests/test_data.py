import gzip
import struct

import numpy as np
import pytest

from st3 import data as D
from st3.models import build_mlp
from st3.train import SGD, train_step
from st3 import config as C


def write_idx(path, arr: np.ndarray, magic=None):
    codes = {np.dtype(np.uint8): 0x08}
    magic = magic if magic is not None else (codes[arr.dtype] << 8) | arr.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


@pytest.fixture
def mnist_files(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (50, 28, 28), dtype=np.uint8)
    labels = (np.arange(50) % 10).astype(np.uint8)
    write_idx(tmp_path / "img", imgs)
    write_idx(tmp_path / "lbl", labels)
    return tmp_path, imgs, labels


def test_idx_header_and_payload(mnist_files):
    root, imgs, labels = mnist_files
    got = D.read_idx(root / "img", D.IDX_IMAGES_MAGIC)
    assert got.shape == (50, 28, 28)
    assert got.tobytes() == imgs.tobytes()
    assert D.read_idx(root / "lbl", D.IDX_LABELS_MAGIC).tolist() == labels.tolist()


def test_idx_gzip(tmp_path, mnist_files):
    root, imgs, _ = mnist_files
    with gzip.open(tmp_path / "img.gz", "wb") as f:
        f.write((root / "img").read_bytes())
    assert D.read_idx(tmp_path / "img.gz").tobytes() == imgs.tobytes()


def test_idx_bad_magic(tmp_path):
    write_idx(tmp_path / "bad", np.zeros((2, 2), np.uint8), magic=0x12340803)
    with pytest.raises(D.MagicMismatchError):
        D.read_idx(tmp_path / "bad")
    write_idx(tmp_path / "lbl", np.zeros(3, np.uint8))
    with pytest.raises(D.MagicMismatchError):
        D.read_idx(tmp_path / "lbl", D.IDX_IMAGES_MAGIC)


def test_idx_truncated(tmp_path, mnist_files):
    root, _, _ = mnist_files
    buf = (root / "img").read_bytes()
    (tmp_path / "short").write_bytes(buf[:-10])
    with pytest.raises(D.TruncatedFileError):
        D.read_idx(tmp_path / "short")
    (tmp_path / "tiny").write_bytes(buf[:2])
    with pytest.raises(D.TruncatedFileError):
        D.read_idx(tmp_path / "tiny")


def test_idx_dimension_mismatch(tmp_path, mnist_files):
    root, _, _ = mnist_files
    (tmp_path / "long").write_bytes((root / "img").read_bytes() + b"\0" * 7)
    with pytest.raises(D.DimensionMismatchError):
        D.read_idx(tmp_path / "long")
    write_idx(tmp_path / "lbl49", np.zeros(49, np.uint8))
    with pytest.raises(D.DimensionMismatchError):
        D.load_idx(root / "img", tmp_path / "lbl49")


def test_error_types_are_distinct():
    kinds = {D.MagicMismatchError, D.TruncatedFileError, D.DimensionMismatchError}
    for a in kinds:
        assert issubclass(a, D.DataFormatError)
        for b in kinds - {a}:
            assert not issubclass(a, b)


def test_load_idx_dataset(mnist_files):
    root, imgs, labels = mnist_files
    ds = D.load_idx(root / "img", root / "lbl", train_subset=None, val_fraction=0.2)
    assert ds.sample_shape == (1, 28, 28)
    assert sum(ds.sizes.values()) == 50
    assert ds.sizes == {"train": 30, "val": 10, "test": 10}
    # normalization uses the configured constants
    assert ds.image and ds.mean == D.MNIST_MEAN
    expect = (imgs[0].astype(np.float32) / 255.0 - 0.1307) / 0.3081
    assert any(np.allclose(s[0], expect) for s in np.concatenate([ds.train.x, ds.val.x, ds.test.x]))


def write_cifar(path, n, seed=0):
    rng = np.random.default_rng(seed)
    rec = np.zeros((n, D.CIFAR_RECORD), np.uint8)
    rec[:, 0] = np.arange(n) % 10
    rec[:, 1:] = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    path.write_bytes(rec.tobytes())
    return rec


def test_cifar_batch_size_arithmetic(tmp_path):
    rec = write_cifar(tmp_path / "b.bin", 7)
    assert (tmp_path / "b.bin").stat().st_size == 7 * 3073
    assert 10000 * 3073 == 30_730_000
    x, y = D.read_cifar10_batch(tmp_path / "b.bin")
    assert x.shape == (7, 3, 32, 32)
    np.testing.assert_array_equal(y, rec[:, 0])
    np.testing.assert_array_equal(x[3, 1].ravel(), rec[3, 1 + 1024:1 + 2048])


def test_cifar_errors(tmp_path):
    write_cifar(tmp_path / "b.bin", 2)
    buf = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(buf[:-1])
    with pytest.raises(D.TruncatedFileError):
        D.read_cifar10_batch(tmp_path / "short.bin")
    bad = bytearray(buf)
    bad[0] = 200
    (tmp_path / "bad.bin").write_bytes(bytes(bad))
    with pytest.raises(D.MagicMismatchError):
        D.read_cifar10_batch(tmp_path / "bad.bin")


def test_cifar_directory(tmp_path):
    for i in (1, 2):
        write_cifar(tmp_path / f"data_batch_{i}.bin", 20, seed=i)
    write_cifar(tmp_path / "test_batch.bin", 10, seed=9)
    ds = D.load_cifar10(tmp_path, train_subset=None, val_fraction=0.25)
    assert ds.sizes == {"train": 30, "val": 10, "test": 10}
    assert ds.sample_shape == (3, 32, 32)
    again = D.load_cifar10(tmp_path, train_subset=None, val_fraction=0.25)
    assert again.train.x.tobytes() == ds.train.x.tobytes()


def test_synth_gaussians_deterministic_and_balanced():
    a = D.synth_gaussians(3, 5, 40, seed=7)
    b = D.synth_gaussians(3, 5, 40, seed=7)
    assert a.train.x.tobytes() == b.train.x.tobytes()
    labels = np.concatenate([a.train.y, a.val.y, a.test.y])
    assert np.bincount(labels).tolist() == [40, 40, 40]
    assert sum(a.sizes.values()) == 120


def test_synth_gaussians_linear_separability():
    ds = D.synth_gaussians(2, 2, 200, seed=0, scale=8.0)
    m = build_mlp(2, [], 2, seed=0)
    cfg = C.TrainConfig(method="dense", lr=0.1, weight_decay=0.0)
    opt = SGD(m.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    for epoch in range(10):
        for batch in D.iterate_batches(ds.train, 32, 0, epoch):
            train_step(m, batch, opt, 0.0, cfg)
    from st3.train import evaluate
    assert evaluate(m, ds.test)[1] >= 0.99


def test_flip_is_involution():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(D.hflip(D.hflip(x)), x)
    assert not np.array_equal(D.hflip(x), x)


def test_augment_shape_and_determinism():
    x = np.random.default_rng(0).standard_normal((6, 3, 8, 8)).astype(np.float32)
    pol = D.AugmentPolicy(crop_pad=2)
    a = D.augment(x, pol, 1, 2, 3)
    assert a.shape == x.shape
    assert a.tobytes() == D.augment(x, pol, 1, 2, 3).tobytes()
    assert a.tobytes() != D.augment(x, pol, 1, 2, 4).tobytes()


def test_crop_with_zero_offset_window_matches_padding():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    rng = np.random.default_rng(0)
    out = D.random_crop(x, 1, rng)
    # every crop is a 4x4 window of the zero-padded image
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = [padded[0, 0, i:i + 4, j:j + 4] for i in range(3) for j in range(3)]
    assert any(np.array_equal(out[0, 0], w) for w in windows)


def test_batch_order_depends_on_seed_and_epoch():
    split = D.Split(np.arange(20, dtype=np.float32)[:, None], np.zeros(20, np.int64))
    def order(seed, epoch):
        return np.concatenate([b[0].ravel() for b in D.iterate_batches(split, 6, seed, epoch)])
    assert np.array_equal(order(0, 1), order(0, 1))
    assert not np.array_equal(order(0, 1), order(0, 2))
    assert sorted(order(3, 4)) == list(range(20))


def test_steps_per_epoch():
    assert D.steps_per_epoch(10, 3) == 4
    assert D.steps_per_epoch(9, 3) == 3


def test_dataset_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("ST3_DATA_ROOT", str(tmp_path))
    assert D.dataset_root(None) == tmp_path
    assert D.dataset_root("/x") == D.Path("/x")
    monkeypatch.delenv("ST3_DATA_ROOT")
    assert D.dataset_root(None) is None


def test_labels_out_of_range_rejected():
    s = D.Split(np.zeros((2, 1), np.float32), np.array([0, 3]))
    with pytest.raises(ValueError):
        D.Dataset("x", 3, s, s, s)
