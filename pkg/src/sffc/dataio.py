"""Dataset ingestion, whitening, augmentation and deterministic batching.

Loaders parse the two on-disk formats directly: big-endian IDX for MNIST-style
data and the record-per-image binary layout used by CIFAR-10/100.  Whitening
is fit on the training split only; augmentation operates on raw [0,1] images
and whitening is applied afterwards, per batch, since it is a fixed linear
map.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "val_images": "t10k-images-idx3-ubyte",
    "val_labels": "t10k-labels-idx1-ubyte",
}

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = "test_batch.bin"
CIFAR100_TRAIN = "train.bin"
CIFAR100_TEST = "test.bin"

# byte sizes of the reference distribution files, checked by prepare-data
EXPECTED_SIZES = {
    "mnist": {
        MNIST_FILES["train_images"]: 16 + 60000 * 28 * 28,
        MNIST_FILES["train_labels"]: 8 + 60000,
        MNIST_FILES["val_images"]: 16 + 10000 * 28 * 28,
        MNIST_FILES["val_labels"]: 8 + 10000,
    },
    "cifar10": {name: 10000 * 3073 for name in CIFAR10_TRAIN + [CIFAR10_TEST]},
    "cifar100": {CIFAR100_TRAIN: 50000 * 3074, CIFAR100_TEST: 10000 * 3074},
}


class DataFormatError(ValueError):
    """A dataset file is missing, truncated or has a malformed header."""


@dataclass
class Dataset:
    images: np.ndarray          # [M, C, H, W] float32 in [0, 1]
    labels: np.ndarray          # [M] int64
    split: str                  # train | val
    name: str
    ids: np.ndarray | None = None  # stable per-example ids for noise keying

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, n: int) -> "Dataset":
        """First n examples (loader order is deterministic)."""
        n = min(n, len(self))
        return Dataset(self.images[:n], self.labels[:n], self.split, self.name, self.ids[:n])

    def permuted(self, perm: np.ndarray) -> "Dataset":
        """Reordered view carrying ids along, for order-invariance checks."""
        return Dataset(self.images[perm], self.labels[perm], self.split, self.name, self.ids[perm])


@dataclass
class ZcaTransform:
    mean: np.ndarray      # [d]
    matrix: np.ndarray    # [d, d], symmetric
    epsilon: float


@dataclass
class AugmentSpec:
    crop_padding: int = 0
    hflip: bool = False


# -- IDX (MNIST) ---------------------------------------------------------------


def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError(f"{path}: truncated IDX image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"{path}: bad IDX image magic 0x{magic:08x}")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise DataFormatError(f"{path}: truncated IDX image payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    return data


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError(f"{path}: truncated IDX label header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"{path}: bad IDX label magic 0x{magic:08x}")
        payload = f.read(count)
        if len(payload) != count:
            raise DataFormatError(f"{path}: truncated IDX label payload")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def write_idx_images(path: str, images: np.ndarray):
    """uint8 [M, H, W] -> IDX file (big-endian header, magic 0x803)."""
    m, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, m, h, w))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: str, labels: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_mnist(data_dir: str) -> tuple[Dataset, Dataset]:
    """Parse the four standard IDX files; pixels scaled to [0, 1]."""
    out = []
    for split, img_key, lbl_key in (
        ("train", "train_images", "train_labels"),
        ("val", "val_images", "val_labels"),
    ):
        imgs = _read_idx_images(os.path.join(data_dir, MNIST_FILES[img_key]))
        labels = _read_idx_labels(os.path.join(data_dir, MNIST_FILES[lbl_key]))
        if imgs.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"mnist {split}: {imgs.shape[0]} images but {labels.shape[0]} labels"
            )
        if imgs.shape[1:] != (28, 28):
            raise DataFormatError(f"mnist {split}: expected 28x28 images, got {imgs.shape[1:]}")
        images = (imgs.astype(np.float32) / 255.0)[:, None, :, :]
        out.append(Dataset(images, labels, split, "mnist"))
    return out[0], out[1]


# -- CIFAR binary ---------------------------------------------------------------


def _read_cifar_file(path: str, variant: str) -> tuple[np.ndarray, np.ndarray]:
    record = 3073 if variant == "c10" else 3074
    size = os.path.getsize(path)
    if size % record:
        raise DataFormatError(f"{path}: size {size} is not a multiple of record size {record}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, record)
    if variant == "c10":
        labels = raw[:, 0].astype(np.int64)
        pixels = raw[:, 1:]
    else:
        labels = raw[:, 1].astype(np.int64)  # fine label; byte 0 is the coarse one
        pixels = raw[:, 2:]
    images = pixels.reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar(data_dir: str, variant: str) -> tuple[Dataset, Dataset]:
    """CIFAR-10 (5 train batches) or CIFAR-100 (train.bin/test.bin)."""
    if variant not in ("c10", "c100"):
        raise ValueError(f"variant must be c10 or c100, got {variant!r}")
    name = "cifar10" if variant == "c10" else "cifar100"
    if variant == "c10":
        train_files = [os.path.join(data_dir, f) for f in CIFAR10_TRAIN]
        test_file = os.path.join(data_dir, CIFAR10_TEST)
    else:
        train_files = [os.path.join(data_dir, CIFAR100_TRAIN)]
        test_file = os.path.join(data_dir, CIFAR100_TEST)
    imgs, labels = [], []
    for path in train_files:
        i, l = _read_cifar_file(path, variant)
        imgs.append(i)
        labels.append(l)
    train = Dataset(np.concatenate(imgs), np.concatenate(labels), "train", name)
    vi, vl = _read_cifar_file(test_file, variant)
    val = Dataset(vi, vl, "val", name)
    return train, val


# -- ZCA whitening ----------------------------------------------------------------


def zca_fit(train_images: np.ndarray, epsilon: float = 1e-2) -> ZcaTransform:
    """W = U (Lambda + eps I)^(-1/2) U^T from the pixel covariance.

    Fit on the training split only.  Computation runs in float64; the stored
    matrix is float32 since it multiplies float32 batches.
    """
    m = train_images.shape[0]
    flat = train_images.reshape(m, -1).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = (centered.T @ centered) / m
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    floor = -1e-6 * max(1.0, float(eigvals.max()))
    if eigvals.min() < floor:
        raise DataFormatError(f"covariance not PSD after symmetrization (min eig {eigvals.min():.3e})")
    eigvals = np.clip(eigvals, 0.0, None)
    w = (eigvecs * (1.0 / np.sqrt(eigvals + epsilon))) @ eigvecs.T
    return ZcaTransform(mean=mean.astype(np.float32), matrix=w.astype(np.float32), epsilon=epsilon)


def zca_apply(t: ZcaTransform, images: np.ndarray) -> np.ndarray:
    shape = images.shape
    flat = images.reshape(shape[0], -1)
    if flat.shape[1] != t.mean.shape[0]:
        raise ValueError(f"transform expects {t.mean.shape[0]} dims, got {flat.shape[1]}")
    return ((flat - t.mean) @ t.matrix).reshape(shape)


# -- augmentation -------------------------------------------------------------------


def augment(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad + random crop back to size, then random horizontal flip.

    Offsets are drawn first for the whole batch, then flip decisions, so the
    draw order is independent of image content.
    """
    if spec.crop_padding == 0 and not spec.hflip:
        return images
    b, c, h, w = images.shape
    pad = spec.crop_padding
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2)) if pad else np.zeros((b, 2), dtype=np.int64)
    flips = rng.random(b) < 0.5 if spec.hflip else np.zeros(b, dtype=bool)
    if pad:
        padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
        padded[:, :, pad : pad + h, pad : pad + w] = images
    else:
        padded = images
    out = np.empty_like(images)
    for i in range(b):
        dy, dx = offsets[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# -- batching --------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray


def batch_iterator(dataset: Dataset, batch_size: int = 128, shuffle: bool = False,
                   seed: int = 0, key: tuple[int, ...] = ()):
    """Deterministic batches; the final short batch is kept.

    The shuffle permutation depends only on (seed, key), so a given
    (epoch, phase, ...) key always reproduces the same order.
    """
    m = len(dataset)
    if m == 0:
        raise ValueError("empty dataset")
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5F, *key)))
        order = rng.permutation(m)
    else:
        order = np.arange(m)
    for start in range(0, m, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx], dataset.ids[idx])


# -- validation (prepare-data) -----------------------------------------------------------


def validate_dataset_dir(data_dir: str, dataset: str, strict_sizes: bool = True) -> list[str]:
    """Structural checks on a dataset directory; returns a list of problems."""
    problems: list[str] = []
    expected = EXPECTED_SIZES.get(dataset)
    if expected is None:
        return [f"unknown dataset {dataset!r}"]
    for fname, size in expected.items():
        path = os.path.join(data_dir, fname)
        if not os.path.exists(path):
            problems.append(f"missing file: {fname}")
            continue
        actual = os.path.getsize(path)
        if strict_sizes and actual != size:
            problems.append(f"{fname}: expected {size} bytes, found {actual}")
    if problems:
        return problems
    try:
        if dataset == "mnist":
            train, val = load_mnist(data_dir)
        else:
            train, val = load_cifar(data_dir, "c10" if dataset == "cifar10" else "c100")
        if strict_sizes:
            want_train = 60000 if dataset == "mnist" else 50000
            if len(train) != want_train or len(val) != 10000:
                problems.append(f"unexpected example counts: {len(train)} train / {len(val)} val")
    except (DataFormatError, OSError) as exc:
        problems.append(str(exc))
    return problems
