"""Dataset loading and preparation.

Bit-exact loaders for the IDX image/label format (MNIST, Fashion-MNIST) and
the CIFAR-10 binary format (3073-byte records: 1 label byte + 3072 pixel
bytes, channel-major).  Gzipped files are handled transparently by suffix.
Pixel values are scaled to [0,1] by dividing by 255 unless ``normalize`` is
turned off.

Splits and subsampling are deterministic functions of (seed, inputs): the
seeded permutation generator in :mod:`nsdnet.ndcore` drives every random
choice, so two runs with the same seed select identical rows.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndcore
from .ndcore import Rng, derive

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
ZCA_DEFAULT_EPSILON = 1e-5


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


@dataclass
class Dataset:
    """Flat image matrix (N x D) with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str

    def __post_init__(self):
        self.images = ndcore.as_matrix(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatchError(
                f"{self.images.shape[0]} images but "
                f"{self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise DatasetError(
                f"labels outside [0,{self.class_count})")

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def dim(self):
        return self.images.shape[1]

    def take(self, indices, name=None):
        """New dataset holding the given rows, in the given order."""
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx],
                       self.class_count, name or self.name)


@dataclass
class SplitSpec:
    """How to carve a training source into train / unseen-validation parts."""

    budget: int
    train_frac: float = 0.8
    unseen_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if abs(self.train_frac + self.unseen_frac - 1.0) > 1e-9:
            raise DatasetError("train_frac + unseen_frac must equal 1")
        if self.budget < 1:
            raise DatasetError("budget must be positive")


def _read_bytes(path):
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def load_idx(images_path, labels_path, name="idx", class_count=None,
             normalize=True):
    """Parse an IDX image/label file pair (the MNIST distribution format).

    Big-endian headers: images 0x00000803 then u32 count/rows/cols and raw
    bytes; labels 0x00000801 then u32 count and raw bytes.  The two counts
    must match.
    """
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    if len(img_raw) < 16:
        raise TruncatedFileError(f"{images_path}: too short for IDX header")
    if len(lab_raw) < 8:
        raise TruncatedFileError(f"{labels_path}: too short for IDX header")
    magic, count, rows, cols = struct.unpack_from(">IIII", img_raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagicError(
            f"{images_path}: image magic 0x{magic:08x}, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}")
    lab_magic, lab_count = struct.unpack_from(">II", lab_raw, 0)
    if lab_magic != IDX_LABEL_MAGIC:
        raise BadMagicError(
            f"{labels_path}: label magic 0x{lab_magic:08x}, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(img_raw) - 16 != count * rows * cols:
        raise TruncatedFileError(
            f"{images_path}: {len(img_raw) - 16} pixel bytes for "
            f"{count}x{rows}x{cols}")
    if len(lab_raw) - 8 != lab_count:
        raise TruncatedFileError(
            f"{labels_path}: {len(lab_raw) - 8} label bytes for {lab_count}")
    if count != lab_count:
        raise CountMismatchError(
            f"{count} images but {lab_count} labels")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float64)
    if normalize:
        images /= 255.0
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, class_count, name)


def write_idx(images_u8, labels_u8, images_path, labels_path):
    """Write an IDX pair; images_u8 is (N, rows, cols) uint8."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels_u8.tobytes())


def load_cifar10(batch_paths, name="cifar10", class_count=10, normalize=True):
    """Parse one or more CIFAR-10 binary batch files into a flat dataset.

    Each record is 3073 bytes (label + 3072 channel-major pixels); pixel
    order is preserved exactly as stored.
    """
    all_labels = []
    all_images = []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise TruncatedFileError(
                f"{path}: {len(raw)} bytes is not a multiple of "
                f"{CIFAR_RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(
            -1, CIFAR_RECORD_BYTES)
        all_labels.append(records[:, 0].astype(np.int64))
        all_images.append(records[:, 1:])
    labels = np.concatenate(all_labels)
    images = np.concatenate(all_images).astype(np.float64)
    if normalize:
        images /= 255.0
    return Dataset(images, labels, class_count, name)


def write_cifar10(images_u8, labels_u8, path):
    """Write a CIFAR-10 binary batch; images_u8 is (N, 3072) uint8."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    records = np.concatenate([labels_u8[:, None], images_u8], axis=1)
    Path(path).write_bytes(records.tobytes())


def split_indices(n, spec):
    """Deterministic (train, unseen) index arrays for a source of n rows."""
    if spec.budget > n:
        raise DatasetError(f"budget {spec.budget} exceeds dataset size {n}")
    rng = Rng(derive(spec.seed, "split"))
    drawn = rng.permutation(n)[:spec.budget]
    n_train = int(np.floor(spec.budget * spec.train_frac + 0.5))
    train_idx = drawn[:n_train]
    unseen_idx = drawn[n_train:]
    if len(train_idx) == 0 or len(unseen_idx) == 0:
        raise DatasetError(
            f"split of budget {spec.budget} with train_frac "
            f"{spec.train_frac} leaves an empty part; the unseen-validation "
            f"set is mandatory")
    return train_idx, unseen_idx


def split(dataset, spec):
    """Draw spec.budget rows (seeded shuffle) and split train / unseen."""
    train_idx, unseen_idx = split_indices(dataset.n, spec)
    return (dataset.take(train_idx, f"{dataset.name}:train"),
            dataset.take(unseen_idx, f"{dataset.name}:unseen"))


def subsample(dataset, n, seed, stratified=None):
    """Seeded random subsample of n rows.

    ``stratified=None`` enables stratification automatically below 1000 rows
    (tiny random samples can miss classes entirely, which would make
    per-class masks undefined).  Stratified sampling gives per-class counts
    differing by at most one, with remainders assigned to the lowest class
    indices; the combined selection is then shuffled.
    """
    if n > dataset.n:
        raise DatasetError(f"subsample of {n} from {dataset.n} rows")
    if stratified is None:
        stratified = n < 1000
    rng = Rng(derive(seed, "subsample"))
    if not stratified:
        return dataset.take(rng.permutation(dataset.n)[:n],
                            f"{dataset.name}:sub{n}")
    c = dataset.class_count
    if n < c:
        raise DatasetError(
            f"stratified subsample of {n} rows cannot cover {c} classes")
    base, rem = divmod(n, c)
    chosen = []
    for cls in range(c):
        rows = np.flatnonzero(dataset.labels == cls)
        want = base + (1 if cls < rem else 0)
        if want > len(rows):
            raise DatasetError(
                f"class {cls} has {len(rows)} rows, need {want}")
        chosen.append(rows[rng.permutation(len(rows))[:want]])
    pooled = np.concatenate(chosen)
    return dataset.take(pooled[rng.permutation(len(pooled))],
                        f"{dataset.name}:sub{n}")


@dataclass
class ZcaTransform:
    """Reusable symmetric whitening transform fit on training data."""

    mean: np.ndarray
    matrix: np.ndarray

    def apply(self, images):
        return (np.asarray(images, dtype=np.float64) - self.mean) @ self.matrix


def zca_whiten(train_images, epsilon=ZCA_DEFAULT_EPSILON):
    """Symmetric (ZCA) whitening: U diag(1/sqrt(lam+eps)) U^T on centered data.

    Returns (whitened, transform); the transform can be reapplied to test
    data.  Covariance uses the 1/N convention.  Eigendecomposition is the
    LAPACK symmetric solver behind numpy.linalg.eigh.
    """
    x = ndcore.as_matrix(train_images)
    if x.shape[0] < 2:
        raise DatasetError("zca_whiten needs at least 2 rows")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    lam, u = np.linalg.eigh(cov)
    if not np.all(np.isfinite(lam)):
        raise DatasetError("non-finite eigenvalues in covariance")
    lam = np.maximum(lam, 0.0)  # clip tiny negative roundoff
    matrix = (u * (1.0 / np.sqrt(lam + epsilon))) @ u.T
    transform = ZcaTransform(mean=mean, matrix=matrix)
    return centered @ matrix, transform


def make_synthetic_images(train_n=10_000, test_n=2_000, dim=784,
                          class_count=10, noise=0.5, contrast=0.35, seed=0,
                          name="synthetic"):
    """Deterministic image-like classification data built from class templates.

    Every class gets a template sharing a common background; samples are the
    template plus Gaussian pixel noise, clipped to [0,1].  Labels are
    balanced.  Intended as a stand-in when no real dataset files are
    available; the generator is a pure function of its arguments.
    """
    rng = Rng(derive(seed, "synthetic-data"))
    background = rng.uniforms(dim) * (1.0 - contrast)
    templates = background + rng.uniforms((class_count, dim)) * contrast

    def draw(n, tag):
        labels = np.arange(n, dtype=np.int64) % class_count
        labels = labels[rng.permutation(n)]
        images = templates[labels] + noise * rng.normals((n, dim))
        np.clip(images, 0.0, 1.0, out=images)
        return Dataset(images, labels, class_count, f"{name}:{tag}")

    return draw(train_n, "train"), draw(test_n, "test")


def make_toy_blobs(train_n=200, test_n=200, seed=0, name="toy"):
    """Linearly separable 2-feature, 2-class Gaussian blobs."""
    rng = Rng(derive(seed, "toy-data"))

    def draw(n, tag):
        half = n // 2
        x = np.vstack([
            rng.normals((half, 2)) * 0.4 + np.array([-1.2, -1.2]),
            rng.normals((n - half, 2)) * 0.4 + np.array([1.2, 1.2]),
        ])
        y = np.array([0] * half + [1] * (n - half), dtype=np.int64)
        order = rng.permutation(n)
        return Dataset(x[order], y[order], 2, f"{name}:{tag}")

    return draw(train_n, "train"), draw(test_n, "test")
