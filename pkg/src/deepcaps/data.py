"""Dataset loaders (IDX, CIFAR-10 binary, raw npz), preprocessing and batching.

Images are float32 ``[N, H, W, C]`` in ``[0, 1]``; labels are ``int64``.

Expected layout under a data directory::

    mnist / fashion-mnist:  train-images-idx3-ubyte[.gz]  train-labels-idx1-ubyte[.gz]
                            t10k-images-idx3-ubyte[.gz]   t10k-labels-idx1-ubyte[.gz]
    cifar10:                data_batch_{1..5}.bin  test_batch.bin
                            (optionally inside cifar-10-batches-bin/)
    npz (e.g. SVHN):        train.npz  test.npz, each with ``x`` [N,H,W,C] uint8
                            or float in [0,1] and ``y`` [N] integer labels
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from deepcaps.errors import (BadMagicError, ConfigError, CountMismatchError, DataFormatError,
                             ShapeError, TruncatedFileError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class Sample:
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, count: int | None, seed: int = 0) -> "Dataset":
        """First ``count`` samples of a seeded permutation (all samples if ``count`` is None)."""
        if count is None or count >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:count])
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name, self.split)


def _read(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: truncated IDX dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{what}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist",
             split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: IDX image file must be 3-dimensional, got {images.ndim}")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images in {images_path} but {len(labels)} labels in {labels_path}")
    imgs = (images.astype(np.float32) / 255.0)[..., None]
    return Dataset(imgs, labels.astype(np.int64), num_classes, name, split)


def write_idx_images(path, images_u8: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def parse_cifar10(raw: bytes, what: str = "cifar10"):
    if len(raw) % CIFAR_RECORD:
        raise TruncatedFileError(f"{what}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    planes = rec[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_bin(directory, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches (label byte + channel-planar RGB) into channels-last images."""
    directory = str(directory)
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(sub):
        directory = sub
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    images, labels = [], []
    for nm in names:
        path = os.path.join(directory, nm)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        x, y = parse_cifar10(_read(path), path)
        images.append(x)
        labels.append(y)
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, "cifar10", split)


def load_npz(path, num_classes: int | None = None, name: str = "npz", split: str = "train") -> Dataset:
    """Generic raw-tensor import: ``x`` ``[N,H,W,C]`` (uint8 or [0,1] floats), ``y`` ``[N]``."""
    with np.load(path) as z:
        x, y = z["x"], z["y"].astype(np.int64).reshape(-1)
    if x.ndim == 3:
        x = x[..., None]
    x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32)
    if x.min(initial=0) < 0 or x.max(initial=0) > 1:
        raise DataFormatError(f"{path}: pixel values outside [0, 1]")
    return Dataset(x, y, num_classes or int(y.max()) + 1, name, split)


def _find(directory, stem):
    for cand in (stem, stem + ".gz"):
        p = os.path.join(directory, cand)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(os.path.join(directory, stem))


def load_dataset(name: str, data_dir, split: str = "train") -> Dataset:
    name = name.lower()
    if name in ("mnist", "fashion-mnist", "fmnist"):
        prefix = "train" if split == "train" else "t10k"
        return load_idx(_find(data_dir, f"{prefix}-images-idx3-ubyte"),
                        _find(data_dir, f"{prefix}-labels-idx1-ubyte"), 10, name, split)
    if name == "cifar10":
        return load_cifar10_bin(data_dir, split)
    if name in ("npz", "svhn"):
        return load_npz(os.path.join(data_dir, f"{split}.npz"), 10 if name == "svhn" else None, name, split)
    raise ConfigError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: np.ndarray, size=(64, 64)) -> np.ndarray:
    """Bilinear resize of an ``[H, W, C]`` image (half-pixel centres, edge clamped).

    Output pixel ``j`` samples source coordinate ``(j + 0.5) * H / H' - 0.5``.
    The result stays inside the input's value range.
    """
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeError(f"resize_bilinear expects [H, W, C], got shape {img.shape}")
    oh, ow = size

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float64)

    y0, y1, wy = axis_weights(img.shape[0], oh)
    x0, x1, wx = axis_weights(img.shape[1], ow)
    f = img.astype(np.float64)
    top = f[y0] * (1 - wy)[:, None, None] + f[y1] * wy[:, None, None]
    out = top[:, x0] * (1 - wx)[None, :, None] + top[:, x1] * wx[None, :, None]
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by ``(dy, dx)`` pixels (positive = down/right), zero filled."""
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment_shift(img: np.ndarray, max_shift: int, rng: np.random.Generator, flip: bool = False) -> np.ndarray:
    """Random translation in ``[-max_shift, max_shift]`` per axis, optional random horizontal flip."""
    if max_shift:
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        img = shift_image(img, int(dy), int(dx))
    if flip and rng.random() < 0.5:
        img = img[:, ::-1]
    return img


def augment_batch(images: np.ndarray, max_shift: int, rng, flip: bool = False) -> np.ndarray:
    if not max_shift and not flip:
        return images
    return np.stack([augment_shift(im, max_shift, rng, flip) for im in images])


def one_hot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0):
    """Yield ``(images, one_hot_labels, indices)``; the order depends only on ``(seed, epoch)``.

    ``shuffle_seed=None`` keeps dataset order. The last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_order(n, shuffle_seed, epoch)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.images[idx], one_hot(dataset.labels[idx], dataset.num_classes), idx


def preprocess(dataset: Dataset, resize_to=None) -> Dataset:
    """Resize every image once (used for 32x32 colour inputs going to 64x64)."""
    if resize_to is None or dataset.image_shape[:2] == tuple(resize_to):
        return dataset
    imgs = np.stack([resize_bilinear(im, resize_to) for im in dataset.images]).astype(np.float32)
    return Dataset(imgs, dataset.labels, dataset.num_classes, dataset.name, dataset.split)
