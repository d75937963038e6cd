"""Dataset loading: IDX (MNIST-style), CSV, and a synthetic generator.

All loaders produce float64 features and int64 labels. Layer inputs are
quantized with unsigned specs, so feature values are expected to be
non-negative; the synthetic generator emits values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_IDX_DTYPES = {
    0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    x: np.ndarray  # (N, D) or (N, C, H, W)
    y: np.ndarray  # (N,) int labels

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"feature/label count mismatch: {len(self.x)} vs {len(self.y)}")
        if len(self.x) == 0:
            raise ValueError("empty dataset")
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1


def load_idx(path) -> np.ndarray:
    """Read a single IDX-format array (big-endian, MNIST convention)."""
    with open(path, "rb") as f:
        zero, dtype_code, ndim = struct.unpack(">HBB", f.read(4))
        if zero != 0 or dtype_code not in _IDX_DTYPES:
            raise ValueError(f"{path}: not an IDX file")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=_IDX_DTYPES[dtype_code])
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return data.reshape(dims)


def save_idx(path, arr: np.ndarray) -> None:
    """Write an array in IDX format (uint8 or big-endian float32)."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        code = 0x08
        payload = arr.tobytes()
    else:
        code = 0x0D
        payload = arr.astype(">f4").tobytes()
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, code, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(payload)


def load_idx_dataset(images_path, labels_path, flatten: bool = True) -> Dataset:
    """Pair of IDX files (images + labels); uint8 images rescale to [0, 1]."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: labels must be 1-D")
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    if flatten:
        x = x.reshape(len(x), -1)
    elif x.ndim == 3:
        x = x[:, None, :, :]  # add channel axis
    return Dataset(x, labels.astype(np.int64))


def load_csv_dataset(path) -> Dataset:
    """CSV with feature columns first and an integer label column last."""
    rows = np.genfromtxt(path, delimiter=",", dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if np.isnan(rows).any():
        raise ValueError(f"{path}: non-numeric or missing values in CSV")
    return Dataset(rows[:, :-1], rows[:, -1].astype(np.int64))


def make_blobs(n_samples: int, n_features: int = 784, n_classes: int = 10,
               noise: float = 0.8, seed: int = 0,
               image_shape: tuple | None = None) -> Dataset:
    """Gaussian class blobs with centers in the unit cube, clipped to [0, 1].

    `noise` controls class overlap; around 0.8 the reference MLP lands in
    the high-90s without saturating at 100%. Pass `image_shape` (C, H, W)
    to get NCHW output for convolutional models.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, n_features))
    y = rng.integers(0, n_classes, size=n_samples)
    x = centers[y] + rng.normal(0.0, noise, size=(n_samples, n_features))
    x = np.clip(x, 0.0, 1.0)
    if image_shape is not None:
        c, h, w = image_shape
        if c * h * w != n_features:
            raise ValueError(f"image_shape {image_shape} incompatible with {n_features} features")
        x = x.reshape(n_samples, c, h, w)
    return Dataset(x, y)


def make_blob_split(n_train: int, n_test: int, n_features: int = 784,
                    n_classes: int = 10, noise: float = 0.8, seed: int = 0,
                    image_shape: tuple | None = None) -> tuple[Dataset, Dataset]:
    """One blob population split into train/test (shared class centers)."""
    full = make_blobs(n_train + n_test, n_features, n_classes, noise, seed,
                      image_shape)
    return (Dataset(full.x[:n_train], full.y[:n_train]),
            Dataset(full.x[n_train:], full.y[n_train:]))


def batches(data: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (x, y) minibatches; shuffled when an rng is given."""
    idx = np.arange(len(data))
    if rng is not None:
        rng.shuffle(idx)
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        yield data.x[sel], data.y[sel]
