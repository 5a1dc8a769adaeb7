"""Datasets: IDX files and synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import RandomSource


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DatasetError(f"{len(self.x)} inputs vs {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.x[:n], self.y[:n])


# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).str.lstrip("<>|"): k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise DatasetError(f"{path}: bad IDX magic {data[:4].hex()}")
    dtype, rank = _IDX_TYPES[data[2]], data[3]
    if len(data) < 4 + 4 * rank:
        raise DatasetError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{rank}I", data[4 : 4 + 4 * rank])
    count = int(np.prod(shape)) if rank else 0
    start = 4 + 4 * rank
    if len(data) < start + count * dtype.itemsize:
        raise DatasetError(f"{path}: truncated IDX payload (expected {count} items)")
    arr = np.frombuffer(data, dtype, count, start)
    return arr.reshape(shape)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.str.lstrip("<>|"))
    if code is None:
        raise DatasetError(f"dtype {arr.dtype} has no IDX encoding")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Images become float32 (N, 1, H, W) in [0, 1]; labels int64."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or labels.dtype != np.dtype(">u1"):
        raise DatasetError(f"{labels_path}: labels must be rank-1 unsigned bytes")
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.astype(np.float32)
    if images.dtype == np.dtype(">u1"):
        x /= 255.0
    if x.ndim == 3:
        x = x[:, None]
    ds = Dataset(np.ascontiguousarray(x), labels.astype(np.int64))
    return ds.subset(limit) if limit else ds


def class_means(classes: int, dim: int) -> np.ndarray:
    """Unit-norm class centers at equal angles in the first two coordinates."""
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = np.cos(angles)
    if dim > 1:
        means[:, 1] = np.sin(angles)
    return means


def synth_blobs(classes: int, dim: int, samples: int, noise_sigma: float, rng: RandomSource) -> Dataset:
    if classes < 2 or dim < 2 or samples < classes or noise_sigma < 0:
        raise DatasetError(
            f"invalid blob config: classes={classes}, dim={dim}, samples={samples}, sigma={noise_sigma}"
        )
    means = class_means(classes, dim)
    y = np.arange(samples) % classes
    y = y[rng.permutation(samples)]
    x = means[y] + noise_sigma * rng.normal((samples, dim))
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def make_digits_idx(out_dir, n_train: int = 5000, n_test: int = 1000, seed: int = 0) -> dict[str, Path]:
    """Write a 10-class 28x28 IDX dataset built from scikit-learn's bundled
    8x8 handwritten digits (upsampled and randomly shifted/rotated).

    Train and test images come from disjoint source digits.
    """
    from PIL import Image
    from sklearn.datasets import load_digits

    digits = load_digits()
    src = (digits.images / 16.0 * 255.0).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(src))
    split = int(0.75 * len(src))
    pools = {"train": order[:split], "test": order[split:]}

    def render(idx):
        img = Image.fromarray(src[idx]).resize((20, 20), Image.BILINEAR)
        img = img.rotate(float(rng.uniform(-12, 12)), resample=Image.BILINEAR)
        canvas = Image.new("L", (28, 28))
        dx, dy = rng.integers(2, 7, size=2)
        canvas.paste(img, (int(dx), int(dy)))
        return np.asarray(canvas, dtype=np.uint8)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for part, n in (("train", n_train), ("test", n_test)):
        pool = pools[part]
        pick = pool[:n] if n <= len(pool) else np.concatenate([pool, rng.choice(pool, n - len(pool))])
        imgs = np.stack([render(i) for i in pick])
        paths[f"{part}_images"] = out_dir / f"{part}-images-idx3-ubyte"
        paths[f"{part}_labels"] = out_dir / f"{part}-labels-idx1-ubyte"
        write_idx(paths[f"{part}_images"], imgs)
        write_idx(paths[f"{part}_labels"], labels[pick])
    return paths
