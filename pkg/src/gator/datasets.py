"""Datasets: IDX file pairs and seeded synthetic images, plus the training iterator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
SYNTHETIC_DEFAULTS = {"classes": 10, "n": 4096, "hw": 16, "seed": 7, "eval": None, "channels": 3, "noise": 1.0}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Normalized train/eval split; images are [N, C, H, W] float64."""

    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    classes: int
    name: str = ""

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


# -- IDX -----------------------------------------------------------------------

def parse_idx(data: bytes, name: str = "<idx>") -> np.ndarray:
    """Decode one IDX file: 0x00 0x00 <type> <ndim>, ndim big-endian u32 dims, raw big-endian values."""
    if len(data) < 4:
        raise DatasetError(f"{name}: truncated at offset 0, need a 4-byte magic number")
    z0, z1, code, ndim = struct.unpack(">4B", data[:4])
    if z0 != 0 or z1 != 0:
        bad = 0 if z0 != 0 else 1
        raise DatasetError(f"{name}: bad magic number at offset {bad} (byte 0x{data[bad]:02x}, expected 0x00)")
    if code not in IDX_TYPES:
        raise DatasetError(f"{name}: unknown element type 0x{code:02x} at offset 2")
    if ndim == 0:
        raise DatasetError(f"{name}: zero dimensions at offset 3")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{name}: truncated dimension list at offset {len(data)}, header needs {header} bytes")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(IDX_TYPES[code])
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < need:
        raise DatasetError(f"{name}: truncated data at offset {len(data)}, expected {need} bytes")
    if len(data) > need:
        raise DatasetError(f"{name}: {len(data) - need} trailing bytes after offset {need}")
    return np.frombuffer(data, dtype=dtype, offset=header, count=int(np.prod(dims))).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    for code, dt in IDX_TYPES.items():
        if np.dtype(dt).newbyteorder("=") == arr.dtype.newbyteorder("="):
            break
    else:
        raise DatasetError(f"dtype {arr.dtype} has no IDX type code")
    head = struct.pack(">4B", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(IDX_TYPES[code]).tobytes()


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes(), str(path))


def _images_from_idx(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise DatasetError(f"{name}: images must be [N, H, W] or [N, C, H, W], got {arr.shape}")
    x = arr.astype(np.float64)
    return x / 255.0 if arr.dtype == np.uint8 else x


def _labels(arr: np.ndarray, name: str, classes: int | None = None) -> np.ndarray:
    if arr.ndim != 1 or arr.dtype.kind not in "iu":
        raise DatasetError(f"{name}: labels must be a 1-D integer array")
    y = arr.astype(np.int64)
    if y.size and y.min() < 0:
        raise DatasetError(f"{name}: label {int(y.min())} out of range")
    if classes is not None and y.size and y.max() >= classes:
        raise DatasetError(f"{name}: label {int(y.max())} out of range [0, {classes})")
    return y


def load_idx_dir(path) -> Dataset:
    """Directory with train-images.idx, train-labels.idx, eval-images.idx, eval-labels.idx."""
    path = Path(path)
    parts = {}
    for split in ("train", "eval"):
        for kind in ("images", "labels"):
            f = path / f"{split}-{kind}.idx"
            if not f.exists():
                raise DatasetError(f"missing {f}")
            parts[split, kind] = read_idx(f)
    tx = _images_from_idx(parts["train", "images"], "train-images.idx")
    ex = _images_from_idx(parts["eval", "images"], "eval-images.idx")
    ty = _labels(parts["train", "labels"], "train-labels.idx")
    classes = int(ty.max()) + 1 if ty.size else 0
    ey = _labels(parts["eval", "labels"], "eval-labels.idx", classes)
    if len(tx) != len(ty) or len(ex) != len(ey):
        raise DatasetError("image and label counts differ")
    if tx.shape[1:] != ex.shape[1:]:
        raise DatasetError(f"train images {tx.shape[1:]} and eval images {ex.shape[1:]} differ in shape")
    return normalize(tx, ty, ex, ey, classes, str(path))


# -- synthetic -----------------------------------------------------------------

def parse_synthetic_spec(spec: str) -> dict:
    if not spec.startswith("synthetic:"):
        raise DatasetError(f"not a synthetic spec: {spec!r}")
    params = dict(SYNTHETIC_DEFAULTS)
    body = spec[len("synthetic:"):]
    for item in filter(None, body.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in params:
            raise DatasetError(f"bad synthetic option {item!r}; known: {', '.join(SYNTHETIC_DEFAULTS)}")
        params[key] = float(value) if key == "noise" else int(value)
    if params["eval"] is None:
        params["eval"] = params["n"] // 4
    if params["classes"] < 2 or params["n"] < 1 or params["hw"] < 4 or params["channels"] < 1:
        raise DatasetError(f"synthetic options out of range: {params}")
    return params


def synthetic_images(classes: int, n: int, hw: int, seed: int, channels: int = 3, noise: float = 1.0,
                     eval: int = 0):
    """Class-conditional Gaussian blobs.

    Each class has a random colour and a random blob position/size; samples
    jitter the blob by up to two pixels and add white noise.
    """
    rng = np.random.default_rng(seed)
    color = rng.standard_normal((classes, channels)) * 1.5
    center = rng.uniform(hw / 4, 3 * hw / 4, size=(classes, 2))
    radius = rng.uniform(hw / 8, hw / 4, size=classes)
    grid = np.arange(hw, dtype=np.float64)

    def draw(count):
        y = rng.integers(0, classes, size=count)
        shift = rng.uniform(-2, 2, size=(count, 2))
        cy = center[y, 0] + shift[:, 0]
        cx = center[y, 1] + shift[:, 1]
        r2 = 2 * radius[y] ** 2
        blob = np.exp(-((grid[None, :, None] - cy[:, None, None]) ** 2
                        + (grid[None, None, :] - cx[:, None, None]) ** 2) / r2[:, None, None])
        x = color[y][:, :, None, None] * (0.5 + blob[:, None])
        x += noise * rng.standard_normal((count, channels, hw, hw))
        return x, y

    tx, ty = draw(n)
    ex, ey = draw(eval)
    return tx, ty, ex, ey


def normalize(tx, ty, ex, ey, classes: int, name: str = "") -> Dataset:
    """Per-channel standardization with statistics from the train split only."""
    mean = tx.mean(axis=(0, 2, 3))
    std = tx.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    scale = lambda a: (a - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(scale(tx), ty, scale(ex), ey, mean, std, classes, name)


def load_dataset(source) -> Dataset:
    """``synthetic:key=value,...`` spec or a directory of IDX files."""
    if isinstance(source, str) and source.startswith("synthetic:"):
        p = parse_synthetic_spec(source)
        tx, ty, ex, ey = synthetic_images(p["classes"], p["n"], p["hw"], p["seed"], p["channels"],
                                          p["noise"], p["eval"])
        return normalize(tx, ty, ex, ey, p["classes"], source)
    path = Path(source)
    if not path.is_dir():
        raise DatasetError(f"dataset {source!r} is neither a synthetic spec nor a directory")
    return load_idx_dir(path)


# -- iteration -----------------------------------------------------------------

def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    cols = np.where(flip[:, None], np.arange(w)[::-1][None, :], np.arange(w)[None, :]) + ox[:, None]
    rows = np.arange(h)[None, :] + oy[:, None]
    return padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def iterate_batches(x, y, batch_size: int, rng: np.random.Generator, shuffle: bool = True,
                    augment_rng: np.random.Generator | None = None, crop_pad: int = 4):
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    order = rng.permutation(len(x)) if shuffle else np.arange(len(x))
    for i in range(0, len(x), batch_size):
        idx = order[i:i + batch_size]
        xb = x[idx]
        if augment_rng is not None:
            xb = augment(xb, augment_rng, crop_pad)
        yield xb, y[idx]
