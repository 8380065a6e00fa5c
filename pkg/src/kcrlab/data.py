"""Synthetic Gaussian-mixture image classes and IDX-format dataset files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ParseError
from .numerics import Rng

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
              np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "val_images": "val-images-idx3-ubyte",
    "val_labels": "val-labels-idx1-ubyte",
}


def write_idx(path, array):
    arr = np.asarray(array)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ArgumentError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=_IDX_TYPES[code]).tobytes())


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise ParseError(f"{path}: bad IDX magic")
    ndim = raw[3]
    head = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_TYPES[raw[2]]
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - head != count * dtype.itemsize:
        raise ParseError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def n(self) -> int:
        return len(self.train_y)


def to_float(images) -> np.ndarray:
    """uint8 ``n x H x W`` -> float ``n x H x W x 1`` in [0, 1]."""
    x = np.asarray(images, dtype=np.float64)
    if np.asarray(images).dtype == np.uint8:
        x = x / 255.0
    if x.ndim == 3:
        x = x[..., None]
    return x


def class_templates(classes, image_side, rng: Rng, blobs=3):
    yy, xx = np.mgrid[0:image_side, 0:image_side].astype(np.float64)
    temps = np.zeros((classes, image_side, image_side))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(2) * (image_side - 1)
            sigma = 1.0 + rng.uniform(()) * image_side / 6.0
            amp = 0.5 + 0.5 * rng.uniform(())
            temps[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        temps[c] /= temps[c].max()
    return temps


def _render(temps, labels, noise, rng: Rng):
    imgs = temps[labels] + noise * rng.normal((len(labels),) + temps.shape[1:])
    return np.clip(np.rint(64.0 + 128.0 * imgs), 0, 255).astype(np.uint8)


def gen_data(classes=4, n=2048, image_side=16, noise=0.3, seed=0, n_val=0, blobs=3) -> Dataset:
    """Gaussian-blob class templates plus pixel noise, quantized to uint8.

    Labels are balanced then shuffled. Train and validation share templates.
    """
    if n < classes:
        raise ArgumentError(f"need n >= classes ({n} < {classes})")
    root = Rng(seed)
    temps = class_templates(classes, image_side, root.fork(0), blobs)
    out = []
    for k, size in enumerate((n, n_val)):
        r = root.fork(k + 1)
        labels = (np.arange(size) % classes)[r.permutation(size)] if size else np.zeros(0, np.int64)
        out.append((_render(temps, labels, noise, r), labels.astype(np.uint8)))
    return Dataset(out[0][0], out[0][1], out[1][0], out[1][1])


def save_dataset(ds: Dataset, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: out_dir / v for k, v in FILES.items()}
    write_idx(paths["train_images"], ds.train_x)
    write_idx(paths["train_labels"], ds.train_y)
    write_idx(paths["val_images"], ds.val_x)
    write_idx(paths["val_labels"], ds.val_y)
    return paths


def load_dataset(paths: dict) -> Dataset:
    arrs = {k: read_idx(paths[k]) for k in FILES}
    for split in ("train", "val"):
        if len(arrs[f"{split}_images"]) != len(arrs[f"{split}_labels"]):
            raise ParseError(f"{split} images and labels differ in length")
    return Dataset(arrs["train_images"], arrs["train_labels"].astype(np.int64),
                   arrs["val_images"], arrs["val_labels"].astype(np.int64))
