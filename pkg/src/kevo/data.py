"""Dataset containers and loaders: IDX files, seeded synthetic blobs, raw-tensor manifests."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import SeededRng
from .errors import DataError

IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in IDX_DTYPES or ndim == 0:
        raise DataError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(IDX_DTYPES[dtype_code])
    expected = header + math.prod(dims) * dtype.itemsize
    if len(raw) < expected:
        raise DataError(f"{path}: truncated IDX file, expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise DataError(f"{path}: {len(raw) - expected} trailing bytes after IDX data "
                        f"(expected {expected} bytes, got {len(raw)})")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
            np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}[array.dtype.newbyteorder("=")]
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def load_idx_pair(images_path, labels_path, limit: int | None = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: labels must be one-dimensional, got {labels.ndim} dims")
    if len(images) != len(labels):
        raise DataError(f"image/label count mismatch: {len(images)} images, {len(labels)} labels")
    x = images.astype(np.float32)
    if images.dtype.kind == "u":
        x /= 255.0
    if x.ndim == 3:
        x = x[:, None]
    if limit is not None:
        x, labels = x[:limit], labels[:limit]
    return Dataset(np.ascontiguousarray(x), labels.astype(np.int64))


def synthetic_blobs(classes: int, per_class: int, shape=(3, 16, 16), seed: int = 0,
                    noise: float = 1.0, signal: float = 1.0, grid: int | None = 4,
                    stream: str = "blobs") -> Dataset:
    """Seeded Gaussian class clusters.

    Each class gets a prototype; samples are ``signal * prototype + noise *
    N(0, 1)``. For image shapes the prototype is a random ``grid x grid``
    pattern upsampled to full resolution, giving spatial structure a CNN can
    exploit. Samples are ordered class by class.
    """
    rng = SeededRng(seed, stream)
    shape = tuple(shape)
    protos = []
    for c in range(classes):
        r = rng.child(f"class{c}")
        if len(shape) == 3 and grid:
            ch, h, w = shape
            coarse = r.normal(0.0, 1.0, (ch, grid, grid))
            proto = np.kron(coarse, np.ones((math.ceil(h / grid), math.ceil(w / grid))))[:, :h, :w]
        else:
            proto = r.normal(0.0, 1.0, shape)
        protos.append(proto)
    noise_rng = rng.child("noise")
    xs = np.stack([signal * protos[c] for c in range(classes) for _ in range(per_class)])
    xs = xs + noise * noise_rng.normal(0.0, 1.0, xs.shape)
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(xs.astype(np.float32), y.astype(np.int64))


def load_tensor_manifest(path) -> tuple[Dataset, Dataset]:
    """CSV manifest with columns ``path,label,channels,height,width[,split]``.

    Each path points at raw little-endian float32 CHW data, relative to the
    manifest's directory. Rows with ``split == eval`` form the eval set.
    """
    path = Path(path)
    train, evals = ([], []), ([], [])
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "label", "channels", "height", "width"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest missing columns {sorted(missing)}")
        for row in reader:
            shape = (int(row["channels"]), int(row["height"]), int(row["width"]))
            f = path.parent / row["path"]
            raw = f.read_bytes()
            expected = 4 * math.prod(shape)
            if len(raw) != expected:
                raise DataError(f"{f}: expected {expected} bytes, got {len(raw)}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            dest = evals if row.get("split", "train") == "eval" else train
            dest[0].append(arr)
            dest[1].append(int(row["label"]))

    def build(pair):
        if not pair[0]:
            return Dataset(np.zeros((0, 1), np.float32), np.zeros(0, np.int64))
        return Dataset(np.stack(pair[0]).astype(np.float32), np.array(pair[1], dtype=np.int64))

    return build(train), build(evals)


def split_dataset(data: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split into train and eval subsets."""
    rng = SeededRng(seed, "split")
    train_idx, eval_idx = [], []
    for c in np.unique(data.y):
        idx = np.flatnonzero(data.y == c)
        idx = idx[rng.permutation(len(idx))]
        n_eval = int(round(eval_fraction * len(idx)))
        eval_idx.extend(idx[:n_eval])
        train_idx.extend(idx[n_eval:])
    return data.subset(np.sort(train_idx)), data.subset(np.sort(eval_idx))
