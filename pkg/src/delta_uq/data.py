"""Dataset sources: MNIST-style IDX pairs, labelled CSV and synthetic Gaussian blobs."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_core import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class DatasetSource:
    """Where a dataset comes from.

    ``kind`` is ``idx_pair`` (``paths = (images, labels)``), ``csv``
    (``paths = (file,)``) or ``synthetic_blobs`` (generator fields below).
    Blob class means are drawn from ``seed``; samples from ``sample_seed`` so
    train and test splits share the same classes.
    """

    kind: str
    paths: tuple[str, ...] = ()
    n_classes: int | None = None
    subsample: int | None = None
    normalization: str = "none"
    seed: int = 0
    # synthetic_blobs only
    n_examples: int = 2000
    dims: int = 16
    support_dims: int | None = None
    separation: float = 3.0
    noise: float = 1.0
    sample_seed: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("idx_pair", "csv", "synthetic_blobs"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.normalization not in ("none", "unit_interval"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def _read_exact(f, n, path, what):
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise IDXFormatError(path, offset + len(buf), f"truncated file while reading {what}")
    return buf


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an IDX file of unsigned bytes; returns an array shaped by its header."""
    path = Path(path)
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path, "magic number"))
        if magic != expected_magic:
            raise IDXFormatError(path, 0, f"magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, path, "dimensions"))
        count = int(np.prod(dims))
        body = _read_exact(f, count, path, "data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array, magic: int):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def _subsample(n: int, size: int | None, seed: int) -> np.ndarray:
    if size is None or size >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def _load_idx(src: DatasetSource):
    if len(src.paths) != 2:
        raise ValueError("idx_pair needs (images, labels) paths")
    images = read_idx(src.paths[0], IDX_IMAGES_MAGIC)
    labels = read_idx(src.paths[1], IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n_classes = src.n_classes or 10
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        # 8 header bytes (magic + count) precede the label bytes
        raise IDXFormatError(src.paths[1], 8 + int(bad[0]), f"label {labels[bad[0]]} out of range")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if src.normalization == "unit_interval":
        x /= 255.0
    return x, labels, n_classes


def _load_csv(src: DatasetSource):
    if len(src.paths) != 1:
        raise ValueError("csv needs exactly one path")
    with open(src.paths[0], newline="") as f:
        rows = list(csv.reader(f))
    if not rows or "label" not in rows[0]:
        raise ValueError(f"{src.paths[0]}: header must contain a 'label' column")
    header = rows[0]
    li = header.index("label")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    labels = body[:, li].astype(np.int64)
    x = np.delete(body, li, axis=1)
    n_classes = src.n_classes or int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"{src.paths[0]}: label out of range [0, {n_classes})")
    if src.normalization == "unit_interval":
        raise ValueError("unit_interval normalization is only defined for byte-valued IDX data")
    return x, labels, n_classes


def blob_means(n_classes: int, dims: int, support_dims: int, separation: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    means = np.zeros((n_classes, dims))
    dirs = rng.standard_normal((n_classes, support_dims))
    means[:, :support_dims] = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return means


def _make_blobs(src: DatasetSource):
    n_classes = src.n_classes or 4
    support = src.support_dims or src.dims
    if src.normalization == "unit_interval":
        raise ValueError("unit_interval normalization is only defined for byte-valued IDX data")
    means = blob_means(n_classes, src.dims, support, src.separation, src.seed)
    rng = np.random.default_rng(src.sample_seed)
    labels = np.arange(src.n_examples) % n_classes
    x = means[labels].copy()
    x[:, :support] += src.noise * rng.standard_normal((src.n_examples, support))
    return x, labels, n_classes


def ingest(source: DatasetSource) -> Dataset:
    """Load ``source`` into a :class:`Dataset`.

    ``ids`` are row indices in the full source, so a subsample keeps the
    original indices.
    """
    if source.kind == "idx_pair":
        x, labels, n_classes = _load_idx(source)
    elif source.kind == "csv":
        x, labels, n_classes = _load_csv(source)
    else:
        x, labels, n_classes = _make_blobs(source)
    keep = _subsample(x.shape[0], source.subsample, source.seed)
    return Dataset.from_labels(x[keep], labels[keep], n_classes, ids=keep)
