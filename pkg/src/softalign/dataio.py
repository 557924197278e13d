"""Dataset ingestion: CIFAR-10/100 binary, MNIST IDX and uint8 NPY files.

Images are kept as float64 rows in raw pixel units ([0, 1]); standardisation
is a separate, explicit step so attacks can work in pixel space.
"""

from __future__ import annotations

import ast
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import DataIOError, FormatError, InvalidArgumentError, ShapeError

CIFAR_PIXELS = 3072
CIFAR_SHAPE = (3, 32, 32)

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801

NPY_MAGIC = b"\x93NUMPY"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n_samples, n_features) float64
    labels: np.ndarray  # (n_samples,) int64
    n_classes: int
    pixel_shape: tuple[int, int, int]

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"images {self.images.shape} do not match labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidArgumentError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.images.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


# ---------------------------------------------------------------------------
# CIFAR
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


def parse_cifar(raw: bytes, variant: str = "cifar10", source: str = "<bytes>"):
    """Decode CIFAR binary records into (uint8 pixels, labels)."""
    if variant == "cifar10":
        skip, n_classes = 1, 10
    elif variant == "cifar100":
        skip, n_classes = 2, 100
    else:
        raise InvalidArgumentError(f"unknown CIFAR variant {variant!r}")
    record = skip + CIFAR_PIXELS
    if len(raw) % record:
        whole = len(raw) // record
        raise FormatError(
            f"{source}: length {len(raw)} is not a multiple of the {record}-byte record; "
            f"trailing partial record starts at byte offset {whole * record}")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = buf[:, skip - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(
            f"{source}: label {labels[bad[0]]} out of range at byte offset "
            f"{bad[0] * record + skip - 1}")
    return buf[:, skip:], labels, n_classes


def load_cifar(paths: Sequence, variant: str = "cifar10") -> Dataset:
    pixels, labels = [], []
    n_classes = 10 if variant == "cifar10" else 100
    for p in paths:
        px, lab, n_classes = parse_cifar(_read_bytes(p), variant, str(p))
        pixels.append(px)
        labels.append(lab)
    if pixels:
        px = np.concatenate(pixels)
        lab = np.concatenate(labels)
    else:
        px = np.zeros((0, CIFAR_PIXELS), dtype=np.uint8)
        lab = np.zeros(0, dtype=np.int64)
    return Dataset(px.astype(np.float64) / 255.0, lab, n_classes, CIFAR_SHAPE)


def encode_cifar(pixels: np.ndarray, labels: Sequence[int], variant: str = "cifar10",
                 coarse_labels: Sequence[int] | None = None) -> bytes:
    """Inverse of :func:`parse_cifar`; used to write fixtures."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    head = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == "cifar100":
        coarse = np.zeros(len(labels), np.uint8) if coarse_labels is None else coarse_labels
        head.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    return np.concatenate(head + [pixels], axis=1).tobytes()


def load_cifar_dir(root, variant: str = "cifar10") -> tuple[Dataset, Dataset]:
    """Train and test splits from an extracted ``*-binary`` directory."""
    if variant == "cifar10":
        train_files, test_files = CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES
    else:
        train_files, test_files = CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES
    missing = [f for f in train_files + test_files if not os.path.exists(os.path.join(root, f))]
    if missing:
        raise DataIOError(f"{variant} files missing under {root}: {', '.join(missing)}")
    train = load_cifar([os.path.join(root, f) for f in train_files], variant)
    test = load_cifar([os.path.join(root, f) for f in test_files], variant)
    return train, test


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------

def _idx_header(raw: bytes, expected_magic: int, source: str) -> tuple[list[int], int]:
    if len(raw) < 8:
        raise FormatError(f"{source}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(
            f"{source}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{source}: truncated IDX dimensions")
    dims = list(struct.unpack(f">{ndim}I", raw[4:end]))
    if len(raw) - end != int(np.prod(dims)):
        raise FormatError(
            f"{source}: payload has {len(raw) - end} bytes, dims {dims} need {int(np.prod(dims))}")
    return dims, end


def load_mnist_idx(image_file, label_file) -> Dataset:
    img_raw, lab_raw = _read_bytes(image_file), _read_bytes(label_file)
    idims, ioff = _idx_header(img_raw, MNIST_IMAGE_MAGIC, str(image_file))
    ldims, loff = _idx_header(lab_raw, MNIST_LABEL_MAGIC, str(label_file))
    if idims[0] != ldims[0]:
        raise FormatError(f"image count {idims[0]} != label count {ldims[0]}")
    n, h, w = idims
    images = np.frombuffer(img_raw, np.uint8, offset=ioff).reshape(n, h * w)
    labels = np.frombuffer(lab_raw, np.uint8, offset=loff).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{label_file}: label {labels.max()} out of range")
    return Dataset(images.astype(np.float64) / 255.0, labels, 10, (1, h, w))


def encode_idx(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def load_mnist_dir(root) -> tuple[Dataset, Dataset]:
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    out = []
    for split in ("train", "test"):
        img, lab = (os.path.join(root, n) for n in names[split])
        if not (os.path.exists(img) and os.path.exists(lab)):
            raise DataIOError(f"MNIST {split} files missing under {root}")
        out.append(load_mnist_idx(img, lab))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# NPY
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NpyHeader:
    shape: tuple[int, ...]
    descr: str
    data_offset: int


def read_npy_header(head: bytes, source: str = "<npy>") -> NpyHeader:
    """Parse a version-1.0 NPY preamble (magic, version, header dict)."""
    if len(head) < 10 or head[:6] != NPY_MAGIC:
        raise FormatError(f"{source}: magic: not an NPY file")
    major, minor = head[6], head[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"{source}: version: unsupported NPY version {major}.{minor}")
    hlen = struct.unpack("<H", head[8:10])[0]
    if len(head) < 10 + hlen:
        raise FormatError(f"{source}: header: truncated header dictionary")
    try:
        meta = ast.literal_eval(head[10:10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{source}: header: unparsable dictionary") from exc
    if not isinstance(meta, dict) or not {"descr", "fortran_order", "shape"} <= meta.keys():
        raise FormatError(f"{source}: header: missing descr/fortran_order/shape")
    if meta["fortran_order"]:
        raise FormatError(f"{source}: fortran_order: only C-order arrays are supported")
    shape = tuple(int(d) for d in meta["shape"])
    return NpyHeader(shape, str(meta["descr"]), 10 + hlen)


def _check_u8(header: NpyHeader, source: str):
    if header.descr not in ("|u1", "<u1", "u1", "|B"):
        raise FormatError(f"{source}: descr: dtype {header.descr!r} is not unsigned 8-bit")


def parse_npy_u8(raw: bytes, source: str = "<npy>") -> tuple[list[int], bytes]:
    header = read_npy_header(raw, source)
    _check_u8(header, source)
    n = int(np.prod(header.shape))
    payload = raw[header.data_offset:]
    if len(payload) != n:
        raise FormatError(
            f"{source}: payload: {len(payload)} bytes, shape {list(header.shape)} needs {n}")
    return list(header.shape), payload


def load_npy_u8(path) -> tuple[list[int], bytes]:
    return parse_npy_u8(_read_bytes(path), str(path))


def npy_u8_header(shape, fortran_order: bool = False) -> bytes:
    """NPY v1.0 preamble for a uint8 array, padded to a 64-byte boundary."""
    text = "{'descr': '|u1', 'fortran_order': %r, 'shape': %r, }" % (fortran_order, tuple(shape))
    pad = 64 - (10 + len(text) + 1) % 64
    text = text + " " * (pad % 64) + "\n"
    return NPY_MAGIC + bytes([1, 0]) + struct.pack("<H", len(text)) + text.encode("latin1")


def encode_npy_u8(array: np.ndarray, fortran_order: bool = False) -> bytes:
    """Write a minimal NPY v1.0 uint8 file."""
    array = np.asarray(array, dtype=np.uint8)
    return npy_u8_header(array.shape, fortran_order) + array.tobytes()


def read_npy_rows_u8(path, start: int, stop: int) -> tuple[list[int], np.ndarray]:
    """Rows ``[start, stop)`` of a C-order uint8 NPY file without reading the rest."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(4096)
            header = read_npy_header(head, str(path))
            _check_u8(header, str(path))
            shape = header.shape
            row = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            if not 0 <= start <= stop <= shape[0]:
                raise InvalidArgumentError(f"rows [{start}, {stop}) outside {shape[0]} rows")
            fh.seek(header.data_offset + start * row)
            payload = fh.read((stop - start) * row)
            total = os.fstat(fh.fileno()).st_size - header.data_offset
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if total != int(np.prod(shape)) or len(payload) != (stop - start) * row:
        raise FormatError(f"{path}: payload: truncated for shape {list(shape)}")
    return list(shape), np.frombuffer(payload, np.uint8).reshape((stop - start,) + shape[1:])


def load_npy_labels(path) -> np.ndarray:
    """Integer label vector (any little-endian integer dtype, C-order)."""
    raw = _read_bytes(path)
    header = read_npy_header(raw, str(path))
    try:
        dtype = np.dtype(header.descr)
    except TypeError as exc:
        raise FormatError(f"{path}: descr: unknown dtype {header.descr!r}") from exc
    if dtype.kind not in "iu" or dtype.byteorder == ">":
        raise FormatError(f"{path}: descr: labels need a little-endian integer dtype")
    n = int(np.prod(header.shape))
    payload = raw[header.data_offset:]
    if len(payload) != n * dtype.itemsize:
        raise FormatError(f"{path}: payload: truncated")
    return np.frombuffer(payload, dtype).astype(np.int64)


def hwc_to_chw_flat(images: np.ndarray) -> np.ndarray:
    """(n, H, W, C) uint8 -> (n, C*H*W) channel-major rows."""
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2)).reshape(images.shape[0], -1)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def compute_stats(ds: Dataset) -> NormalizationStats:
    mean = ds.images.mean(axis=0)
    std = ds.images.std(axis=0)
    if len(ds):
        # constant features: exact centring, unit scale (summation leaves ~1e-16 residue)
        const = np.ptp(ds.images, axis=0) == 0
        mean = np.where(const, ds.images[0], mean)
        std = np.where(const, 0.0, std)
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(mean, std)


def identity_stats(n_features: int) -> NormalizationStats:
    return NormalizationStats(np.zeros(n_features), np.ones(n_features))


def apply_stats(x: np.ndarray, stats: NormalizationStats | None) -> np.ndarray:
    if stats is None:
        return x
    if x.shape[-1] != stats.mean.shape[0]:
        raise ShapeError(f"{x.shape[-1]} features vs stats for {stats.mean.shape[0]}")
    return (x - stats.mean) / stats.std


def normalize(ds: Dataset, stats: NormalizationStats) -> Dataset:
    return replace(ds, images=apply_stats(ds.images, stats))


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
            shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise InvalidArgumentError("shuffle needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def subset(ds: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    """Class-stratified sample of ``n`` examples without replacement.

    Quotas are as even as the per-class counts allow; the remainder that
    does not split evenly goes to randomly chosen classes.
    """
    if n > len(ds) or n < 0:
        raise InvalidArgumentError(f"cannot draw {n} samples from {len(ds)}")
    pools = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    avail = np.array([len(p) for p in pools])
    quota = np.zeros(ds.n_classes, dtype=np.int64)
    remaining = n
    while remaining > 0:
        open_ = np.flatnonzero(quota < avail)
        share = remaining // len(open_)
        if share == 0:
            # fewer leftover samples than open classes
            lucky = rng.permutation(open_)[:remaining]
            quota[lucky] += 1
            break
        add = np.minimum(share, avail[open_] - quota[open_])
        quota[open_] += add
        remaining -= int(add.sum())
    chosen = [rng.choice(pool, size=q, replace=False) for pool, q in zip(pools, quota) if q]
    idx = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return ds.take(rng.permutation(idx))
