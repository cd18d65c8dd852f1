"""Dataset parsing and generation.

Pixels stay in [0, 1] with no mean/std normalization, so a perturbation
budget of 8/255 is measured in raw pixel units everywhere. Binary layouts
are bit-exact: CIFAR-10 records are 3073 bytes (label, then R/G/B planes),
CIFAR-100 records are 3074 bytes (coarse label, fine label, planes).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .nn import FormatError

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
_DATA_MAGIC = b"AFMDATA1"


@dataclass
class Dataset:
    x: np.ndarray  # float64, (N, C, H, W) or (N, d), values in [0, 1]
    labels: np.ndarray  # int64, (N,)
    num_classes: int
    name: str

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.x) != len(self.labels):
            raise ValueError(f"{len(self.x)} examples vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dims(self):
        shape = self.x.shape[1:]
        return shape[0] if len(shape) == 1 else tuple(shape)


def parse_cifar10_bin(raw: bytes, name: str = "cifar10") -> Dataset:
    if len(raw) % CIFAR10_RECORD != 0:
        expected = (len(raw) // CIFAR10_RECORD + 1) * CIFAR10_RECORD
        raise FormatError(
            f"length {len(raw)} is not a multiple of {CIFAR10_RECORD} "
            f"(nearest whole-record size {expected})",
            len(raw) - len(raw) % CIFAR10_RECORD,
        )
    n = len(raw) // CIFAR10_RECORD
    if n == 0:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64), 10, name)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR10_RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} > 9 at record {bad[0]}",
                          int(bad[0]) * CIFAR10_RECORD)
    x = arr[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, labels, 10, name)


def parse_cifar100_bin(raw: bytes, name: str = "cifar100") -> Dataset:
    """Fine labels are used; the coarse byte is parsed and discarded."""
    if len(raw) % CIFAR100_RECORD != 0:
        raise FormatError(
            f"length {len(raw)} is not a multiple of {CIFAR100_RECORD}",
            len(raw) - len(raw) % CIFAR100_RECORD,
        )
    n = len(raw) // CIFAR100_RECORD
    if n == 0:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64), 100, name)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR100_RECORD)
    fine = arr[:, 1].astype(np.int64)
    bad = np.nonzero(fine > 99)[0]
    if bad.size:
        raise FormatError(f"fine label byte {fine[bad[0]]} > 99 at record {bad[0]}",
                          int(bad[0]) * CIFAR100_RECORD + 1)
    x = arr[:, 2:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, fine, 100, name)


def serialize_cifar10_bin(ds: Dataset) -> bytes:
    """Inverse of parse_cifar10_bin; exact because pixels are k/255 values."""
    n = len(ds)
    pixels = np.round(ds.x * 255.0).astype(np.uint8).reshape(n, 3072)
    out = np.empty((n, CIFAR10_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = pixels
    return out.tobytes()


# ---------------------------------------------------------------------------
# generic container for synthetic / derived datasets
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    buf = io.BytesIO()
    buf.write(_DATA_MAGIC)
    raw_name = ds.name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<I", ds.num_classes))
    shape = ds.x.shape
    buf.write(struct.pack("<I", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(ds.labels.astype("<i8").tobytes())
    buf.write(ds.x.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_DATA_MAGIC)] != _DATA_MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {_DATA_MAGIC!r}", 0)
    off = len(_DATA_MAGIC)

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated dataset while reading {what}", off)
        chunk = raw[off : off + n]
        off += n
        return chunk

    (nlen,) = struct.unpack("<I", take(4, "name length"))
    name = take(nlen, "name").decode("utf-8")
    (num_classes,) = struct.unpack("<I", take(4, "num_classes"))
    (ndim,) = struct.unpack("<I", take(4, "ndim"))
    shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
    n = shape[0] if shape else 0
    labels = np.frombuffer(take(8 * n, "labels"), dtype="<i8").copy()
    count = int(np.prod(shape)) if shape else 0
    x = np.frombuffer(take(8 * count, "pixels"), dtype="<f8").reshape(shape).copy()
    if off != len(raw):
        raise FormatError("trailing bytes after pixel data", off)
    return Dataset(x, labels, int(num_classes), name)


def subset(ds: Dataset, per_class: int, seed: int) -> Dataset:
    """Stratified reduction: exactly per_class examples from each class."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0]
        if len(idx) < per_class:
            raise ValueError(f"class {c} has {len(idx)} examples < per_class={per_class}")
        keep.append(rng.choice(idx, size=per_class, replace=False))
    keep = np.sort(np.concatenate(keep))
    return Dataset(ds.x[keep], ds.labels[keep], ds.num_classes, f"{ds.name}-sub{per_class}")


def synth_blobs(d: int, k: int, n: int, margin: float, seed: int) -> Dataset:
    """k Gaussian blobs in [0,1]^d whose means are at least ``margin`` apart."""
    rng = np.random.default_rng(seed)
    if n == 0:
        return Dataset(np.zeros((0, d)), np.zeros(0, dtype=np.int64), k, "blobs")
    for _ in range(1000):
        means = rng.uniform(0.25, 0.75, size=(k, d))
        dists = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= margin:
            break
    else:
        raise ValueError(f"could not place {k} means with margin {margin} in [0,1]^{d}")
    std = margin / 6.0
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    labels = np.repeat(np.arange(k), counts)
    x = means[labels] + std * rng.normal(size=(n, d))
    return Dataset(np.clip(x, 0.0, 1.0), labels, k, f"blobs-d{d}k{k}")


def synth_images(
    num_classes: int,
    n: int,
    size: int = 32,
    channels: int = 3,
    noise: float = 0.08,
    seed: int = 0,
) -> Dataset:
    """Class-patterned grating images: a desk-scale stand-in when no real
    image files are supplied.

    Each class owns an orientation/frequency pair plus a small color cast;
    samples vary in phase (a global translation) and pixel noise. The pattern
    amplitude dwarfs an 8/255 perturbation, so robust classification of this
    set is learnable by small CNNs.
    """
    rng = np.random.default_rng(seed)
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    rng.shuffle(labels)

    class_rng = np.random.default_rng(seed + 1)
    angles = np.pi * np.arange(num_classes) / num_classes
    freqs = 2.0 + (np.arange(num_classes) % 4)
    casts = class_rng.uniform(-0.08, 0.08, size=(num_classes, channels))

    yy, xx = np.mgrid[0:size, 0:size] / size
    x = np.empty((n, channels, size, size))
    for i, c in enumerate(labels):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = xx * np.cos(angles[c]) + yy * np.sin(angles[c])
        base = 0.5 + 0.35 * np.sin(2.0 * np.pi * freqs[c] * wave + phase)
        for ch in range(channels):
            x[i, ch] = base + casts[c, ch]
    x += noise * rng.normal(size=x.shape)
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes, f"synthimg-k{num_classes}")
