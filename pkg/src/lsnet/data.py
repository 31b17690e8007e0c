"""Datasets: an in-memory container, a deterministic synthetic benchmark,
normalization at batch-assembly time, and a small binary file format.

Images are stored as uint8 (N, C, H, W) and only converted to float when
a batch is assembled, using per-channel statistics carried by the
dataset itself: x_norm = (x / 255 - mean) / std.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError


@dataclass
class Dataset:
    """Labelled uint8 image set plus the normalization statistics to use."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    classes: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float32)
        self.std = np.ascontiguousarray(self.std, dtype=np.float32)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DataError(f"images must be uint8 (N, C, H, W), got {self.images.dtype} {self.images.shape}")
        n, c = self.images.shape[:2]
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} does not match {n} images")
        if self.classes < 2:
            raise DataError(f"need at least 2 classes, got {self.classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels out of range for {self.classes} classes")
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise DataError(f"mean/std must have shape ({c},)")
        if (self.std <= 0).any():
            raise DataError("std must be positive in every channel")

    def __len__(self) -> int:
        return self.images.shape[0]


def normalize_images(images: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (N, C, H, W) -> float (x / 255 - mean) / std, channelwise."""
    kind = np.dtype(dtype).type
    x = images.astype(kind) / kind(255.0)
    m = mean.astype(kind).reshape(1, -1, 1, 1)
    s = std.astype(kind).reshape(1, -1, 1, 1)
    return (x - m) / s


def make_blobs10(seed: int = 0, count: int = 2500, side: int = 32):
    """Ten-class synthetic benchmark: one colored Gaussian blob per image.

    Class k places its blob at angle 2*pi*k/10 on a circle around the
    image center, so position (not color alone) determines the label;
    mirroring an image moves the blob onto another class's territory.
    Labels are assigned round-robin, giving exact class balance in both
    the 2000-sample train split and the 500-sample test split.

    Returns (train, test) ``Dataset``s; both carry the train split's
    per-channel normalization statistics.
    """
    if count % 10:
        raise DataError(f"count must be a multiple of 10, got {count}")
    rng = np.random.default_rng(seed)
    half = side / 2.0
    radius = side * 9.0 / 32.0
    sigma = side * 3.0 / 32.0
    angles = 2.0 * np.pi * np.arange(10) / 10.0
    centers = np.stack([half + radius * np.cos(angles), half + radius * np.sin(angles)], axis=1)
    # distinct but non-degenerate color per class, every channel >= 0.4
    phases = np.array([0.0, 2.0, 4.0])
    colors = 0.7 + 0.3 * np.cos(angles[:, None] + phases[None, :])

    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    labels = np.arange(count, dtype=np.int64) % 10
    images = np.empty((count, 3, side, side), dtype=np.uint8)
    for i in range(count):
        k = labels[i]
        cy, cx = centers[k] + rng.uniform(-2.0, 2.0, size=2)
        bump = 200.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        img = colors[k][:, None, None] * bump[None] + 30.0
        img = img + rng.normal(0.0, 12.0, size=img.shape)
        images[i] = np.clip(img, 0.0, 255.0).astype(np.uint8)

    n_train = count * 4 // 5
    train_imgs, test_imgs = images[:n_train], images[n_train:]
    train_lbls, test_lbls = labels[:n_train], labels[n_train:]
    scaled = train_imgs.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3)).astype(np.float32)
    std = scaled.std(axis=(0, 2, 3)).astype(np.float32)
    train = Dataset("blobs10-train", train_imgs, train_lbls, 10, mean, std)
    test = Dataset("blobs10-test", test_imgs, test_lbls, 10, mean, std)
    return train, test


# ---------------------------------------------------------------------------
# Container file format (all integers little-endian):
#   magic "LSDS" | u32 version | u16 name length | name (utf-8) |
#   u32 classes | u32 N | u16 C | u16 H | u16 W |
#   f32 mean[C] | f32 std[C] | u16 labels[N] | u8 pixels[N*C*H*W]
# ---------------------------------------------------------------------------

_MAGIC = b"LSDS"
_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    if ds.classes > 0xFFFF or n > 0xFFFFFFFF:
        raise DataError("dataset too large for the container format")
    name_b = ds.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<H", len(name_b)))
        fh.write(name_b)
        fh.write(struct.pack("<IIHHH", ds.classes, n, c, h, w))
        fh.write(ds.mean.astype("<f4").tobytes())
        fh.write(ds.std.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(ds.images.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    label = str(path)
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError(f"{label}: truncated dataset file")
        out = data[pos : pos + nbytes]
        pos += nbytes
        return out

    if take(4) != _MAGIC:
        raise FormatError(f"{label}: not a dataset file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise FormatError(f"{label}: unsupported dataset version {version}")
    (name_len,) = struct.unpack("<H", take(2))
    name = take(name_len).decode("utf-8")
    classes, n, c, h, w = struct.unpack("<IIHHH", take(struct.calcsize("<IIHHH")))
    mean = np.frombuffer(take(4 * c), dtype="<f4").astype(np.float32)
    std = np.frombuffer(take(4 * c), dtype="<f4").astype(np.float32)
    labels = np.frombuffer(take(2 * n), dtype="<u2").astype(np.int64)
    images = np.frombuffer(take(n * c * h * w), dtype=np.uint8).reshape(n, c, h, w).copy()
    if pos != len(data):
        raise FormatError(f"{label}: trailing bytes after payload")
    try:
        return Dataset(name, images, labels, classes, mean, std)
    except DataError as exc:
        raise DataError(f"{label}: {exc}") from None


def resolve_dataset(arg: str, seed: int = 0):
    """Map a --data argument to (train, test) datasets.

    ``blobs10`` synthesizes the benchmark deterministically from the
    seed; anything else must name a pair of container files given as
    ``train.lsds:test.lsds`` or a single file used for both roles.
    """
    if arg == "blobs10":
        return make_blobs10(seed=seed)
    if ":" in arg:
        train_path, test_path = arg.split(":", 1)
        return load_dataset(train_path), load_dataset(test_path)
    ds = load_dataset(arg)
    return ds, ds
