"""Dataset ingestion, normalisation, batching, and toy datasets.

Supported on-disk formats:

* IDX (MNIST, FashionMNIST), optionally gzip-compressed.
* CIFAR10 binary batches: 3073-byte records, one label byte followed by
  1024 red, 1024 green and 1024 blue bytes.
* Planar raw frames: a directory with a ``shape.txt`` holding ``C H W``
  and any number of ``*.raw`` files of exactly ``C*H*W`` bytes each, stored
  channel by channel.  Frames are read in sorted filename order.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_IDX_U8 = 0x08
_MAX_IDX_ELEMENTS = 1 << 31


class IDXMagicError(DataError):
    """The first four bytes are not a supported IDX magic number."""


class IDXTruncatedError(DataError):
    """The payload is shorter than the dimensions require."""


class IDXOverflowError(DataError):
    """The declared dimensions describe an implausibly large array."""


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be a (N, C, H, W) uint8 array, "
                            f"got {self.images.dtype} {self.images.shape}")
        if self.images.shape[0] < 1:
            raise DataError(f"{self.name}: dataset is empty")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataError(f"{self.name}: {len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])

    def subset(self, n: int | None, start: int = 0) -> "ImageDataset":
        """Images ``start .. start+n`` (all remaining when ``n`` is None)."""
        stop = len(self) if n is None else start + n
        if start < 0 or n is not None and (n < 1 or stop > len(self)):
            raise ConfigError(f"{self.name}: cannot take {n} images from offset {start} of {len(self)}")
        labels = None if self.labels is None else self.labels[start:stop]
        return ImageDataset(self.images[start:stop], labels, self.name)


# ---------------------------------------------------------------- IDX

def parse_idx(blob: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX blob into an array of its declared shape."""
    if len(blob) < 4:
        raise IDXMagicError(f"IDX blob of {len(blob)} bytes has no magic number")
    zero, dtype, ndim = struct.unpack_from(">HBB", blob)
    if zero != 0 or dtype != _IDX_U8 or not 1 <= ndim <= 4:
        raise IDXMagicError(f"unsupported IDX magic 0x{int.from_bytes(blob[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IDXTruncatedError(f"IDX header needs {header} bytes, blob has {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = 1
    for d in dims:
        count *= d
    if count >= _MAX_IDX_ELEMENTS:
        raise IDXOverflowError(f"IDX dimensions {dims} describe {count} elements")
    available = len(blob) - header
    if available < count:
        raise IDXTruncatedError(f"IDX payload has {available} bytes, dimensions {dims} need {count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def write_idx(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"IDX stores 1 to 4 dimensions, got {arr.ndim}")
    head = struct.pack(">HBB", 0, _IDX_U8, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _read_bytes(path: Path) -> bytes:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:2] == b"\x1f\x8b":
            blob = gzip.decompress(blob)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return blob


def _with_context(path: Path, blob: bytes) -> np.ndarray:
    try:
        return parse_idx(blob)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def load_idx_pair(images_path: str | os.PathLike, labels_path: str | os.PathLike | None = None,
                  name: str = "idx") -> ImageDataset:
    images_path = Path(images_path)
    images = _with_context(images_path, _read_bytes(images_path))
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected a 3-D image array, got shape {images.shape}")
    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        labels = _with_context(labels_path, _read_bytes(labels_path))
        if labels.ndim != 1:
            raise DataError(f"{labels_path}: expected a label vector, got shape {labels.shape}")
    return ImageDataset(images[:, None], labels, name)


def _find(directory: Path, stem: str) -> Path | None:
    for candidate in (stem, stem + ".gz"):
        if (directory / candidate).is_file():
            return directory / candidate
    return None


def load_mnist(directory: str | os.PathLike, split: str = "train", name: str = "mnist") -> ImageDataset:
    """Load ``{split}-images-idx3-ubyte`` (plus labels when present) from ``directory``."""
    directory = Path(directory)
    images = _find(directory, f"{split}-images-idx3-ubyte")
    if images is None:
        raise DataError(f"no {split}-images-idx3-ubyte[.gz] in {directory}")
    return load_idx_pair(images, _find(directory, f"{split}-labels-idx1-ubyte"), name)


# ---------------------------------------------------------------- CIFAR10 / planar

CIFAR_RECORD = 1 + 3 * 32 * 32


def parse_cifar10(blob: bytes, source: str = "<bytes>") -> ImageDataset:
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise DataError(f"{source}: {len(blob)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return ImageDataset(records[:, 1:].reshape(-1, 3, 32, 32).copy(), records[:, 0].copy(), "cifar10")


def load_cifar10(directory: str | os.PathLike) -> ImageDataset:
    directory = Path(directory)
    files = sorted(directory.glob("data_batch_*.bin"))
    if not files:
        raise DataError(f"no data_batch_*.bin files in {directory}")
    parts = [parse_cifar10(_read_bytes(f), str(f)) for f in files]
    return ImageDataset(np.concatenate([p.images for p in parts]),
                        np.concatenate([p.labels for p in parts]), "cifar10")


def load_planar(directory: str | os.PathLike, name: str = "planar") -> ImageDataset:
    directory = Path(directory)
    try:
        C, H, W = (int(v) for v in (directory / "shape.txt").read_text().split())
    except (OSError, ValueError) as exc:
        raise DataError(f"{directory}/shape.txt must hold 'C H W': {exc}") from exc
    frames = []
    for f in sorted(directory.glob("*.raw")):
        blob = _read_bytes(f)
        if len(blob) != C * H * W:
            raise DataError(f"{f}: {len(blob)} bytes, expected {C * H * W} for {C}x{H}x{W}")
        frames.append(np.frombuffer(blob, dtype=np.uint8).reshape(C, H, W))
    if not frames:
        raise DataError(f"no .raw frames in {directory}")
    return ImageDataset(np.stack(frames), None, name)


# ---------------------------------------------------------------- normalisation

def normalize(images: np.ndarray) -> Tensor:
    """uint8 -> float in [-1, 1] via ``x / 127.5 - 1``."""
    if images.dtype != np.uint8:
        raise DataError(f"normalize expects uint8 pixels, got {images.dtype}")
    return Tensor(images.astype(np.float32) / np.float32(127.5) - np.float32(1.0))


def denormalize(x) -> np.ndarray:
    """Inverse of :func:`normalize`, rounding to the nearest byte and clipping."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.clip(np.rint((data.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class BatchPlan:
    """Seeded shuffling; the permutation for an epoch depends only on (seed, epoch)."""

    seed: int
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def permutation(self, n: int, epoch: int = 0) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def num_batches(self, n: int) -> int:
        return n // self.batch_size

    def indices(self, n: int, epoch: int = 0) -> list[np.ndarray]:
        if self.batch_size > n:
            raise ConfigError(f"batch_size {self.batch_size} exceeds dataset size {n}")
        perm = self.permutation(n, epoch)
        b = self.batch_size
        return [perm[i * b:(i + 1) * b] for i in range(n // b)]


def batches(data, plan: BatchPlan, epoch: int = 0) -> Iterator[Tensor]:
    """Shuffled full batches of ``data`` (an ImageDataset or a float array); the tail is dropped."""
    if isinstance(data, ImageDataset):
        data = normalize(data.images).data
    for idx in plan.indices(len(data), epoch):
        yield Tensor(data[idx])


# ---------------------------------------------------------------- synthetic

SYNTHETIC_KINDS = ("bars", "gaussian-blobs")


def synthetic_dataset(kind: str, n: int, shape: tuple[int, int, int] = (1, 8, 8), seed: int = 0,
                      level: float = 0.25) -> ImageDataset:
    """Toy images with known structure.

    ``bars``: one fully lit row or column on black; the label is the bar index
    (rows first, then columns).  ``gaussian-blobs``: one Gaussian bump on a flat
    background, scaled so every image's mean intensity is ``level`` (in [0, 1]);
    the label is the quadrant of the bump centre.
    """
    if n < 1:
        raise ConfigError(f"synthetic dataset needs n >= 1, got {n}")
    C, H, W = shape
    rng = np.random.default_rng(seed)
    images = np.zeros((n, C, H, W), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint8)
    if kind == "bars":
        which = rng.integers(0, H + W, size=n)
        for i, k in enumerate(which):
            if k < H:
                images[i, :, k, :] = 255
            else:
                images[i, :, :, k - H] = 255
        labels[:] = which % 256
    elif kind == "gaussian-blobs":
        if not 0 < level < 1:
            raise ConfigError(f"blob level must be in (0, 1), got {level}")
        yy, xx = np.mgrid[0:H, 0:W]
        for i in range(n):
            cy, cx = rng.uniform(0, H - 1), rng.uniform(0, W - 1)
            sigma = rng.uniform(0.1, 0.25) * min(H, W)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            bump /= bump.max()
            m = bump.mean()
            # largest amplitude that keeps level + a * (bump - m) inside [0, 1]
            amp = rng.uniform(0.5, 1.0) * min(level / m, (1 - level) / (1 - m))
            img = level + amp * (bump - m)
            images[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)[None]
            labels[i] = 2 * (cy >= H / 2) + (cx >= W / 2)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    return ImageDataset(images, labels, kind)
