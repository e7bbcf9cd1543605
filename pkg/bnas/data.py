"""Image datasets: CIFAR-10 binary files, synthetic fixtures, splits,
augmentation and batching.

Images are kept as uint8 (N, 3, H, W) until a batch is drawn. A batch is
converted to [0, 1], augmented there, then normalized with fixed per-channel
constants, so the same bytes always give the same tensor.

CIFAR-10 record layout: 1 label byte, then 1024 R, 1024 G, 1024 B bytes
(row-major 32x32 planes). 3073 bytes per record.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# CIFAR-10 channel statistics on [0, 1] pixels
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

AUGMENTATIONS = ("none", "flip+crop", "flip+crop+jitter")
CROP_PADDING = 4
JITTER_RANGE = (0.8, 1.2)
PREFETCH = 2

# Per-process cache so repeated variants in one run (ablations) parse once.
_CACHE: Dict[str, Tuple["Dataset", "Dataset"]] = {}

Seed = Union[int, Sequence[int], None]


class DatasetError(ValueError):
    """A dataset file is missing or malformed."""


def clear_cache() -> None:
    _CACHE.clear()


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (N, 3, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int = NUM_CLASSES

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.images.shape[0]} images but labels of shape {self.labels.shape}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def side(self) -> int:
        return int(self.images.shape[2])


@dataclass
class ImageBatch:
    images: np.ndarray  # float32, (N, 3, H, W)
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


# --- CIFAR-10 binary format ------------------------------------------------------


def parse_records(blob: bytes, source: str = "<bytes>") -> Dataset:
    if len(blob) % RECORD_BYTES:
        offset = (len(blob) // RECORD_BYTES) * RECORD_BYTES
        raise DatasetError(
            f"{source}: truncated record at byte offset {offset} "
            f"({len(blob) - offset} of {RECORD_BYTES} bytes)"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(
            f"{source}: label {labels[i]} out of range at byte offset {i * RECORD_BYTES}"
        )
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).copy()
    return Dataset(images, labels)


def read_cifar10_file(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing CIFAR-10 file {path}")
    return parse_records(path.read_bytes(), str(path))


def load_cifar10_bin(directory: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    """Return (train, test) from the five training batches and the test batch."""
    directory = Path(directory)
    key = str(directory.resolve())
    cached = _CACHE.get(key)
    if cached is not None:
        return cached

    parts = [read_cifar10_file(directory / name) for name in TRAIN_FILES]
    train = Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )
    test = read_cifar10_file(directory / TEST_FILE)
    _CACHE[key] = (train, test)
    return train, test


def to_records(dataset: Dataset) -> bytes:
    if dataset.images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"the CIFAR-10 layout needs {IMAGE_SHAPE} images, got {dataset.images.shape[1:]}")
    flat = dataset.images.reshape(len(dataset), -1)
    return np.concatenate([dataset.labels.astype(np.uint8)[:, None], flat], axis=1).tobytes()


def write_cifar10_bin(dataset: Dataset, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_records(dataset))


# --- synthetic fixtures ----------------------------------------------------------------


def synthetic_blobs(classes: int = NUM_CLASSES, n: int = 1000, seed: int = 0, side: int = 32, noise: float = 24.0) -> Dataset:
    """Gaussian noise around one flat color per class.

    Class colors sit on a 3x3x3 lattice over the pixel range, at least 80
    levels apart, so the classes separate cleanly by mean color.
    """
    if not 1 <= classes <= 27:
        raise ValueError(f"synthetic blobs support 1 to 27 classes, got {classes}")
    rng = np.random.default_rng(seed)
    levels = np.array([48.0, 128.0, 208.0])
    lattice = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1).reshape(-1, 3)
    colors = lattice[rng.permutation(len(lattice))[:classes]]
    labels = rng.integers(0, classes, size=n)
    pixels = colors[labels][:, :, None, None] + rng.normal(0.0, noise, size=(n, 3, side, side))
    images = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes=classes)


# --- splits ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fraction: float = 0.5


def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint, sorted (search_train, search_val) index sets covering range(n)."""
    if not 0 < spec.fraction < 1:
        raise ValueError(f"split fraction must lie in (0, 1), got {spec.fraction}")
    order = np.random.default_rng(spec.seed).permutation(n)
    cut = int(round(n * spec.fraction))
    return np.sort(order[:cut]), np.sort(order[cut:])


def subset(dataset: Dataset, indices) -> Dataset:
    indices = np.asarray(indices, dtype=np.int64)
    return Dataset(dataset.images[indices], dataset.labels[indices], dataset.num_classes)


def take(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """A seeded random subset of `count` images (the whole set if count covers it)."""
    if count <= 0 or count >= len(dataset):
        return dataset
    chosen = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:count])
    return subset(dataset, chosen)


# --- augmentation -----------------------------------------------------------------------


def hflip(images: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Mirror the images selected by `mask` (all of them by default)."""
    out = images.copy()
    if mask is None:
        mask = np.ones(len(images), dtype=bool)
    out[mask] = out[mask][..., ::-1]
    return out


def random_crop(images: np.ndarray, rng: np.random.Generator, padding: int = CROP_PADDING) -> np.ndarray:
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode="reflect")
    offsets = rng.integers(0, 2 * padding + 1, size=(n, 2))
    out = np.empty_like(images)
    for i, (top, left) in enumerate(offsets):
        out[i] = padded[i, :, top : top + h, left : left + w]
    return out


def color_jitter(images: np.ndarray, rng: np.random.Generator, low: float = JITTER_RANGE[0], high: float = JITTER_RANGE[1]) -> np.ndarray:
    """Brightness, contrast and saturation each scaled by U(low, high) per image."""
    n = len(images)
    brightness, contrast, saturation = (rng.uniform(low, high, size=(n, 1, 1, 1)) for _ in range(3))
    x = images * brightness
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    x = (x - mean) * contrast + mean
    gray = (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
    x = (x - gray) * saturation + gray
    return np.clip(x, 0.0, 1.0).astype(images.dtype)


def augment(batch: ImageBatch, kind: str, rng: np.random.Generator) -> ImageBatch:
    """Augment a batch of [0, 1] pixels. Labels and shapes are untouched."""
    if kind not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {kind!r}; expected one of {', '.join(AUGMENTATIONS)}")
    if kind == "none" or len(batch) == 0:
        return batch
    images = hflip(batch.images, rng.random(len(batch)) < 0.5)
    images = random_crop(images, rng)
    if kind == "flip+crop+jitter":
        images = color_jitter(images, rng)
    return ImageBatch(images, batch.labels)


def to_unit(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / 255.0


def normalize(images: np.ndarray) -> np.ndarray:
    """[0, 1] pixels to zero-mean, unit-variance channels."""
    mean = np.asarray(CIFAR_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR_STD, dtype=np.float32).reshape(1, 3, 1, 1)
    return ((images - mean) / std).astype(np.float32)


def as_batch(dataset: Dataset, indices=None) -> ImageBatch:
    """Normalized, unaugmented batch of the selected images."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    return ImageBatch(normalize(to_unit(dataset.images[idx])), dataset.labels[idx])


# --- batching -------------------------------------------------------------------------------

_END = object()


def _produce(dataset: Dataset, batch_size: int, seed: Seed, augmentation: str, shuffle: bool) -> Iterator[ImageBatch]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        raw = ImageBatch(to_unit(dataset.images[idx]), dataset.labels[idx])
        raw = augment(raw, augmentation, rng)
        yield ImageBatch(normalize(raw.images), raw.labels)


def batches(
    dataset: Dataset,
    batch_size: int,
    seed: Seed = 0,
    augmentation: str = "none",
    shuffle: bool = True,
    prefetch: int = PREFETCH,
) -> Iterator[ImageBatch]:
    """Seeded batches, prepared on a worker thread `prefetch` batches ahead.

    The order depends on the seed only; the worker changes timing, not content.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if augmentation not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {augmentation!r}")
    if prefetch < 1:
        yield from _produce(dataset, batch_size, seed, augmentation, shuffle)
        return

    slots: "queue.Queue[object]" = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def offer(item: object) -> bool:
        while not stop.is_set():
            try:
                slots.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def work() -> None:
        try:
            for batch in _produce(dataset, batch_size, seed, augmentation, shuffle):
                if not offer(batch):
                    return
            offer(_END)
        except BaseException as e:  # surfaced in the consumer
            offer(e)

    worker = threading.Thread(target=work, name="bnas-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = slots.get()
            if item is _END:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=1.0)
