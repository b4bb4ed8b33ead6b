"""Dataset ingestion, deterministic batching, and light augmentation.

Two sources: the standard CIFAR-10 binary layout (3073-byte records, one
label byte then 3072 channel-major pixel bytes) and a synthetic
class-conditional Gaussian generator for oracle-friendly tests.  Images
are stored normalized to per-channel zero mean / unit variance; the
normalizing statistics always come from the train split.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import resolve_dtype

CIFAR_RECORD_BYTES = 3073
CIFAR_CLASSES = 10
CIFAR_SIDE = 32


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), normalized
    labels: np.ndarray  # (N,), int64
    classes: int
    split: str
    norm_stats: tuple = field(default=None, repr=False)  # (mean, std) per channel

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ShapeError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def resolution(self):
        return int(self.images.shape[2])


def _read_cifar_records(path):
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD_BYTES != 0:
        raise ShapeError(f"{path}: size {size} is not a whole number of {CIFAR_RECORD_BYTES}-byte records")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) >= CIFAR_CLASSES:
        raise ShapeError(f"{path}: label byte {labels.max()} out of range [0, {CIFAR_CLASSES})")
    images = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def _cifar_files(directory, split):
    if split == "train":
        names = sorted(f for f in os.listdir(directory) if f.startswith("data_batch_") and f.endswith(".bin"))
    elif split == "test":
        names = [f for f in ("test_batch.bin",) if os.path.exists(os.path.join(directory, f))]
    else:
        raise ShapeError(f"split must be 'train' or 'test', got {split!r}")
    if not names:
        raise ShapeError(f"no CIFAR binary files for split {split!r} in {directory}")
    return [os.path.join(directory, n) for n in names]


def load_cifar_binary(directory, split, dtype="fp32", stats=None):
    """Load one split of a CIFAR-10-format directory.

    The test split is normalized with the train split's statistics
    (loaded on demand when ``stats`` is not supplied).
    """
    np_dtype = resolve_dtype(dtype)
    parts = [_read_cifar_records(p) for p in _cifar_files(directory, split)]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    scaled = images.astype(np.float64) / 255.0
    if stats is None:
        if split == "train":
            mean = scaled.mean(axis=(0, 2, 3))
            std = scaled.std(axis=(0, 2, 3))
        else:
            train = load_cifar_binary(directory, "train", dtype=dtype)
            mean, std = train.norm_stats
    else:
        mean, std = stats
    std = np.where(std > 0, std, 1.0)
    normalized = ((scaled - mean[None, :, None, None]) / std[None, :, None, None]).astype(np_dtype)
    return Dataset(normalized, labels, CIFAR_CLASSES, split, (mean, std))


def write_cifar_binary(directory, images_uint8, labels, split, records_per_file=10000):
    """Write images to the CIFAR-10 binary layout (testing / synthetic stand-ins)."""
    images_uint8 = np.asarray(images_uint8, dtype=np.uint8)
    labels = np.asarray(labels)
    n = images_uint8.shape[0]
    if images_uint8.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ShapeError(f"expected (N, 3, 32, 32) uint8 images, got {images_uint8.shape}")
    os.makedirs(directory, exist_ok=True)
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images_uint8.reshape(n, -1)
    if split == "test":
        records.tofile(os.path.join(directory, "test_batch.bin"))
        return
    for i in range(0, n, records_per_file):
        records[i : i + records_per_file].tofile(
            os.path.join(directory, f"data_batch_{i // records_per_file + 1}.bin")
        )


def synth_blobs(n, classes, resolution, seed, sigma=0.5, dtype="fp64", split="train"):
    """Class-conditional Gaussian images with balanced labels.

    Each class has a fixed random mean pattern; samples add isotropic
    noise of the given sigma.  Fully determined by the arguments.
    """
    if n < classes:
        raise ShapeError(f"need at least one sample per class: n={n} < classes={classes}")
    np_dtype = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    patterns = rng.normal(0.0, 1.0, size=(classes, 3, resolution, resolution))
    labels = (np.arange(n) % classes).astype(np.int64)
    images = patterns[labels]
    if sigma > 0:
        images = images + sigma * rng.standard_normal(images.shape)
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images.astype(np_dtype), labels, classes, split, (mean, std))


def _smooth_noise(rng, shape, passes):
    x = rng.standard_normal(shape)
    for _ in range(passes):
        x = (x + np.roll(x, 1, -1) + np.roll(x, -1, -1) + np.roll(x, 1, -2) + np.roll(x, -1, -2)) / 5.0
    return x


def synth_textures(n, classes, resolution, pattern_seed, sample_seed, *,
                   noise=3.0, max_shift=4, smooth_passes=2):
    """Desk-scale image classification stand-in, returned as uint8 suitable
    for the CIFAR binary layout.

    Each class is a fixed smooth texture; samples get per-sample amplitude
    jitter, a random circular shift of up to ``max_shift`` pixels, and
    additive Gaussian noise.  Splits that share ``pattern_seed`` share the
    class textures; the uint8 quantization is a fixed affine map derived
    from the distribution parameters, so it is split-consistent too.
    """
    prng = np.random.default_rng(pattern_seed)
    patterns = _smooth_noise(prng, (classes, 3, resolution, resolution), smooth_passes)
    patterns /= patterns.std(axis=(1, 2, 3), keepdims=True)
    rng = np.random.default_rng(sample_seed)
    labels = rng.integers(0, classes, n).astype(np.int64)
    images = np.empty((n, 3, resolution, resolution))
    for i, cls in enumerate(labels):
        img = patterns[cls] * rng.uniform(0.7, 1.3)
        if max_shift:
            img = np.roll(
                img,
                (int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1))),
                axis=(-2, -1),
            )
        images[i] = img + noise * rng.standard_normal((3, resolution, resolution))
    spread = 4.0 * np.sqrt(1.3 ** 2 + noise ** 2)
    quantized = np.clip((images + spread) / (2 * spread) * 255.0, 0, 255).astype(np.uint8)
    return quantized, labels


def take(dataset, indices, split=None):
    """Subset by index array; keeps normalization stats."""
    indices = np.asarray(indices)
    return Dataset(
        dataset.images[indices], dataset.labels[indices], dataset.classes,
        split or dataset.split, dataset.norm_stats,
    )


def batches(dataset, batch_size, order_seed, indices=None):
    """One shuffled pass over the dataset (or the given index subset).

    Order is a pure function of order_seed; the final partial batch is
    kept.  Yields (images, labels) copies.
    """
    if batch_size < 1:
        raise ShapeError(f"batch_size must be >= 1, got {batch_size}")
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    perm = pool[np.random.default_rng(order_seed).permutation(pool.shape[0])]
    for i in range(0, perm.shape[0], batch_size):
        idx = perm[i : i + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def augment_crop_flip(batch, pad, seed, flip_prob=0.5):
    """Reflect-pad + random crop back to size, then random horizontal flip.

    Each sample's randomness is keyed by (seed, position in batch), so a
    second call with the same seed redraws the same decisions.
    """
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else batch
    out = np.empty_like(batch)
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        if pad:
            oy = int(rng.integers(0, 2 * pad + 1))
            ox = int(rng.integers(0, 2 * pad + 1))
            img = padded[i, :, oy : oy + h, ox : ox + w]
        else:
            img = batch[i]
        if rng.random() < flip_prob:
            img = img[:, :, ::-1]
        out[i] = img
    return out
