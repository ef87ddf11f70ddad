"""
Dataset ingestion: CIFAR-10/100 binary archives, the synthetic toy dataset,
stratified splits, augmentation and seed-deterministic batch streams.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from .errors import ArgumentError, DataFormatError

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXELS_PER_IMAGE = 3 * 32 * 32
RECORDS_PER_FILE = 10000

CIFAR_LAYOUT = {
    # label bytes per record, class count
    "cifar10": (1, 10),
    "cifar100": (2, 100),
}
CIFAR100_COARSE_CLASSES = 20

# cutout sizes are given for 32x32 images and scaled to smaller inputs
CUTOUT_REFERENCE_SIZE = 32

CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}

CIFAR_DIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}

CIFAR_RECORDS = {
    ("cifar10", "train"): RECORDS_PER_FILE,
    ("cifar10", "test"): RECORDS_PER_FILE,
    ("cifar100", "train"): 50000,
    ("cifar100", "test"): 10000,
}


@dataclass
class Sample:
    """One image (3, H, W) and its label; coarse_label is kept for CIFAR-100."""

    image: np.ndarray
    label: int
    coarse_label: Optional[int] = None


@dataclass
class Dataset:
    """
    Immutable image collection stored as uint8 pixels.

    mean and std are per-channel statistics in [0, 1] pixel units, computed on
    the training portion and shared by every split derived from it.
    """

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    variant: str = "toy"
    coarse_labels: Optional[np.ndarray] = None
    provenance: List[Dict[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise DataFormatError(f"expected (N, 3, H, W) pixels, got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise DataFormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(
                f"labels must lie in [0, {self.num_classes}), got range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.pixels.shape[2]

    def raw(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Images scaled to [0, 1], float32."""
        pixels = self.pixels if indices is None else self.pixels[np.asarray(indices)]
        return pixels.astype(np.float32) / 255.0

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Normalized float32 images."""
        return normalize(self.raw(indices), self.mean, self.std)

    def sample(self, index: int) -> Sample:
        coarse = int(self.coarse_labels[index]) if self.coarse_labels is not None else None
        return Sample(image=self.raw([index])[0], label=int(self.labels[index]), coarse_label=coarse)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        coarse = self.coarse_labels[indices] if self.coarse_labels is not None else None
        return replace(self, pixels=self.pixels[indices], labels=self.labels[indices], coarse_labels=coarse)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def channel_stats(pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of uint8 pixels in [0, 1] units."""
    scaled = pixels.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = (3, 1, 1) if images.ndim == 3 else (1, 3, 1, 1)
    return ((images - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def record_size(variant: str) -> int:
    if variant not in CIFAR_LAYOUT:
        raise ArgumentError(f"unknown CIFAR variant {variant!r}; expected cifar10 or cifar100")
    return CIFAR_LAYOUT[variant][0] + PIXELS_PER_IMAGE


def decode_cifar_records(raw: bytes, variant: str) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Decode concatenated CIFAR records.

    Args:
        raw: File contents; each record is the label byte(s) then the R, G and B
            planes in row-major order
        variant: "cifar10" or "cifar100"

    Returns:
        (pixels uint8 (N, 3, 32, 32), fine labels, coarse labels or None)
    """
    size = record_size(variant)
    label_bytes, num_classes = CIFAR_LAYOUT[variant]
    if len(raw) % size:
        raise DataFormatError(f"{len(raw)} bytes is not a whole number of {size}-byte {variant} records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    labels = records[:, label_bytes - 1].astype(np.int64)
    coarse = records[:, 0].astype(np.int64) if label_bytes == 2 else None
    if len(labels) and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DataFormatError(f"record {bad}: label {labels[bad]} out of range for {variant}")
    if coarse is not None and len(coarse) and coarse.max() >= CIFAR100_COARSE_CLASSES:
        bad = int(np.argmax(coarse >= CIFAR100_COARSE_CLASSES))
        raise DataFormatError(f"record {bad}: coarse label {coarse[bad]} out of range for {variant}")
    pixels = records[:, label_bytes:].reshape(-1, *IMAGE_SHAPE).copy()
    return pixels, labels, coarse


def encode_cifar_records(
    pixels: np.ndarray,
    labels: np.ndarray,
    variant: str,
    coarse_labels: Optional[np.ndarray] = None,
) -> bytes:
    """Inverse of decode_cifar_records."""
    label_bytes, _ = CIFAR_LAYOUT[variant]
    n = len(labels)
    out = np.empty((n, record_size(variant)), dtype=np.uint8)
    if label_bytes == 2:
        out[:, 0] = np.zeros(n, dtype=np.uint8) if coarse_labels is None else coarse_labels
    out[:, label_bytes - 1] = labels
    out[:, label_bytes:] = np.asarray(pixels, dtype=np.uint8).reshape(n, PIXELS_PER_IMAGE)
    return out.tobytes()


def _resolve_cifar_dir(path: Path, variant: str) -> Path:
    nested = path / CIFAR_DIRS[variant]
    return nested if nested.is_dir() else path


def load_cifar(
    path: Union[str, Path],
    variant: str = "cifar10",
    split: str = "train",
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    checksums: Optional[Dict[str, str]] = None,
    expected_records: Optional[int] = -1,
) -> Dataset:
    """
    Load one split of a CIFAR binary archive.

    Args:
        path: Directory holding the .bin files (or their standard parent)
        variant: "cifar10" or "cifar100"
        split: "train" or "test"
        stats: Normalization (mean, std) to use; computed from the data if omitted
        checksums: Expected sha256 per file name
        expected_records: Records per file; -1 uses the standard counts, None
            accepts any whole number of records

    Returns:
        Dataset with provenance listing every file read and its checksum
    """
    record_size(variant)
    if (variant, split) not in CIFAR_FILES:
        raise ArgumentError(f"unknown split {split!r}; expected train or test")
    root = _resolve_cifar_dir(Path(path), variant)
    names = CIFAR_FILES[(variant, split)]
    if expected_records == -1:
        expected_records = CIFAR_RECORDS[(variant, split)]

    pixels, labels, coarse, provenance = [], [], [], []
    for name in names:
        file = root / name
        if not file.is_file():
            raise DataFormatError(f"missing {variant} file {file}")
        actual = file.stat().st_size
        if expected_records is not None:
            expected = expected_records * record_size(variant)
            if actual != expected:
                raise DataFormatError(f"{file}: expected {expected} bytes, found {actual}")
        digest = sha256_file(file)
        if checksums and name in checksums and checksums[name] != digest:
            raise DataFormatError(f"{file}: sha256 {digest} does not match expected {checksums[name]}")
        p, l, c = decode_cifar_records(file.read_bytes(), variant)
        pixels.append(p)
        labels.append(l)
        if c is not None:
            coarse.append(c)
        provenance.append({"file": str(file), "sha256": digest})

    all_pixels = np.concatenate(pixels)
    if stats is None:
        if split != "train":
            logger.warning(f"No training statistics supplied for {variant} {split}; normalizing with its own")
        stats = channel_stats(all_pixels)
    dataset = Dataset(
        pixels=all_pixels,
        labels=np.concatenate(labels),
        num_classes=CIFAR_LAYOUT[variant][1],
        mean=stats[0],
        std=stats[1],
        variant=variant,
        coarse_labels=np.concatenate(coarse) if coarse else None,
        provenance=provenance,
    )
    logger.info(f"Loaded {len(dataset)} {variant} {split} images from {root}")
    return dataset


def load_cifar_splits(path: Union[str, Path], variant: str = "cifar10", **kwargs) -> Tuple[Dataset, Dataset]:
    """Training and test splits; the test split is normalized with training statistics."""
    train = load_cifar(path, variant, "train", **kwargs)
    test = load_cifar(path, variant, "test", stats=(train.mean, train.std), **kwargs)
    return train, test


# ---------------------------------------------------------------------------
# Synthetic toy data
# ---------------------------------------------------------------------------

def make_toy_dataset(
    num_samples: int = 1000,
    num_classes: int = 2,
    size: int = 8,
    seed: int = 0,
    noise: float = 0.15,
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Dataset:
    """
    Gaussian blobs rendered as small RGB images.

    Each class owns a row band and a colour, so the label survives horizontal
    flips and crops of a pixel or two.

    Args:
        num_samples: Number of images
        num_classes: Number of classes (>= 2)
        size: Image height and width
        seed: Generator seed; equal seeds give identical datasets
        noise: Std of the additive pixel noise in [0, 1] units
        stats: Normalization statistics to reuse (for a test set)

    Returns:
        Dataset with balanced class counts
    """
    if num_classes < 2 or num_samples < num_classes or size < 2:
        raise ArgumentError("toy dataset needs >= 2 classes, >= 1 sample per class and size >= 2")
    rng = np.random.default_rng(seed)
    palette = np.random.default_rng(12345).uniform(0.3, 1.0, size=(num_classes, 3))
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    grid = np.arange(size, dtype=np.float64)
    sigma = max(size / (2.5 * num_classes), 0.8)
    images = np.empty((num_samples, 3, size, size))
    for i, label in enumerate(labels):
        row = (label + 0.5) * size / num_classes + rng.normal(0, 0.3)
        col = rng.uniform(0.25 * size, 0.75 * size)
        blob = np.exp(-((grid[:, None] - row) ** 2 + (grid[None, :] - col) ** 2) / (2 * sigma ** 2))
        images[i] = palette[label][:, None, None] * blob[None] + rng.normal(0, noise, size=(3, size, size))
    pixels = np.clip(np.round(images * 255), 0, 255).astype(np.uint8)
    if stats is None:
        stats = channel_stats(pixels)
    return Dataset(
        pixels=pixels,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        mean=stats[0],
        std=stats[1],
        variant="toy",
        provenance=[{"file": f"toy(seed={seed}, n={num_samples}, classes={num_classes}, size={size})", "sha256": ""}],
    )


# ---------------------------------------------------------------------------
# Splits, augmentation and batches
# ---------------------------------------------------------------------------

def make_splits(dataset: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Stratified, seed-deterministic split into disjoint train and val parts.

    Args:
        dataset: Dataset to split
        val_fraction: Share of samples assigned to val, in (0, 1)
        seed: Shuffle seed

    Returns:
        (train, val); both keep the parent's normalization statistics
    """
    if not 0.0 < val_fraction < 1.0:
        raise ArgumentError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    indices = np.arange(len(dataset))
    try:
        train_idx, val_idx = train_test_split(
            indices, test_size=val_fraction, random_state=seed, shuffle=True, stratify=dataset.labels
        )
    except ValueError as e:
        logger.warning(f"Stratified split impossible ({e}); falling back to a plain shuffle split")
        train_idx, val_idx = train_test_split(indices, test_size=val_fraction, random_state=seed, shuffle=True)
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


@dataclass
class AugmentPolicy:
    """Training-time augmentation; every component can be switched off."""

    crop_padding: int = 4
    flip: bool = True
    cutout_size: int = 0
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    @property
    def is_identity(self) -> bool:
        return self.crop_padding == 0 and not self.flip and self.cutout_size == 0

    def with_stats(self, mean: np.ndarray, std: np.ndarray) -> "AugmentPolicy":
        return replace(self, mean=mean, std=std)


def scaled_cutout_size(size: int, image_size: int) -> int:
    """Cutout side for an image_size input, given the side used on 32x32 images."""
    if size <= 0:
        return 0
    return max(1, size * image_size // CUTOUT_REFERENCE_SIZE)


def training_policy(base: Optional[AugmentPolicy], cutout_size: int, image_size: int) -> AugmentPolicy:
    """
    Crop and flip settings of base plus cutout scaled to the image.

    Args:
        base: Crop/flip policy; None uses the defaults
        cutout_size: Cutout side at 32x32, 0 disables cutout
        image_size: Side of the images being augmented

    Returns:
        AugmentPolicy without normalization statistics
    """
    base = base if base is not None else AugmentPolicy()
    return AugmentPolicy(
        crop_padding=base.crop_padding,
        flip=base.flip,
        cutout_size=scaled_cutout_size(cutout_size, image_size),
    )


def cutout(image: np.ndarray, size: int, rng: np.random.Generator, center: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Zero a size x size square centered on a random pixel, clipped to the image.

    Args:
        image: (C, H, W) image
        size: Side of the square; 0 returns the image unchanged
        rng: Generator for the center
        center: Fixed (row, col) center instead of a random one

    Returns:
        Masked copy of the image
    """
    out = np.array(image, copy=True)
    if size <= 0:
        return out
    h, w = out.shape[-2:]
    cy, cx = (int(rng.integers(h)), int(rng.integers(w))) if center is None else center
    y1, x1 = cy - size // 2, cx - size // 2
    y1, y2 = np.clip([y1, y1 + size], 0, h)
    x1, x2 = np.clip([x1, x1 + size], 0, w)
    out[..., y1:y2, x1:x2] = 0
    return out


def random_crop(image: np.ndarray, padding: int, rng: np.random.Generator) -> np.ndarray:
    if padding <= 0:
        return image
    h, w = image.shape[-2:]
    padded = np.pad(image, ((0, 0), (padding, padding), (padding, padding)))
    dy, dx = rng.integers(0, 2 * padding + 1, size=2)
    return padded[:, dy:dy + h, dx:dx + w]


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def eval_transform(image: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    if policy.mean is None:
        return np.asarray(image, dtype=np.float32)
    return normalize(image, policy.mean, policy.std)


def augment_image(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Crop, flip, normalize then cut out a [0, 1] image."""
    out = random_crop(image, policy.crop_padding, rng)
    if policy.flip and rng.random() < 0.5:
        out = horizontal_flip(out)
    out = eval_transform(out, policy)
    return cutout(out, policy.cutout_size, rng)


def augment_train(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy) -> Sample:
    """Training view of a raw sample; the result is in normalized units."""
    return replace(sample, image=augment_image(sample.image, rng, policy))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    split: str


def batch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def iterate_batches(
    dataset: Dataset,
    batch_size: int,
    seed: int,
    epoch: int,
    policy: Optional[AugmentPolicy] = None,
    split: str = "train",
    stream: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """
    Yield batches whose order and augmentation depend only on (seed, epoch, stream).

    Args:
        dataset: Source dataset
        batch_size: Samples per batch; the last batch may be smaller
        seed: Run seed
        epoch: Zero-based epoch
        policy: Augmentation policy; None applies normalization only
        split: Tag carried by every batch
        stream: Distinguishes independent streams drawn in the same epoch
        shuffle: Permute the sample order

    Returns:
        Iterator of Batch
    """
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    rng = batch_rng(seed, epoch, stream)
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    augment = policy is not None and not policy.is_identity
    if policy is not None and policy.mean is None:
        policy = policy.with_stats(dataset.mean, dataset.std)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if augment:
            raw = dataset.raw(idx)
            images = np.stack([augment_image(img, rng, policy) for img in raw])
        else:
            images = dataset.images(idx)
        yield Batch(images=images, labels=dataset.labels[idx], indices=idx, split=split)


@dataclass
class DataConfig:
    """Where the images come from and how they are augmented during training."""

    dataset: str = "toy"
    path: Optional[str] = None
    num_samples: int = 1000
    test_samples: int = 500
    num_classes: int = 2
    image_size: int = 8
    noise: float = 0.15
    seed: int = 0
    crop_padding: int = 4
    flip: bool = True

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(crop_padding=self.crop_padding, flip=self.flip)


def load_datasets(config: DataConfig) -> Tuple[Dataset, Dataset]:
    """
    Training and test sets described by a data configuration.

    Args:
        config: Data section of the run configuration

    Returns:
        (train, test); the test set shares the training normalization
    """
    if config.dataset == "toy":
        train = make_toy_dataset(config.num_samples, config.num_classes, config.image_size, config.seed, config.noise)
        test = make_toy_dataset(
            config.test_samples,
            config.num_classes,
            config.image_size,
            config.seed + 1,
            config.noise,
            stats=(train.mean, train.std),
        )
        logger.info(f"Generated toy dataset: {len(train)} train / {len(test)} test images of {config.image_size}x{config.image_size}")
        return train, test
    if config.dataset in CIFAR_LAYOUT:
        if not config.path:
            raise ArgumentError(f"data.path (or ANYTIME_SEARCH_DATA_DIR) must point at the {config.dataset} binaries")
        return load_cifar_splits(config.path, config.dataset)
    raise ArgumentError(f"unknown dataset {config.dataset!r}; expected toy, cifar10 or cifar100")
