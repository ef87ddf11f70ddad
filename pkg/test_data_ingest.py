import hashlib

import numpy as np
import pytest

from anytime_search.data import (
    AugmentPolicy,
    DataConfig,
    Dataset,
    Sample,
    augment_image,
    augment_train,
    decode_cifar_records,
    encode_cifar_records,
    horizontal_flip,
    iterate_batches,
    load_cifar,
    load_cifar_splits,
    load_datasets,
    make_splits,
    make_toy_dataset,
    random_crop,
    record_size,
    scaled_cutout_size,
    sha256_file,
    training_policy,
)
from anytime_search.errors import ArgumentError, DataFormatError
from anytime_search.search import SearchConfig
from anytime_search.trainer import TrainConfig


def _records(rng, n, classes=10):
    pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, classes, size=n)
    return pixels, labels


def _write_cifar10(root, rng, per_file=4):
    root.mkdir(parents=True, exist_ok=True)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        pixels, labels = _records(rng, per_file)
        (root / name).write_bytes(encode_cifar_records(pixels, labels, "cifar10"))
    return names


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def test_record_layout():
    assert record_size("cifar10") == 3073
    assert record_size("cifar100") == 3074
    with pytest.raises(ArgumentError):
        record_size("svhn")


def test_decode_reencode_is_byte_identical(rng):
    pixels, labels = _records(rng, 5)
    raw = encode_cifar_records(pixels, labels, "cifar10")
    decoded, decoded_labels, coarse = decode_cifar_records(raw, "cifar10")
    assert coarse is None
    np.testing.assert_array_equal(decoded, pixels)
    np.testing.assert_array_equal(decoded_labels, labels)
    assert encode_cifar_records(decoded, decoded_labels, "cifar10") == raw


def test_record_planes_are_channel_major(rng):
    pixels, labels = _records(rng, 1)
    raw = encode_cifar_records(pixels, labels, "cifar10")
    assert raw[0] == labels[0]
    assert raw[1:1025] == pixels[0, 0].tobytes()
    assert raw[1025:2049] == pixels[0, 1].tobytes()


def test_cifar100_keeps_coarse_labels(rng):
    pixels, fine = _records(rng, 3, classes=100)
    coarse = np.array([1, 7, 19])
    decoded, labels, decoded_coarse = decode_cifar_records(encode_cifar_records(pixels, fine, "cifar100", coarse), "cifar100")
    np.testing.assert_array_equal(labels, fine)
    np.testing.assert_array_equal(decoded_coarse, coarse)


def test_decode_rejects_bad_records(rng):
    pixels, labels = _records(rng, 2)
    raw = encode_cifar_records(pixels, labels, "cifar10")
    with pytest.raises(DataFormatError):
        decode_cifar_records(raw[:-1], "cifar10")
    corrupt = bytearray(raw)
    corrupt[3073] = 10
    with pytest.raises(DataFormatError):
        decode_cifar_records(bytes(corrupt), "cifar10")


def test_decode_rejects_out_of_range_coarse_labels(rng):
    pixels, fine = _records(rng, 2, classes=100)
    raw = bytearray(encode_cifar_records(pixels, fine, "cifar100", np.array([3, 19])))
    raw[record_size("cifar100")] = 20
    with pytest.raises(DataFormatError, match="record 1: coarse label 20"):
        decode_cifar_records(bytes(raw), "cifar100")


def test_full_size_test_file(tmp_path, rng):
    pixels, labels = _records(rng, 10000)
    (tmp_path / "test_batch.bin").write_bytes(encode_cifar_records(pixels, labels, "cifar10"))
    dataset = load_cifar(tmp_path, "cifar10", "test", stats=(np.full(3, 0.5), np.full(3, 0.25)))
    assert len(dataset) == 10000
    assert dataset.pixels.shape == (10000, 3, 32, 32)
    np.testing.assert_array_equal(dataset.labels, labels)
    assert dataset.num_classes == 10


def test_truncated_file_is_rejected(tmp_path, rng):
    pixels, labels = _records(rng, 3)
    (tmp_path / "test_batch.bin").write_bytes(encode_cifar_records(pixels, labels, "cifar10")[:-100])
    with pytest.raises(DataFormatError):
        load_cifar(tmp_path, "cifar10", "test")
    with pytest.raises(DataFormatError):
        load_cifar(tmp_path, "cifar10", "test", expected_records=None)


def test_missing_file_is_rejected(tmp_path):
    with pytest.raises(DataFormatError):
        load_cifar(tmp_path, "cifar10", "test")
    with pytest.raises(ArgumentError):
        load_cifar(tmp_path, "cifar10", "validation")


def test_train_split_reads_every_batch_file(tmp_path, rng):
    root = tmp_path / "cifar-10-batches-bin"
    _write_cifar10(root, rng)
    train, test = load_cifar_splits(tmp_path, "cifar10", expected_records=4)
    assert len(train) == 20 and len(test) == 4
    assert [p["sha256"] for p in train.provenance] == [sha256_file(root / f"data_batch_{i}.bin") for i in range(1, 6)]
    np.testing.assert_array_equal(test.mean, train.mean)
    np.testing.assert_array_equal(test.std, train.std)


def test_checksum_mismatch(tmp_path, rng):
    _write_cifar10(tmp_path, rng)
    with pytest.raises(DataFormatError):
        load_cifar(tmp_path, "cifar10", "test", expected_records=4, checksums={"test_batch.bin": "0" * 64})
    good = sha256_file(tmp_path / "test_batch.bin")
    assert good == hashlib.sha256((tmp_path / "test_batch.bin").read_bytes()).hexdigest()
    load_cifar(tmp_path, "cifar10", "test", expected_records=4, checksums={"test_batch.bin": good})


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _indexed_dataset(n=50000, classes=10) -> Dataset:
    """Tiny 1x1 images whose three channels spell out the sample index."""
    index = np.arange(n)
    pixels = np.stack([index % 256, (index // 256) % 256, index // 65536], axis=1).astype(np.uint8)
    return Dataset(
        pixels=pixels.reshape(n, 3, 1, 1),
        labels=index % classes,
        num_classes=classes,
        mean=np.zeros(3, dtype=np.float32),
        std=np.ones(3, dtype=np.float32),
    )


def _indices(dataset: Dataset) -> np.ndarray:
    p = dataset.pixels.reshape(len(dataset), 3).astype(np.int64)
    return p[:, 0] + 256 * p[:, 1] + 65536 * p[:, 2]


def test_split_halves_are_disjoint_and_complete():
    dataset = _indexed_dataset()
    train, val = make_splits(dataset, 0.5, seed=0)
    assert len(train) == len(val) == 25000
    a, b = _indices(train), _indices(val)
    assert not set(a.tolist()) & set(b.tolist())
    assert len(np.union1d(a, b)) == 50000
    assert np.abs(train.class_counts() - val.class_counts()).max() <= 1


def test_split_depends_only_on_the_seed():
    dataset = _indexed_dataset(2000)
    first, _ = make_splits(dataset, 0.5, seed=3)
    again, _ = make_splits(dataset, 0.5, seed=3)
    other, _ = make_splits(dataset, 0.5, seed=4)
    np.testing.assert_array_equal(_indices(first), _indices(again))
    assert not np.array_equal(_indices(first), _indices(other))


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
def test_split_fraction_must_be_open_interval(fraction):
    with pytest.raises(ArgumentError):
        make_splits(_indexed_dataset(100), fraction, seed=0)


# ---------------------------------------------------------------------------
# augmentation and batches
# ---------------------------------------------------------------------------

def test_identity_policy_only_normalizes(toy_dataset):
    policy = AugmentPolicy(crop_padding=0, flip=False, cutout_size=0)
    assert policy.is_identity
    batch = next(iterate_batches(toy_dataset, 8, seed=0, epoch=0, policy=policy))
    np.testing.assert_array_equal(batch.images, toy_dataset.images(batch.indices))


def test_augment_without_randomness_is_normalization(toy_dataset, rng):
    policy = AugmentPolicy(crop_padding=0, flip=False, mean=toy_dataset.mean, std=toy_dataset.std)
    image = toy_dataset.raw([0])[0]
    np.testing.assert_allclose(augment_image(image, rng, policy), toy_dataset.images([0])[0], rtol=1e-6)


def test_augment_train_keeps_labels():
    image = np.random.default_rng(0).random((3, 8, 8))
    original = image.copy()
    sample = Sample(image=image, label=3, coarse_label=1)
    policy = AugmentPolicy(crop_padding=2, cutout_size=4)
    first = augment_train(sample, np.random.default_rng(5), policy)
    again = augment_train(sample, np.random.default_rng(5), policy)
    assert (first.label, first.coarse_label) == (3, 1)
    assert first.image.shape == image.shape
    np.testing.assert_array_equal(first.image, again.image)
    np.testing.assert_array_equal(sample.image, original)


def test_cutout_sizes_scale_with_the_image():
    assert scaled_cutout_size(16, 32) == 16
    assert scaled_cutout_size(16, 8) == 4
    assert scaled_cutout_size(16, 2) == 1
    assert scaled_cutout_size(0, 8) == 0
    policy = training_policy(AugmentPolicy(crop_padding=1, flip=False), 16, 16)
    assert (policy.crop_padding, policy.flip, policy.cutout_size) == (1, False, 8)
    assert training_policy(None, 0, 8) == AugmentPolicy()


def test_default_config_batches_are_not_blank():
    data = DataConfig()
    train, _ = load_datasets(data)
    for cutout_size in (SearchConfig().cutout_size, TrainConfig().cutout_size):
        policy = training_policy(data.policy(), cutout_size, train.image_size)
        assert policy.cutout_size == 4
        batch = next(iterate_batches(train, TrainConfig().batch_size, seed=0, epoch=0, policy=policy))
        # crop padding normalizes to non-zero values, so exact zeros come from cutout only
        zeros = (batch.images == 0).sum(axis=(1, 2, 3))
        assert zeros.max() <= 3 * 4 * 4
        assert zeros.min() > 0


def test_flip_is_an_involution(rng):
    image = rng.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(horizontal_flip(horizontal_flip(image)), image)
    np.testing.assert_array_equal(horizontal_flip(image)[..., 0], image[..., -1])


def test_random_crop_covers_every_offset(rng):
    image = np.arange(1, 3 * 6 * 6 + 1, dtype=np.float64).reshape(3, 6, 6)
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)))
    candidates = {(dy, dx): padded[:, dy:dy + 6, dx:dx + 6] for dy in range(3) for dx in range(3)}
    seen = set()
    for _ in range(200):
        crop = random_crop(image, 1, rng)
        assert crop.shape == image.shape
        seen.update(k for k, v in candidates.items() if np.array_equal(v, crop))
    assert seen == set(candidates)
    assert random_crop(image, 0, rng) is image


def test_batches_are_deterministic(toy_dataset):
    policy = AugmentPolicy(crop_padding=1, cutout_size=2)
    first = list(iterate_batches(toy_dataset, 24, seed=1, epoch=2, policy=policy, stream=1))
    again = list(iterate_batches(toy_dataset, 24, seed=1, epoch=2, policy=policy, stream=1))
    assert [len(b.labels) for b in first] == [24, 24, 16]
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.indices, b.indices)
    next_epoch = next(iterate_batches(toy_dataset, 24, seed=1, epoch=3, policy=policy, stream=1))
    assert not np.array_equal(next_epoch.indices, first[0].indices)
    ordered = np.concatenate([b.indices for b in iterate_batches(toy_dataset, 24, seed=1, epoch=0, shuffle=False)])
    np.testing.assert_array_equal(ordered, np.arange(64))
    with pytest.raises(ArgumentError):
        next(iterate_batches(toy_dataset, 0, seed=0, epoch=0))


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------

def test_toy_dataset_is_deterministic_and_balanced():
    a = make_toy_dataset(num_samples=90, num_classes=3, size=8, seed=4)
    b = make_toy_dataset(num_samples=90, num_classes=3, size=8, seed=4)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.class_counts().tolist() == [30, 30, 30]
    assert a.pixels.shape == (90, 3, 8, 8) and a.pixels.dtype == np.uint8
    c = make_toy_dataset(num_samples=90, num_classes=3, size=8, seed=5)
    assert not np.array_equal(a.pixels, c.pixels)


def test_toy_dataset_arguments():
    with pytest.raises(ArgumentError):
        make_toy_dataset(num_samples=10, num_classes=1)
    with pytest.raises(ArgumentError):
        make_toy_dataset(num_samples=1, num_classes=2)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(DataFormatError):
        Dataset(
            pixels=np.zeros((2, 3, 4, 4), dtype=np.uint8),
            labels=np.array([0, 2]),
            num_classes=2,
            mean=np.zeros(3),
            std=np.ones(3),
        )


def test_load_datasets():
    train, test = load_datasets(DataConfig(num_samples=40, test_samples=10, image_size=6))
    assert (len(train), len(test)) == (40, 10)
    np.testing.assert_array_equal(test.mean, train.mean)
    with pytest.raises(ArgumentError):
        load_datasets(DataConfig(dataset="cifar10"))
