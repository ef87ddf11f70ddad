import json

import numpy as np
import pandas as pd
import pytest

from anytime_search.data import AugmentPolicy, cutout, iterate_batches, make_splits, make_toy_dataset
from anytime_search.errors import ArgumentError, ConfigError, NonFiniteLossError
from anytime_search.genotype import Genotype, derive_cell
from anytime_search.network import NetworkConfig
from anytime_search.operations import PRIMITIVES, ZERO_INDEX
from anytime_search.optim import Adam
from anytime_search.search import (
    SearchConfig,
    bilevel_step,
    cumulative_loss,
    epoch_batches,
    exit_weights,
    new_search_state,
    run_search,
)
from anytime_search.tensor import (
    Tensor,
    add,
    backward,
    constant,
    mul,
    no_grad,
    parameter,
    softmax,
    softmax_cross_entropy,
    sum_all,
    weighted_sum,
)


def _logits(rng, n=6, classes=4, exits=3):
    return [Tensor(rng.normal(size=(n, classes))) for _ in range(exits)], rng.integers(0, classes, size=n)


def _ce(logits, targets):
    return softmax_cross_entropy(logits, targets).item()


# ---------------------------------------------------------------------------
# cumulative loss
# ---------------------------------------------------------------------------

def test_single_exit_loss_is_plain_cross_entropy(rng):
    logits, targets = _logits(rng, exits=1)
    assert cumulative_loss(logits, targets, [1.0]).item() == pytest.approx(_ce(logits[0], targets))


def test_one_hot_weights_select_one_exit(rng):
    logits, targets = _logits(rng)
    assert cumulative_loss(logits, targets, [1.0, 0.0, 0.0]).item() == pytest.approx(_ce(logits[0], targets))
    assert cumulative_loss(logits, targets, [0.0, 0.0, 1.0]).item() == pytest.approx(_ce(logits[2], targets))


def test_equal_weights_average_the_exits(rng):
    logits, targets = _logits(rng)
    expected = np.mean([_ce(l, targets) for l in logits])
    assert cumulative_loss(logits, targets, exit_weights(None, 3)).item() == pytest.approx(expected)


def test_loss_ignores_sample_order(rng):
    logits, targets = _logits(rng)
    perm = rng.permutation(len(targets))
    shuffled = [Tensor(l.data[perm]) for l in logits]
    w = [0.2, 0.3, 0.5]
    assert cumulative_loss(shuffled, targets[perm], w).item() == pytest.approx(cumulative_loss(logits, targets, w).item())


def test_loss_argument_errors(rng):
    logits, targets = _logits(rng)
    with pytest.raises(ArgumentError):
        cumulative_loss(logits, targets, [0.5, 0.5])


def test_non_finite_loss_names_the_exit(rng):
    logits, targets = _logits(rng)
    logits[1].data[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        cumulative_loss(logits, targets, [1.0, 1.0, 1.0], phase="val")
    assert info.value.exit_index == 1
    assert info.value.phase == "val"


def test_exit_weights():
    np.testing.assert_allclose(exit_weights(None, 4), [0.25] * 4)
    np.testing.assert_allclose(exit_weights([1, 0, 2], 3), [1.0, 0.0, 2.0])
    with pytest.raises(ConfigError):
        exit_weights([1.0], 2)
    with pytest.raises(ConfigError):
        exit_weights([1.0, -1.0], 2)
    with pytest.raises(ConfigError):
        exit_weights([0.0, 0.0], 2)


@pytest.mark.parametrize(
    "kwargs,key",
    [
        ({"epochs": -1}, "search.epochs"),
        ({"batch_size": 0}, "search.batch_size"),
        ({"val_split": 1.0}, "search.val_split"),
        ({"alpha_lr": -1e-3}, "search.alpha_lr"),
        ({"cutout_size": -2}, "search.cutout_size"),
    ],
)
def test_search_config_validation(kwargs, key):
    with pytest.raises(ConfigError) as info:
        SearchConfig(**kwargs).validate()
    assert info.value.key == key


# ---------------------------------------------------------------------------
# cutout
# ---------------------------------------------------------------------------

def test_cutout_size_zero_is_identity(rng):
    image = rng.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(cutout(image, 0, rng), image)


def test_cutout_larger_than_twice_the_image_blanks_it(rng):
    image = rng.normal(size=(3, 8, 8)) + 5.0
    for _ in range(10):
        assert not cutout(image, 16, rng).any()


def test_cutout_is_clipped_at_the_border(rng):
    image = np.ones((3, 32, 32))
    out = cutout(image, 16, rng, center=(0, 0))
    assert not out[:, :8, :8].any()
    assert out[:, 8:, :].all() and out[:, :, 8:].all()
    assert int((out == 0).sum()) == 3 * 8 * 8
    assert image.all()


@pytest.mark.parametrize("size", [1, 3, 5])
def test_odd_cutout_is_a_full_square_around_the_center(rng, size):
    image = np.ones((3, 16, 16))
    out = cutout(image, size, rng, center=(8, 8))
    assert int((out == 0).sum()) == 3 * size * size
    lo = 8 - size // 2
    assert not out[:, lo:lo + size, lo:lo + size].any()


def test_search_augments_weight_batches_only(toy_dataset):
    cfg = SearchConfig(batch_size=16)
    policy = AugmentPolicy(crop_padding=2, cutout_size=4)
    train, val = make_splits(toy_dataset, 0.5, seed=0)
    for train_batch, val_batch in epoch_batches(train, val, cfg, 0, policy):
        assert (train_batch.split, val_batch.split) == ("train", "val")
        np.testing.assert_array_equal(val_batch.images, val.images(val_batch.indices))
    augmented = next(iterate_batches(train, 16, cfg.seed, 0, policy, stream=0))
    assert not np.array_equal(augmented.images, train.images(augmented.indices))


# ---------------------------------------------------------------------------
# bilevel step
# ---------------------------------------------------------------------------

def _batches(dataset, n=16):
    train = next(iterate_batches(dataset, n, seed=0, epoch=0, split="train", stream=0))
    val = next(iterate_batches(dataset, n, seed=0, epoch=0, split="val", stream=1))
    return train, val


def _snapshot(tensors):
    return {name: t.data.copy() for name, t in tensors.items()}


def test_initial_alphas_are_uniform(tiny_config):
    state = new_search_state(tiny_config, SearchConfig())
    for tensor in state.alphas.values():
        assert not tensor.data.any()


def test_zero_alpha_lr_freezes_the_architecture(tiny_config, toy_dataset):
    state = new_search_state(tiny_config, SearchConfig(alpha_lr=0.0))
    alphas, weights = _snapshot(state.alphas), _snapshot(state.weights)
    bilevel_step(state, *_batches(toy_dataset))
    for name, value in alphas.items():
        np.testing.assert_array_equal(state.alphas[name].data, value)
    assert any(not np.array_equal(state.weights[n].data, v) for n, v in weights.items())


def test_step_moves_alphas_and_weights(tiny_config, toy_dataset):
    state = new_search_state(tiny_config, SearchConfig(alpha_lr=3e-3))
    alphas = _snapshot(state.alphas)
    result = bilevel_step(state, *_batches(toy_dataset))
    assert np.isfinite(result.train_loss) and np.isfinite(result.val_loss)
    assert len(result.train_logits) == 2
    for name, value in alphas.items():
        assert not np.array_equal(state.alphas[name].data, value)
    # alphas and weights stay trainable for the next step
    assert all(t.requires_grad for t in state.alphas.values())
    assert all(t.requires_grad for t in state.weights.values())


def test_bilevel_step_is_deterministic(tiny_config, toy_dataset):
    results = []
    for _ in range(2):
        state = new_search_state(tiny_config, SearchConfig(alpha_lr=3e-3))
        bilevel_step(state, *_batches(toy_dataset))
        results.append((_snapshot(state.alphas), _snapshot(state.weights)))
    for first, second in zip(*results):
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])


def test_bilevel_step_checks_split_tags(tiny_config, toy_dataset):
    state = new_search_state(tiny_config, SearchConfig())
    train, val = _batches(toy_dataset)
    with pytest.raises(ArgumentError):
        bilevel_step(state, val, train)
    with pytest.raises(ArgumentError):
        bilevel_step(state, train, train)


def test_alpha_descent_prefers_the_better_op():
    target = np.linspace(-1.0, 1.0, 12).reshape(3, 4)
    good, bad = constant(target), constant(target + 1.0)
    alpha = parameter(np.zeros((1, 2)), name="alpha")
    optimizer = Adam({"alpha": alpha}, lr=0.1, weight_decay=0.0)
    for _ in range(50):
        optimizer.zero_grad()
        mixed = weighted_sum([good, bad], softmax(alpha), row=0)
        diff = add(mixed, constant(-target))
        backward(sum_all(mul(diff, diff)))
        optimizer.step()
    weights = softmax(Tensor(alpha.data)).data[0]
    assert weights[0] > 0.9


def _one_node_search_state():
    """One cell layer with a single node: edge 0 mixes skip_connect and zero, edge 1 is avg pooling."""
    config = NetworkConfig(
        layers=2, scales=1, init_channels=4, nodes=1, classifier_layers=(2,), reduction_layers=(), num_classes=2, input_size=8
    )
    search_config = SearchConfig(alpha_lr=0.05, alpha_beta1=0.0, alpha_weight_decay=0.0, weight_lr=0.05)
    state = new_search_state(config, search_config, dtype=np.float64)
    table = np.full((2, len(PRIMITIVES)), -30.0)
    table[0, PRIMITIVES.index("skip_connect")] = 0.0
    table[0, ZERO_INDEX] = 0.0
    table[1, PRIMITIVES.index("avg_pool_3x3")] = 0.0
    state.network.alphas.normal.data[...] = table
    state.network.alphas.reduce.data[...] = table
    return state


def _val_loss(state, batch):
    with no_grad():
        return cumulative_loss(state.forward(batch.images), batch.labels, state.classifier_weights).item()


def test_bilevel_alpha_step_descends_the_validation_loss(toy_dataset):
    state = _one_node_search_state()
    state.network.train()
    alpha = state.network.alphas.normal
    skip, zero = PRIMITIVES.index("skip_connect"), ZERO_INDEX
    train, val = _batches(toy_dataset)
    for _ in range(3):
        before = alpha.data.copy()
        step = 1e-5
        alpha.data[0, skip] = before[0, skip] + step
        plus = _val_loss(state, val)
        alpha.data[0, skip] = before[0, skip] - step
        minus = _val_loss(state, val)
        alpha.data[...] = before
        slope = (plus - minus) / (2 * step)

        bilevel_step(state, train, val)
        # the alpha phase differentiates the validation loss at the pre-step weights
        assert alpha.grad[0, skip] == pytest.approx(slope, rel=1e-4, abs=1e-9)
        assert alpha.grad[0, zero] == pytest.approx(-slope, rel=1e-4, abs=1e-9)
        moved = alpha.data - before
        # without momentum each Adam step moves against the current gradient sign
        assert np.sign(moved[0, skip]) == -np.sign(slope)
        assert moved[0, zero] == pytest.approx(-moved[0, skip], rel=1e-6)
    # the zero op never survives discretization
    assert derive_cell(alpha.data) == ((("skip_connect", 0), ("avg_pool_3x3", 1)),)


def test_useful_op_gains_weight_over_zero():
    # only the mixture weight of x against the zero map is learned
    x = np.linspace(-1.0, 1.0, 12).reshape(3, 4)
    target = 2.0 * x
    alpha = parameter(np.zeros((1, 2)), name="alpha")
    optimizer = Adam({"alpha": alpha}, lr=0.1, weight_decay=0.0)
    for _ in range(30):
        optimizer.zero_grad()
        mixed = weighted_sum([constant(x), None], softmax(alpha), row=0)
        diff = add(mixed, constant(-target))
        backward(sum_all(mul(diff, diff)))
        optimizer.step()
    useful, zero = alpha.data[0]
    assert useful > 1.0 and zero < -1.0
    table = np.full((2, len(PRIMITIVES)), -10.0)
    table[0, PRIMITIVES.index("skip_connect")] = useful
    table[0, ZERO_INDEX] = zero
    table[1, PRIMITIVES.index("max_pool_3x3")] = 0.0
    assert derive_cell(table) == ((("skip_connect", 0), ("max_pool_3x3", 1)),)


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------

SMALL = dict(batch_size=16, weight_lr=0.05, alpha_lr=3e-3, cutout=True)
POLICY = AugmentPolicy(crop_padding=1)


def test_zero_epochs_returns_the_initial_architecture(tiny_config, toy_dataset, tmp_path):
    first = run_search(toy_dataset, tiny_config, SearchConfig(epochs=0, **SMALL), out_dir=tmp_path)
    second = run_search(toy_dataset, tiny_config, SearchConfig(epochs=0, **SMALL))
    assert first.genotype == second.genotype
    assert len(first.alpha_history) == 1
    assert first.metrics.empty
    assert (tmp_path / "alphas" / "epoch_000.json").is_file()
    assert Genotype.load(tmp_path / "genotype.json") == first.genotype


def test_search_writes_history_and_metrics(tiny_config, toy_dataset, tmp_path):
    result = run_search(toy_dataset, tiny_config, SearchConfig(epochs=2, **SMALL), out_dir=tmp_path, augment=POLICY)
    assert [entry["epoch"] for entry in result.alpha_history] == [0, 1, 2]
    snapshot = json.loads((tmp_path / "alphas" / "epoch_002.json").read_text())
    weights = np.asarray(snapshot["weights"]["normal"])
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, rtol=1e-6)
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics.columns) == ["epoch", "exit_index", "split", "loss", "accuracy"]
    # two exits, train and val, two epochs
    assert len(metrics) == 8
    assert set(metrics["split"]) == {"train", "val"}
    assert metrics["accuracy"].between(0, 1).all()
    assert (tmp_path / "search_checkpoint.npz").is_file()
    result.genotype.validate()


def test_search_is_deterministic(tiny_config, toy_dataset):
    runs = [run_search(toy_dataset, tiny_config, SearchConfig(epochs=1, **SMALL), augment=POLICY) for _ in range(2)]
    a, b = (r.network.alphas.arrays() for r in runs)
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])
    pd.testing.assert_frame_equal(runs[0].metrics, runs[1].metrics)


class _Interrupted(Exception):
    pass


def test_resume_matches_an_uninterrupted_run(tiny_config, toy_dataset, tmp_path):
    config = SearchConfig(epochs=2, **SMALL)
    straight = run_search(toy_dataset, tiny_config, config, out_dir=tmp_path / "straight", augment=POLICY)

    def stop_after_first(epoch, rows):
        if epoch == 1:
            raise _Interrupted()

    with pytest.raises(_Interrupted):
        run_search(toy_dataset, tiny_config, config, out_dir=tmp_path / "resumed", augment=POLICY, on_epoch_end=stop_after_first)
    resumed = run_search(toy_dataset, tiny_config, config, out_dir=tmp_path / "resumed", augment=POLICY, resume=True)

    a, b = straight.network.alphas.arrays(), resumed.network.alphas.arrays()
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])
    for name, tensor in straight.network.store.params.items():
        np.testing.assert_array_equal(tensor.data, resumed.network.store.params[name].data)
    pd.testing.assert_frame_equal(straight.metrics, resumed.metrics)
    assert straight.genotype == resumed.genotype
    assert len(resumed.alpha_history) == 3


@pytest.mark.slow
def test_toy_search_learns():
    dataset = make_toy_dataset(num_samples=1000, num_classes=2, size=8, seed=0)
    config = NetworkConfig(
        layers=3, scales=2, init_channels=8, nodes=2, early_exits=True, reduction_layers=(3,), num_classes=2, input_size=8
    )
    result = run_search(dataset, config, SearchConfig(epochs=10, batch_size=32, weight_lr=0.05, alpha_lr=3e-3), augment=POLICY)
    last = result.metrics[(result.metrics["split"] == "val") & (result.metrics["epoch"] == 10)]
    assert last["accuracy"].iloc[-1] > 0.6
