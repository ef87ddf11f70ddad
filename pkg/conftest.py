"""
Shared fixtures and the central-difference gradient checker.
Set ANYTIME_SEARCH_SLOW=1 to run the tests marked slow.
"""

import os
from typing import Callable, Dict, Optional

import numpy as np
import pytest

from anytime_search.data import make_toy_dataset
from anytime_search.genotype import AlphaTable, Genotype, derive_genotype
from anytime_search.network import NetworkConfig
from anytime_search.tensor import Tensor, backward


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, needs ANYTIME_SEARCH_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("ANYTIME_SEARCH_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set ANYTIME_SEARCH_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def numeric_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, index, step: float = 1e-6) -> float:
    original = tensor.data[index]
    tensor.data[index] = original + step
    plus = loss_fn().item()
    tensor.data[index] = original - step
    minus = loss_fn().item()
    tensor.data[index] = original
    return (plus - minus) / (2 * step)


def gradient_check(
    loss_fn: Callable[[], Tensor],
    tensors: Dict[str, Tensor],
    samples: Optional[int] = None,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """
    Largest relative error between backward() and central differences.

    Args:
        loss_fn: Rebuilds the scalar loss from the current tensor values
        tensors: Leaves to check, by name
        samples: Entries checked per tensor; all entries when None
        step: Finite-difference step

    Returns:
        max |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
    """
    for tensor in tensors.values():
        tensor.grad = None
    backward(loss_fn())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in tensors.items():
        flat = np.arange(tensor.size)
        if samples is not None and tensor.size > samples:
            flat = rng.choice(tensor.size, size=samples, replace=False)
        for position in flat:
            index = np.unravel_index(int(position), tensor.shape)
            numeric = numeric_gradient(loss_fn, tensor, index, step)
            exact = float(analytic[name][index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-3)
            worst = max(worst, error)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_dataset():
    return make_toy_dataset(num_samples=64, num_classes=2, size=8, seed=0)


@pytest.fixture
def tiny_config():
    """3 layers, 2 scales, 2 nodes on 8x8 inputs with an exit at layers 2 and 3."""
    return NetworkConfig(
        layers=3,
        scales=2,
        init_channels=4,
        nodes=2,
        early_exits=True,
        reduction_layers=(3,),
        num_classes=2,
        input_size=8,
    )


def random_genotype(nodes: int, rng: np.random.Generator) -> Genotype:
    shape = AlphaTable.zeros(nodes).normal.shape
    alphas = AlphaTable.from_arrays(rng.normal(size=shape), rng.normal(size=shape))
    return derive_genotype(alphas)


@pytest.fixture
def make_genotype():
    return random_genotype
