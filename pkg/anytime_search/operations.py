"""
Candidate operations of the cell search space and the parameter store they
draw their weights from.
"""

import logging
import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .errors import ArgumentError, CheckpointError
from .tensor import (
    NormStats,
    Tensor,
    affine_norm,
    conv2d,
    parameter,
    pool2d,
    relu,
)

logger = logging.getLogger(__name__)

PRIMITIVES: Tuple[str, ...] = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "zero",
)
ZERO_INDEX = PRIMITIVES.index("zero")

# kernel size and dilation of the depthwise stage
CONV_SHAPES = {
    "sep_conv_3x3": (3, 1),
    "sep_conv_5x5": (5, 1),
    "dil_conv_3x3": (3, 2),
    "dil_conv_5x5": (5, 2),
}


class ParameterStore:
    """
    Named parameters and running normalization statistics of one network.

    Parameters are created on first use while the store is open and looked up
    afterwards, so a single forward routine both builds and runs a network.
    """

    def __init__(self, rng: Optional[np.random.Generator] = None, dtype=np.float32, relaxed: bool = False):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        self.relaxed = relaxed
        self.params: Dict[str, Tensor] = {}
        self.stats: Dict[str, NormStats] = {}
        self.training = True
        self.frozen = False

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def _get(self, name: str, factory) -> Tensor:
        tensor = self.params.get(name)
        if tensor is None:
            if self.frozen:
                raise CheckpointError(f"parameter {name!r} is missing from a frozen parameter store")
            tensor = parameter(factory().astype(self.dtype), name=name)
            self.params[name] = tensor
        return tensor

    def conv_weight(self, name: str, c_out: int, c_in_per_group: int, kernel: int) -> Tensor:
        fan_in = c_in_per_group * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        return self._get(name, lambda: self.rng.uniform(-bound, bound, size=(c_out, c_in_per_group, kernel, kernel)))

    def dense_weights(self, name: str, features: int, classes: int) -> Tuple[Tensor, Tensor]:
        bound = 1.0 / math.sqrt(features)
        weight = self._get(f"{name}.weight", lambda: self.rng.uniform(-bound, bound, size=(features, classes)))
        bias = self._get(f"{name}.bias", lambda: self.rng.uniform(-bound, bound, size=(classes,)))
        return weight, bias

    def norm(self, name: str, x: Tensor, affine: Optional[bool] = None) -> Tensor:
        """Batch-normalize x; affine defaults to learnable outside architecture search."""
        channels = x.shape[1]
        if affine is None:
            affine = not self.relaxed
        gamma = beta = None
        if affine:
            gamma = self._get(f"{name}.gamma", lambda: np.ones(channels))
            beta = self._get(f"{name}.beta", lambda: np.zeros(channels))
        stats = self.stats.get(name)
        if stats is None:
            if self.frozen:
                raise CheckpointError(f"normalization statistics {name!r} missing from a frozen parameter store")
            stats = NormStats.create(channels, dtype=self.dtype)
            self.stats[name] = stats
        return affine_norm(x, gamma, beta, mode="train" if self.training else "eval", running_stats=stats)

    def reset_stats(self):
        for stats in self.stats.values():
            stats.mean = np.zeros_like(stats.mean)
            stats.var = np.ones_like(stats.var)

    def named(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self.params.items():
            if name.startswith(prefix):
                yield name, tensor

    def count(self, prefix: str = "") -> int:
        return int(sum(t.size for _, t in self.named(prefix)))


def relu_conv_norm(
    store: ParameterStore,
    name: str,
    x: Tensor,
    c_out: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    affine: Optional[bool] = None,
) -> Tensor:
    out = conv2d(relu(x), store.conv_weight(f"{name}.conv", c_out, x.shape[1], kernel), stride, padding)
    return store.norm(f"{name}.norm", out, affine)


def sep_conv(store: ParameterStore, name: str, x: Tensor, kernel: int, stride: int) -> Tensor:
    """Two stacked ReLU -> depthwise -> pointwise -> norm stages; the first carries the stride."""
    channels = x.shape[1]
    pad = kernel // 2
    out = x
    for stage, step in ((1, stride), (2, 1)):
        out = relu(out)
        out = conv2d(out, store.conv_weight(f"{name}.dw{stage}", channels, 1, kernel), step, pad, 1, channels)
        out = conv2d(out, store.conv_weight(f"{name}.pw{stage}", channels, channels, 1))
        out = store.norm(f"{name}.norm{stage}", out)
    return out


def dil_conv(store: ParameterStore, name: str, x: Tensor, kernel: int, stride: int, dilation: int = 2) -> Tensor:
    channels = x.shape[1]
    pad = dilation * (kernel - 1) // 2
    out = relu(x)
    out = conv2d(out, store.conv_weight(f"{name}.dw", channels, 1, kernel), stride, pad, dilation, channels)
    out = conv2d(out, store.conv_weight(f"{name}.pw", channels, channels, 1))
    return store.norm(f"{name}.norm", out)


def pool_op(store: ParameterStore, name: str, x: Tensor, kind: str, stride: int) -> Tensor:
    out = pool2d(x, kind, 3, stride, 1)
    if store.relaxed:
        out = store.norm(f"{name}.norm", out, affine=False)
    return out


def skip_connect(store: ParameterStore, name: str, x: Tensor, stride: int) -> Tensor:
    if stride == 1:
        return x
    return relu_conv_norm(store, f"{name}.reduce", x, x.shape[1], 1, stride, 0)


def apply_op(store: ParameterStore, op: str, name: str, x: Tensor, stride: int) -> Optional[Tensor]:
    """
    Run one candidate operation.

    Args:
        store: Parameter store holding the op's weights
        op: Candidate name from PRIMITIVES
        name: Parameter name prefix of this op instance
        x: Input feature map (N, C, H, W)
        stride: 1, or 2 on reduction edges

    Returns:
        Output with C channels, or None for the zero op (an all-zero map)
    """
    if stride not in (1, 2):
        raise ArgumentError(f"candidate ops support stride 1 or 2, got {stride}")
    if op in CONV_SHAPES:
        kernel, dilation = CONV_SHAPES[op]
        if dilation == 1:
            return sep_conv(store, name, x, kernel, stride)
        return dil_conv(store, name, x, kernel, stride, dilation)
    if op == "max_pool_3x3":
        return pool_op(store, name, x, "max", stride)
    if op == "avg_pool_3x3":
        return pool_op(store, name, x, "avg", stride)
    if op == "skip_connect":
        return skip_connect(store, name, x, stride)
    if op == "zero":
        return None
    raise ArgumentError(f"unknown candidate operation {op!r}; expected one of {', '.join(PRIMITIVES)}")
