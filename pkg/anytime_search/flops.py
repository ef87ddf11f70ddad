"""
FLOPs and parameter accounting for discrete networks.
One multiply-accumulate counts as one FLOP. The closed-form walk below mirrors
the counters the tensor primitives report, so trace_flops() serves as its oracle.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ArgumentError
from .genotype import NodeChoice
from .network import HEAD_MIN_SPATIAL, Network, NetworkConfig, forward_to_exit, halve
from .operations import CONV_SHAPES
from .tensor import FlopCounter, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExitCost:
    exit_index: int
    layer: int
    flops: int
    params: int

    @property
    def mflops(self) -> float:
        return self.flops / 1e6


@dataclass
class FlopsTable:
    """Cumulative cost of reaching each exit, shallow to deep."""

    exits: List[ExitCost]

    @property
    def mflops(self) -> List[float]:
        return [e.mflops for e in self.exits]

    @property
    def params(self) -> List[int]:
        return [e.params for e in self.exits]

    @property
    def total_mflops(self) -> float:
        return self.exits[-1].mflops

    def first_exit_ratio(self) -> float:
        return self.exits[0].flops / self.exits[-1].flops

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"exit_index": e.exit_index, "layer": e.layer, "mflops": e.mflops, "params": e.params} for e in self.exits]
        )

    def to_dict(self) -> dict:
        return {
            "exits": [
                {"exit_index": e.exit_index, "layer": e.layer, "flops": e.flops, "mflops": e.mflops, "params": e.params}
                for e in self.exits
            ],
            "first_exit_ratio": self.first_exit_ratio(),
        }


def conv_macs(kernel: int, c_in_per_group: int, c_out: int, h_out: int, w_out: int) -> int:
    return kernel * kernel * c_in_per_group * c_out * h_out * w_out


def _relu_conv_norm(c_in: int, size_in: int, c_out: int, kernel: int, stride: int) -> Tuple[int, int]:
    size_out = size_in if stride == 1 else halve(size_in)
    flops = c_in * size_in * size_in + conv_macs(kernel, c_in, c_out, size_out, size_out) + c_out * size_out * size_out
    return flops, size_out


def op_flops(op: str, channels: int, size_in: int, stride: int) -> int:
    """Per-sample MACs of one discrete candidate op on a square input."""
    size_out = size_in if stride == 1 else halve(size_in)
    area_in, area_out = size_in * size_in, size_out * size_out
    if op in CONV_SHAPES:
        kernel, dilation = CONV_SHAPES[op]
        stage = conv_macs(kernel, 1, channels, size_out, size_out) + conv_macs(1, channels, channels, size_out, size_out)
        stage += channels * area_out
        if dilation == 1:
            return channels * area_in + stage + channels * area_out + stage
        return channels * area_in + stage
    if op in ("max_pool_3x3", "avg_pool_3x3"):
        return 9 * channels * area_out
    if op == "skip_connect":
        return 0 if stride == 1 else _relu_conv_norm(channels, size_in, channels, 1, stride)[0]
    raise ArgumentError(f"no FLOPs rule for op {op!r}")


def cell_flops(cell: Sequence[NodeChoice], channels: int, size_in: int, reduction: bool) -> int:
    total = 0
    for choices in cell:
        for op, source in choices:
            from_input = source < 2
            stride = 2 if reduction and from_input else 1
            size = size_in if from_input or not reduction else halve(size_in)
            total += op_flops(op, channels, size, stride)
    return total


def head_flops(channels: int, size: int, num_classes: int) -> int:
    blocks = 2 if size >= HEAD_MIN_SPATIAL else 1
    stride = 2 if blocks == 2 else 1
    total = 0
    for _ in range(blocks):
        size = size if stride == 1 else halve(size)
        total += conv_macs(3, channels, channels, size, size) + 2 * channels * size * size
    return total + channels * size * size + channels * num_classes


def stem_flops(cfg: NetworkConfig) -> int:
    size = cfg.input_size
    total = conv_macs(3, cfg.input_channels, cfg.out_width(1, 0), size, size) + cfg.out_width(1, 0) * size * size
    for scale in range(1, cfg.scales):
        flops, size = _relu_conv_norm(cfg.out_width(1, scale - 1), size, cfg.out_width(1, scale), 3, 2)
        total += flops
    return total


def node_flops(net: Network, layer: int, scale: int) -> int:
    """Projections and cell at one (layer, scale) grid node."""
    cfg = net.config
    width = cfg.cell_width(layer, scale)
    prev_size = cfg.spatial(layer - 1, scale)
    prev_width = cfg.out_width(layer - 1, scale)
    total, _ = _relu_conv_norm(prev_width, prev_size, width, 1, 1)
    if scale > 0:
        diagonal, _ = _relu_conv_norm(cfg.out_width(layer - 1, scale - 1), cfg.spatial(layer - 1, scale - 1), width, 3, 2)
        fuse, _ = _relu_conv_norm(width + prev_width, prev_size, width, 1, 1)
        total += diagonal + fuse
    reduction = layer in cfg.reduction_layers
    return total + cell_flops(net.genotype.cell(reduction), width, prev_size, reduction)


def count_flops(net: Network) -> FlopsTable:
    """
    Cumulative per-sample MFLOPS and parameter counts at every exit.

    The cost of exit e covers the stem, every grid node the coarsest scale of
    its layer depends on, and head e. Parameters additionally include every
    head of an earlier exit, so the last exit reports the whole model.

    Args:
        net: Discrete network

    Returns:
        FlopsTable ordered shallow to deep
    """
    if net.relaxed:
        raise ArgumentError("FLOPs are defined for discrete networks only; derive a genotype first")
    cfg = net.config
    store = net.store
    base_flops = stem_flops(cfg)
    exits = []
    head_params = 0
    for exit_index, layer in enumerate(cfg.classifier_layers):
        flops = base_flops
        params = store.count("stem.")
        for current, scales in cfg.cone(layer).items():
            if current == 1:
                continue
            for scale in scales:
                flops += node_flops(net, current, scale)
                params += store.count(f"layer{current}.scale{scale}.")
        top = cfg.scales - 1
        flops += head_flops(cfg.out_width(layer, top), cfg.spatial(layer, top), cfg.num_classes)
        head_params += store.count(f"head{layer}.")
        exits.append(ExitCost(exit_index=exit_index, layer=layer, flops=flops, params=params + head_params))
    table = FlopsTable(exits=exits)
    logger.debug(f"Counted FLOPs for {len(exits)} exits: {[round(m, 3) for m in table.mflops]} MFLOPS")
    return table


def trace_flops(net: Network, exit_index: int) -> Dict[str, int]:
    """Run one sample to an exit under a FlopCounter and report what the primitives counted."""
    if net.relaxed:
        raise ArgumentError("FLOPs are defined for discrete networks only; derive a genotype first")
    cfg = net.config
    sample = np.zeros((1, cfg.input_channels, cfg.input_size, cfg.input_size), dtype=net.store.dtype)
    was_training = net.store.training
    net.eval()
    try:
        with no_grad(), FlopCounter() as counter:
            forward_to_exit(sample, net, exit_index)
    finally:
        net.store.training = was_training
    return {"total": counter.total, **dict(counter.by_op)}
