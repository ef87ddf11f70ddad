"""
Cell computations: mixed operations over the relaxed search space and the
discrete cell a genotype describes.
"""

import logging
from typing import List, Sequence

from .errors import ArgumentError, ShapeError
from .genotype import NodeChoice, edge_index, nodes_for_edges, validate_cell
from .operations import PRIMITIVES, ParameterStore, apply_op
from .tensor import Tensor, add_n, concat, softmax, take_row, weighted_sum

logger = logging.getLogger(__name__)


def mixed_op_forward(x: Tensor, alpha_edge: Tensor, store: ParameterStore, name: str, stride: int) -> Tensor:
    """
    Softmax-weighted sum of every candidate operation applied to x.

    Args:
        x: Edge input (N, C, H, W)
        alpha_edge: Raw alpha vector of length K for this edge
        store: Parameter store holding every candidate's weights
        name: Parameter prefix of the edge
        stride: 2 on reduction edges leaving a cell input, else 1

    Returns:
        sum_k softmax(alpha_edge)_k * o_k(x)
    """
    if alpha_edge.shape != (len(PRIMITIVES),):
        raise ShapeError(f"{name}: alpha vector of shape {alpha_edge.shape}, expected ({len(PRIMITIVES)},)")
    outputs = [apply_op(store, op, f"{name}.{op}", x, stride) for op in PRIMITIVES]
    return weighted_sum(outputs, softmax(alpha_edge))


def _check_inputs(input_a: Tensor, input_b: Tensor):
    if input_a.shape != input_b.shape:
        raise ArgumentError(f"cell inputs disagree: {input_a.shape} vs {input_b.shape}")


def _edge_stride(source: int, is_reduction: bool) -> int:
    return 2 if is_reduction and source < 2 else 1


def cell_forward(
    input_a: Tensor,
    input_b: Tensor,
    alpha: Tensor,
    store: ParameterStore,
    name: str,
    is_reduction: bool = False,
) -> Tensor:
    """
    Relaxed cell: every node sums the mixed ops on all of its incoming edges.

    Args:
        input_a: First cell input, already projected to the cell width
        input_b: Second cell input with the same shape
        alpha: (edges, K) alpha table of this cell type
        store: Parameter store of the network
        name: Parameter prefix of the cell
        is_reduction: Halve the spatial size on edges leaving the cell inputs

    Returns:
        Channel concatenation of the intermediate node outputs
    """
    _check_inputs(input_a, input_b)
    nodes = nodes_for_edges(alpha.shape[0])
    states: List[Tensor] = [input_a, input_b]
    for node in range(nodes):
        incoming = []
        for source in range(2 + node):
            row = edge_index(source, node)
            incoming.append(
                mixed_op_forward(
                    states[source],
                    take_row(alpha, row),
                    store,
                    f"{name}.edge{row}",
                    _edge_stride(source, is_reduction),
                )
            )
        states.append(add_n(incoming))
    return concat(states[2:], axis=1)


def discrete_cell_forward(
    input_a: Tensor,
    input_b: Tensor,
    cell: Sequence[NodeChoice],
    store: ParameterStore,
    name: str,
    is_reduction: bool = False,
) -> Tensor:
    """Genotype cell: each node sums its two chosen operations."""
    validate_cell(cell, name)
    _check_inputs(input_a, input_b)
    states: List[Tensor] = [input_a, input_b]
    for node, choices in enumerate(cell):
        incoming = []
        for op, source in choices:
            row = edge_index(source, node)
            incoming.append(apply_op(store, op, f"{name}.edge{row}.{op}", states[source], _edge_stride(source, is_reduction)))
        states.append(add_n(incoming))
    return concat(states[2:], axis=1)
