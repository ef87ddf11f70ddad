"""
Architecture encodings: the continuous alpha tables searched over and the
discrete genotype derived from them.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import GenotypeError, SchemaVersionError, ShapeError
from .operations import PRIMITIVES, ZERO_INDEX
from .tensor import Tensor, parameter

logger = logging.getLogger(__name__)

GENOTYPE_SCHEMA_VERSION = 1

# (op, source) per incoming edge; two per intermediate node
NodeChoice = Tuple[Tuple[str, int], Tuple[str, int]]


def num_edges(nodes: int) -> int:
    """Edges of a cell: node j reads the two cell inputs and the j earlier nodes."""
    return 2 * nodes + nodes * (nodes - 1) // 2


def edge_index(source: int, node: int) -> int:
    return 2 * node + node * (node - 1) // 2 + source


def cell_edges(nodes: int) -> List[Tuple[int, int]]:
    """(source, node) pairs in alpha-table row order."""
    return [(source, node) for node in range(nodes) for source in range(2 + node)]


def nodes_for_edges(edges: int) -> int:
    nodes = 0
    while num_edges(nodes) < edges:
        nodes += 1
    if num_edges(nodes) != edges:
        raise ShapeError(f"{edges} alpha rows do not describe a cell")
    return nodes


@dataclass
class AlphaTable:
    """One real vector per cell edge over the candidate ops, for normal and reduction cells."""

    normal: Tensor
    reduce: Tensor

    @classmethod
    def zeros(cls, nodes: int, dtype=np.float32) -> "AlphaTable":
        shape = (num_edges(nodes), len(PRIMITIVES))
        return cls(
            normal=parameter(np.zeros(shape, dtype=dtype), name="alpha.normal"),
            reduce=parameter(np.zeros(shape, dtype=dtype), name="alpha.reduce"),
        )

    @classmethod
    def from_arrays(cls, normal: np.ndarray, reduce: np.ndarray) -> "AlphaTable":
        for label, arr in (("normal", normal), ("reduce", reduce)):
            if arr.ndim != 2 or arr.shape[1] != len(PRIMITIVES):
                raise ShapeError(f"alpha table {label} has shape {arr.shape}, expected (edges, {len(PRIMITIVES)})")
        if normal.shape != reduce.shape:
            raise ShapeError(f"normal {normal.shape} and reduction {reduce.shape} tables disagree")
        nodes_for_edges(normal.shape[0])
        return cls(normal=parameter(normal, name="alpha.normal"), reduce=parameter(reduce, name="alpha.reduce"))

    @property
    def nodes(self) -> int:
        return nodes_for_edges(self.normal.shape[0])

    def table(self, reduction: bool) -> Tensor:
        return self.reduce if reduction else self.normal

    def params(self) -> Dict[str, Tensor]:
        return {"alpha.normal": self.normal, "alpha.reduce": self.reduce}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"normal": self.normal.data.copy(), "reduce": self.reduce.data.copy()}

    def weights(self) -> Dict[str, np.ndarray]:
        return {name: softmax_rows(arr) for name, arr in self.arrays().items()}

    def snapshot(self) -> dict:
        """JSON-ready copy of the raw alphas and their softmax weights."""
        weights = self.weights()
        return {
            "primitives": list(PRIMITIVES),
            "alpha": {k: v.tolist() for k, v in self.arrays().items()},
            "weights": {k: v.tolist() for k, v in weights.items()},
        }


def softmax_rows(alpha: np.ndarray) -> np.ndarray:
    shifted = alpha - alpha.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Genotype:
    """Discrete normal and reduction cells, two (op, source) choices per node."""

    normal: Tuple[NodeChoice, ...]
    reduce: Tuple[NodeChoice, ...]
    schema_version: int = GENOTYPE_SCHEMA_VERSION

    @property
    def nodes(self) -> int:
        return len(self.normal)

    def cell(self, reduction: bool) -> Tuple[NodeChoice, ...]:
        return self.reduce if reduction else self.normal

    def validate(self) -> "Genotype":
        if len(self.normal) != len(self.reduce):
            raise GenotypeError(f"normal cell has {len(self.normal)} nodes, reduction cell {len(self.reduce)}")
        if not self.normal:
            raise GenotypeError("genotype has no intermediate nodes")
        for label, cell in (("normal", self.normal), ("reduce", self.reduce)):
            validate_cell(cell, label)
        return self

    def to_dict(self) -> dict:
        def encode(cell):
            return [[{"op": op, "source": source} for op, source in node] for node in cell]

        return {
            "schema_version": self.schema_version,
            "nodes": self.nodes,
            "normal": encode(self.normal),
            "reduce": encode(self.reduce),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "Genotype":
        version = payload.get("schema_version")
        if version != GENOTYPE_SCHEMA_VERSION:
            raise SchemaVersionError("genotype", version, GENOTYPE_SCHEMA_VERSION)
        try:
            def decode(cell):
                return tuple(tuple((str(edge["op"]), int(edge["source"])) for edge in node) for node in cell)

            genotype = cls(normal=decode(payload["normal"]), reduce=decode(payload["reduce"]), schema_version=version)
        except (KeyError, TypeError, ValueError) as e:
            raise GenotypeError(f"malformed genotype document: {e}") from e
        if "nodes" in payload and payload["nodes"] != genotype.nodes:
            raise GenotypeError(f"document declares {payload['nodes']} nodes but lists {genotype.nodes}")
        return genotype.validate()

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise GenotypeError(f"genotype is not valid JSON: {e}") from e
        return cls.from_dict(payload)

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        logger.info(f"Saved genotype to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Genotype":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def uniform(cls, nodes: int, op: str = "skip_connect") -> "Genotype":
        """Every node applies op to the two cell inputs."""
        cell = tuple(((op, 0), (op, 1)) for _ in range(nodes))
        return cls(normal=cell, reduce=cell).validate()


def validate_cell(cell: Sequence[NodeChoice], label: str = "cell"):
    for node, choices in enumerate(cell):
        if len(choices) != 2:
            raise GenotypeError(f"{label} node {node}: expected 2 inputs, got {len(choices)}")
        sources = [source for _, source in choices]
        if sources[0] == sources[1]:
            raise GenotypeError(f"{label} node {node}: sources must be distinct, got {sources}")
        for op, source in choices:
            if op not in PRIMITIVES:
                raise GenotypeError(f"{label} node {node}: unknown op {op!r}")
            if op == "zero":
                raise GenotypeError(f"{label} node {node}: the zero op cannot be selected")
            if not 0 <= source < 2 + node:
                raise GenotypeError(f"{label} node {node}: source {source} out of range [0, {2 + node})")


def derive_cell(alpha: np.ndarray) -> Tuple[NodeChoice, ...]:
    """
    Keep the two strongest incoming edges of every node.

    An edge's strength is its largest non-zero softmax weight; ties prefer the
    lower op index, then the lower source index.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(np.isfinite(alpha)):
        raise GenotypeError("cannot derive a genotype from non-finite alphas")
    weights = softmax_rows(alpha)
    weights[:, ZERO_INDEX] = -np.inf
    nodes = nodes_for_edges(alpha.shape[0])
    cell = []
    for node in range(nodes):
        rows = [edge_index(source, node) for source in range(2 + node)]
        best_ops = [int(np.argmax(weights[row])) for row in rows]
        strength = [float(weights[row, op]) for row, op in zip(rows, best_ops)]
        ranked = sorted(range(len(rows)), key=lambda source: (-strength[source], source))[:2]
        cell.append(tuple((PRIMITIVES[best_ops[source]], source) for source in sorted(ranked)))
    return tuple(cell)


def derive_genotype(alpha: AlphaTable) -> Genotype:
    """
    Discretize an alpha table.

    Args:
        alpha: Searched alpha table

    Returns:
        Genotype holding the top-2 edges of every node with their best non-zero op
    """
    genotype = Genotype(normal=derive_cell(alpha.normal.data), reduce=derive_cell(alpha.reduce.data))
    return genotype.validate()
