"""
Anytime evaluation: per-exit accuracy paired with cumulative cost, budgeted
prediction and the curve / budget table exports.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data import Dataset, iterate_batches
from .errors import ArgumentError, DataFormatError
from .flops import FlopsTable, count_flops
from .network import Network, forward_to_exit, network_forward
from .tensor import Tensor, no_grad, softmax_cross_entropy

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["exit_index", "mflops", "params", "accuracy"]


@dataclass(frozen=True)
class CurvePoint:
    exit_index: int
    mflops: float
    params: int
    accuracy: float


@dataclass
class AnytimeCurve:
    """Accuracy at every exit against the cumulative cost of reaching it."""

    points: List[CurvePoint]

    def __len__(self) -> int:
        return len(self.points)

    def validate(self) -> "AnytimeCurve":
        for prev, point in zip(self.points, self.points[1:]):
            if point.mflops <= prev.mflops:
                raise ArgumentError(f"curve MFLOPS must increase: exit {point.exit_index} costs {point.mflops}")
            if point.params < prev.params:
                raise ArgumentError(f"curve parameters must not decrease at exit {point.exit_index}")
        for point in self.points:
            if not 0.0 <= point.accuracy <= 1.0:
                raise ArgumentError(f"accuracy {point.accuracy} at exit {point.exit_index} outside [0, 1]")
        return self

    @property
    def accuracies(self) -> List[float]:
        return [p.accuracy for p in self.points]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(p) for p in self.points], columns=CURVE_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.9g")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "AnytimeCurve":
        frame = pd.read_csv(path)
        if list(frame.columns) != CURVE_COLUMNS:
            raise DataFormatError(f"{path}: expected header {','.join(CURVE_COLUMNS)}, got {','.join(frame.columns)}")
        points = [
            CurvePoint(int(r.exit_index), float(r.mflops), int(r.params), float(r.accuracy))
            for r in frame.itertuples(index=False)
        ]
        return cls(points=points).validate()


@dataclass
class ExitMetrics:
    losses: List[float]
    accuracies: List[float]
    predictions: List[np.ndarray]


def exit_metrics(net: Network, dataset: Dataset, batch_size: int = 256) -> ExitMetrics:
    """
    Loss and accuracy of every exit from one forward pass per batch.

    Args:
        net: Network to evaluate; it is switched to eval mode and restored
        dataset: Evaluation data, normalized without augmentation
        batch_size: Evaluation batch size

    Returns:
        ExitMetrics with one entry per exit
    """
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    was_training = net.store.training
    net.eval()
    num_exits = len(net.exits)
    loss_sums = np.zeros(num_exits)
    correct = np.zeros(num_exits, dtype=np.int64)
    predictions: List[List[np.ndarray]] = [[] for _ in range(num_exits)]
    try:
        with no_grad():
            for batch in iterate_batches(dataset, batch_size, seed=0, epoch=0, split="eval", shuffle=False):
                for k, logits in enumerate(network_forward(batch.images, net)):
                    loss_sums[k] += softmax_cross_entropy(logits, batch.labels).item() * len(batch.labels)
                    pred = logits.data.argmax(axis=1)
                    correct[k] += int(np.sum(pred == batch.labels))
                    predictions[k].append(pred)
    finally:
        net.store.training = was_training
    n = len(dataset)
    return ExitMetrics(
        losses=list(loss_sums / n),
        accuracies=list(correct / n),
        predictions=[np.concatenate(p) for p in predictions],
    )


def evaluate_anytime(
    net: Network,
    dataset: Dataset,
    batch_size: int = 256,
    flops: Optional[FlopsTable] = None,
) -> AnytimeCurve:
    """
    Anytime curve of a trained discrete network.

    Args:
        net: Discrete network
        dataset: Evaluation data
        batch_size: Evaluation batch size
        flops: Precomputed cost table

    Returns:
        AnytimeCurve with one point per exit
    """
    flops = flops if flops is not None else count_flops(net)
    metrics = exit_metrics(net, dataset, batch_size)
    points = [
        CurvePoint(exit_index=cost.exit_index, mflops=cost.mflops, params=cost.params, accuracy=float(acc))
        for cost, acc in zip(flops.exits, metrics.accuracies)
    ]
    curve = AnytimeCurve(points=points).validate()
    for point in curve.points:
        logger.info(
            f"Exit {point.exit_index}: {point.mflops:.3f} MFLOPS, {point.params:,} params, accuracy {point.accuracy:.4f}"
        )
    return curve


def select_exit(flops: FlopsTable, budget: float) -> Tuple[int, bool]:
    """Deepest exit whose cumulative MFLOPS fit the budget, and whether even the first exit is over it."""
    if budget < 0 or not np.isfinite(budget):
        raise ArgumentError(f"budget must be a finite, non-negative MFLOPS value, got {budget}")
    chosen = 0
    for cost in flops.exits:
        if cost.mflops <= budget:
            chosen = cost.exit_index
    return chosen, budget < flops.exits[0].mflops


@dataclass
class BudgetedPrediction:
    predictions: np.ndarray
    logits: np.ndarray
    exit_index: int
    over_budget: bool


def budgeted_predict(
    net: Network,
    x,
    budget: float,
    flops: Optional[FlopsTable] = None,
) -> BudgetedPrediction:
    """
    Predict with the deepest exit a per-sample MFLOPS budget affords.

    Args:
        net: Discrete network
        x: Normalized image batch (N, 3, H, W)
        budget: Per-sample budget in MFLOPS
        flops: Precomputed cost table

    Returns:
        Predictions of the chosen exit; over_budget is set when the budget is
        below the first exit's cost, in which case the first exit answers
    """
    flops = flops if flops is not None else count_flops(net)
    exit_index, over_budget = select_exit(flops, budget)
    was_training = net.store.training
    net.eval()
    try:
        with no_grad():
            logits = forward_to_exit(x if isinstance(x, Tensor) else np.asarray(x), net, exit_index)
    finally:
        net.store.training = was_training
    return BudgetedPrediction(
        predictions=logits.data.argmax(axis=1),
        logits=logits.data,
        exit_index=exit_index,
        over_budget=over_budget,
    )


def evaluate_budgets(
    net: Network,
    dataset: Dataset,
    budgets: Sequence[float],
    batch_size: int = 256,
    flops: Optional[FlopsTable] = None,
) -> pd.DataFrame:
    """Accuracy of budgeted_predict over a dataset, one row per budget."""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    flops = flops if flops is not None else count_flops(net)
    rows = []
    for budget in budgets:
        correct = 0
        result = None
        for batch in iterate_batches(dataset, batch_size, seed=0, epoch=0, split="eval", shuffle=False):
            result = budgeted_predict(net, batch.images, budget, flops)
            correct += int(np.sum(result.predictions == batch.labels))
        rows.append(
            {
                "budget_mflops": float(budget),
                "exit_index": result.exit_index,
                "mflops": flops.exits[result.exit_index].mflops,
                "accuracy": correct / len(dataset),
                "over_budget": result.over_budget,
            }
        )
    return pd.DataFrame(rows, columns=["budget_mflops", "exit_index", "mflops", "accuracy", "over_budget"])


def parse_budgets(text: str) -> List[float]:
    try:
        budgets = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ArgumentError(f"budgets must be comma-separated MFLOPS values: {e}") from e
    for budget in budgets:
        if budget < 0:
            raise ArgumentError(f"budget must be non-negative, got {budget}")
    return budgets


def error_gap(curve: AnytimeCurve) -> float:
    """Error of the first exit minus error of the last, in accuracy points."""
    return curve.points[-1].accuracy - curve.points[0].accuracy


def plot_curve(curve: AnytimeCurve, path: Union[str, Path], title: str = "Anytime prediction") -> Path:
    """Write an HTML chart of accuracy against MFLOPS and against parameters."""
    import plotly.graph_objects as go
    from plotly.subplots import make_subplots

    frame = curve.to_frame()
    fig = make_subplots(rows=1, cols=2, subplot_titles=("Accuracy vs MFLOPS", "Accuracy vs parameters"))
    labels = [f"exit {i}" for i in frame["exit_index"]]
    fig.add_trace(
        go.Scatter(x=frame["mflops"], y=frame["accuracy"], mode="lines+markers", text=labels, name="MFLOPS"),
        row=1,
        col=1,
    )
    fig.add_trace(
        go.Scatter(x=frame["params"], y=frame["accuracy"], mode="lines+markers", text=labels, name="parameters"),
        row=1,
        col=2,
    )
    fig.update_xaxes(title_text="MFLOPS", row=1, col=1)
    fig.update_xaxes(title_text="parameters", row=1, col=2)
    fig.update_yaxes(title_text="accuracy", range=[0, 1])
    fig.update_layout(title=title, showlegend=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    logger.info(f"Wrote anytime chart to {path}")
    return path
