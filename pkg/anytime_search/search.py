"""
Bilevel architecture search.
Alternates first-order alpha updates on the validation split with weight
updates on the training split, both driven by the weighted sum of the
per-exit cross-entropies.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, restore_network, save_checkpoint
from .data import AugmentPolicy, Batch, Dataset, cutout, iterate_batches, make_splits, training_policy
from .errors import ArgumentError, ConfigError, NonFiniteLossError
from .evaluate import exit_metrics
from .genotype import Genotype, derive_genotype
from .network import Network, NetworkConfig, build_network, network_forward
from .optim import SGD, Adam, cosine_lr
from .tensor import Tensor, add_n, backward, scale, softmax_cross_entropy

logger = logging.getLogger(__name__)

__all__ = [
    "SearchConfig",
    "SearchState",
    "SearchResult",
    "cumulative_loss",
    "bilevel_step",
    "epoch_batches",
    "cutout",
    "run_search",
]

SEARCH_CHECKPOINT = "search_checkpoint.npz"
METRIC_COLUMNS = ["epoch", "exit_index", "split", "loss", "accuracy"]


@dataclass
class SearchConfig:
    epochs: int = 50
    batch_size: int = 64
    weight_lr: float = 0.025
    weight_lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    alpha_lr: float = 3e-4
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    alpha_weight_decay: float = 1e-3
    val_split: float = 0.5
    cutout: bool = False
    cutout_size: int = 16
    classifier_weights: Optional[Tuple[float, ...]] = None
    seed: int = 0

    def validate(self) -> "SearchConfig":
        if self.epochs < 0:
            raise ConfigError("search.epochs", f"must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("search.batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0.0 < self.val_split < 1.0:
            raise ConfigError("search.val_split", f"must lie in (0, 1), got {self.val_split}")
        if self.cutout_size < 0:
            raise ConfigError("search.cutout_size", f"must be >= 0, got {self.cutout_size}")
        for key in ("weight_lr", "weight_lr_min", "alpha_lr"):
            if getattr(self, key) < 0:
                raise ConfigError(f"search.{key}", f"must be >= 0, got {getattr(self, key)}")
        return self


def exit_weights(weights: Optional[Sequence[float]], num_exits: int, key: str = "search.classifier_weights") -> np.ndarray:
    """Classifier weights w_k; equal weights summing to one when unset."""
    if weights is None:
        return np.full(num_exits, 1.0 / num_exits)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (num_exits,):
        raise ConfigError(key, f"{len(w)} weights for {num_exits} exits")
    if np.any(w < 0) or not np.any(w > 0):
        raise ConfigError(key, "weights must be >= 0 with at least one positive")
    return w


def cumulative_loss(logits_list: Sequence[Tensor], targets, weights: Sequence[float], phase: str = "train") -> Tensor:
    """
    Weighted sum of the batch-mean cross-entropy of every exit.

    Args:
        logits_list: Logits per exit, shallow to deep
        targets: Integer labels of the batch
        weights: One non-negative weight per exit
        phase: Label used in the non-finite loss diagnostic

    Returns:
        Scalar loss tensor
    """
    if len(logits_list) != len(weights):
        raise ArgumentError(f"{len(logits_list)} exits but {len(weights)} classifier weights")
    terms = []
    for k, (logits, w) in enumerate(zip(logits_list, weights)):
        ce = softmax_cross_entropy(logits, targets)
        if not np.isfinite(ce.data):
            raise NonFiniteLossError(k, float(ce.data), phase)
        if w:
            terms.append(scale(ce, float(w)))
    return add_n(terms)


def _set_trainable(tensors: Dict[str, Tensor], flag: bool):
    for tensor in tensors.values():
        tensor.requires_grad = flag


@dataclass
class SearchState:
    """Everything the search loop mutates; alphas and weights are disjoint."""

    network: Network
    weight_optimizer: SGD
    alpha_optimizer: Adam
    classifier_weights: np.ndarray
    epoch: int = 0
    alpha_history: List[dict] = field(default_factory=list)
    metrics: List[dict] = field(default_factory=list)

    @property
    def weights(self) -> Dict[str, Tensor]:
        return self.weight_optimizer.params

    @property
    def alphas(self) -> Dict[str, Tensor]:
        return self.alpha_optimizer.params

    def forward(self, images: np.ndarray) -> List[Tensor]:
        return network_forward(images, self.network)


@dataclass
class StepResult:
    train_loss: float
    val_loss: float
    train_logits: List[np.ndarray]


def bilevel_step(state: SearchState, train_batch: Batch, val_batch: Batch) -> StepResult:
    """
    One alpha update on val_batch followed by one weight update on train_batch.

    Weights are held constant during the alpha update (first-order
    approximation) and alphas during the weight update.
    """
    if train_batch.split != "train" or val_batch.split != "val":
        raise ArgumentError(f"expected (train, val) batches, got ({train_batch.split}, {val_batch.split})")
    w = state.classifier_weights
    state.network.train()
    try:
        _set_trainable(state.weights, False)
        _set_trainable(state.alphas, True)
        state.alpha_optimizer.zero_grad()
        val_loss = cumulative_loss(state.forward(val_batch.images), val_batch.labels, w, phase="val")
        backward(val_loss)
        state.alpha_optimizer.step()

        _set_trainable(state.alphas, False)
        _set_trainable(state.weights, True)
        state.weight_optimizer.zero_grad()
        logits = state.forward(train_batch.images)
        train_loss = cumulative_loss(logits, train_batch.labels, w, phase="train")
        backward(train_loss)
        state.weight_optimizer.step()
    finally:
        _set_trainable(state.weights, True)
        _set_trainable(state.alphas, True)
    return StepResult(train_loss=train_loss.item(), val_loss=val_loss.item(), train_logits=[l.data for l in logits])


def new_search_state(
    network_config: NetworkConfig,
    search_config: SearchConfig,
    dtype=np.float32,
) -> SearchState:
    if network_config.mode != "relaxed":
        network_config = network_config.with_mode("relaxed")
    net = build_network(network_config, seed=search_config.seed, dtype=dtype)
    cfg = search_config
    return SearchState(
        network=net,
        weight_optimizer=SGD(net.weights(), cfg.weight_lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip),
        alpha_optimizer=Adam(
            net.alphas.params(), cfg.alpha_lr, (cfg.alpha_beta1, cfg.alpha_beta2), weight_decay=cfg.alpha_weight_decay
        ),
        classifier_weights=exit_weights(cfg.classifier_weights, len(net.exits)),
    )


@dataclass
class SearchResult:
    alpha_history: List[dict]
    genotype: Genotype
    metrics: pd.DataFrame
    network: Network


def _checkpoint_meta(state: SearchState, search_config: SearchConfig, snapshot: Optional[dict]) -> dict:
    return {
        "kind": "search",
        "epoch": state.epoch,
        "search": asdict(search_config),
        "metrics": state.metrics,
        "alpha_history": state.alpha_history,
        "config": snapshot or {},
    }


def _resume(state: SearchState, path: Path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "search":
        raise ArgumentError(f"{path} is a {ckpt.kind!r} checkpoint, not a search checkpoint")
    restore_network(ckpt, state.network)
    state.weight_optimizer.load_state_dict(ckpt.weight_optimizer)
    state.alpha_optimizer.load_state_dict(ckpt.alpha_optimizer)
    state.epoch = ckpt.epoch
    state.metrics = list(ckpt.meta.get("metrics", []))
    state.alpha_history = list(ckpt.meta.get("alpha_history", []))
    logger.warning(f"Resuming search from {path} after epoch {state.epoch}")


def _write_alpha_snapshot(out_dir: Path, epoch: int, snapshot: dict):
    path = out_dir / "alphas" / f"epoch_{epoch:03d}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def epoch_batches(
    train_set: Dataset, val_set: Dataset, cfg: SearchConfig, epoch: int, policy: Optional[AugmentPolicy]
) -> Iterator[Tuple[Batch, Batch]]:
    """Paired (train, val) batches of one search epoch; only the weight batches are augmented."""
    train_batches = iterate_batches(train_set, cfg.batch_size, cfg.seed, epoch, policy, split="train", stream=0)
    val_batches = iterate_batches(val_set, cfg.batch_size, cfg.seed, epoch, None, split="val", stream=1)
    return zip(train_batches, val_batches)


def run_search(
    dataset: Dataset,
    network_config: NetworkConfig,
    search_config: SearchConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    augment: Optional[AugmentPolicy] = None,
    dtype=np.float32,
    config_snapshot: Optional[dict] = None,
    on_epoch_end: Optional[Callable[[int, List[dict]], None]] = None,
) -> SearchResult:
    """
    Search cell architectures on a dataset.

    Args:
        dataset: Training data; split into search-train and search-val halves
        network_config: Network shape (forced to relaxed mode)
        search_config: Search hyper-parameters
        out_dir: Directory for the checkpoint, alpha snapshots and metrics
        resume: Continue from the checkpoint in out_dir if one exists
        augment: Crop/flip policy; cutout follows search_config
        dtype: Floating point type of the network
        config_snapshot: Resolved configuration stored in checkpoints
        on_epoch_end: Called with (epoch, metric rows of that epoch) after each
            epoch has been checkpointed

    Returns:
        SearchResult holding the alpha history, derived genotype and metrics
    """
    cfg = search_config.validate()
    state = new_search_state(network_config, cfg, dtype)
    net = state.network
    train_set, val_set = make_splits(dataset, cfg.val_split, cfg.seed)
    policy = training_policy(augment, cfg.cutout_size if cfg.cutout else 0, dataset.image_size)
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_path / SEARCH_CHECKPOINT if out_path is not None else None
    if resume and ckpt_path is not None and ckpt_path.is_file():
        _resume(state, ckpt_path)
    elif not state.alpha_history:
        state.alpha_history.append({"epoch": 0, **net.alphas.snapshot()})
        if out_path is not None:
            _write_alpha_snapshot(out_path, 0, state.alpha_history[-1])

    logger.info(
        f"Searching for {cfg.epochs} epochs on {len(train_set)} train / {len(val_set)} val samples, "
        f"{len(net.exits)} exits, cutout={policy.cutout_size}"
    )
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        state.weight_optimizer.lr = cosine_lr(epoch, cfg.epochs, cfg.weight_lr, cfg.weight_lr_min)
        num_exits = len(net.exits)
        loss_sum, seen = 0.0, 0
        correct = np.zeros(num_exits, dtype=np.int64)
        for train_batch, val_batch in epoch_batches(train_set, val_set, cfg, epoch, policy):
            step = bilevel_step(state, train_batch, val_batch)
            n = len(train_batch.labels)
            loss_sum += step.train_loss * n
            seen += n
            for k, logits in enumerate(step.train_logits):
                correct[k] += int(np.sum(logits.argmax(axis=1) == train_batch.labels))

        evaluation = exit_metrics(net, val_set, batch_size=max(cfg.batch_size, 256))
        state.epoch = epoch + 1
        rows = []
        for k in range(num_exits):
            rows.append(
                {
                    "epoch": state.epoch,
                    "exit_index": k,
                    "split": "train",
                    "loss": loss_sum / max(seen, 1),
                    "accuracy": float(correct[k] / max(seen, 1)),
                }
            )
        for k in range(num_exits):
            rows.append(
                {
                    "epoch": state.epoch,
                    "exit_index": k,
                    "split": "val",
                    "loss": float(evaluation.losses[k]),
                    "accuracy": float(evaluation.accuracies[k]),
                }
            )
        state.metrics.extend(rows)
        state.alpha_history.append({"epoch": state.epoch, **net.alphas.snapshot()})
        accs = ", ".join(f"{a:.3f}" for a in evaluation.accuracies)
        logger.info(
            f"Search epoch {state.epoch}/{cfg.epochs}: lr {state.weight_optimizer.lr:.5f}, "
            f"train loss {loss_sum / max(seen, 1):.4f}, val accuracy per exit [{accs}]"
        )
        if out_path is not None:
            _write_alpha_snapshot(out_path, state.epoch, state.alpha_history[-1])
            save_checkpoint(
                ckpt_path,
                net,
                _checkpoint_meta(state, cfg, config_snapshot),
                state.weight_optimizer,
                state.alpha_optimizer,
            )
        if on_epoch_end is not None:
            on_epoch_end(state.epoch, rows)

    genotype = derive_genotype(net.alphas)
    metrics = pd.DataFrame(state.metrics, columns=METRIC_COLUMNS)
    if out_path is not None:
        genotype.save(out_path / "genotype.json")
        metrics.to_csv(out_path / "metrics.csv", index=False, float_format="%.9g")
    logger.info(f"Derived genotype: normal={list(genotype.normal)} reduce={list(genotype.reduce)}")
    return SearchResult(alpha_history=state.alpha_history, genotype=genotype, metrics=metrics, network=net)
