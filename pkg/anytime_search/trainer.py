"""
Final training of a discrete network built from a genotype.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, restore_network, save_checkpoint
from .data import AugmentPolicy, Dataset, iterate_batches, training_policy
from .errors import ArgumentError, ConfigError
from .evaluate import exit_metrics
from .genotype import Genotype
from .network import Network, NetworkConfig, build_network, network_forward
from .optim import SGD, cosine_lr
from .search import METRIC_COLUMNS, cumulative_loss, exit_weights
from .tensor import backward

logger = logging.getLogger(__name__)

TRAIN_CHECKPOINT = "train_checkpoint.npz"
MODEL_CHECKPOINT = "model.npz"


@dataclass
class TrainConfig:
    epochs: int = 96
    batch_size: int = 64
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    cutout: bool = True
    cutout_size: int = 16
    classifier_weights: Optional[Tuple[float, ...]] = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("train.epochs", f"must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.lr_min < 0:
            raise ConfigError("train.lr", f"learning rates must be >= 0, got {self.lr} / {self.lr_min}")
        if self.cutout_size < 0:
            raise ConfigError("train.cutout_size", f"must be >= 0, got {self.cutout_size}")
        return self


@dataclass
class TrainedModel:
    network: Network
    genotype: Genotype
    metrics: pd.DataFrame
    epochs: int


def train_final(
    genotype: Genotype,
    network_config: NetworkConfig,
    train_config: TrainConfig,
    dataset: Dataset,
    out_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    test_set: Optional[Dataset] = None,
    augment: Optional[AugmentPolicy] = None,
    dtype=np.float32,
    config_snapshot: Optional[dict] = None,
    on_epoch_end: Optional[Callable[[int, List[dict]], None]] = None,
) -> TrainedModel:
    """
    Train every weight of the discrete network with the cumulative exit loss.

    Args:
        genotype: Cells to instantiate
        network_config: Network shape (forced to discrete mode)
        train_config: Optimization settings
        dataset: Full training set
        out_dir: Directory for checkpoints and metrics
        resume: Continue from the checkpoint in out_dir if one exists
        test_set: Evaluated after every epoch when given
        augment: Crop/flip policy; cutout follows train_config
        dtype: Floating point type of the network
        config_snapshot: Resolved configuration stored in checkpoints
        on_epoch_end: Called with (epoch, metric rows) after each checkpointed epoch

    Returns:
        TrainedModel with per-epoch, per-exit metrics
    """
    cfg = train_config.validate()
    genotype.validate()
    if network_config.mode != "discrete":
        network_config = network_config.with_mode("discrete")
    net = build_network(network_config, genotype=genotype, seed=cfg.seed, dtype=dtype)
    optimizer = SGD(net.weights(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    weights = exit_weights(cfg.classifier_weights, len(net.exits), key="train.classifier_weights")
    policy = training_policy(augment, cfg.cutout_size if cfg.cutout else 0, dataset.image_size)

    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_path / TRAIN_CHECKPOINT if out_path is not None else None
    start_epoch = 0
    history: List[dict] = []
    if resume and ckpt_path is not None and ckpt_path.is_file():
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.kind != "train":
            raise ArgumentError(f"{ckpt_path} is a {ckpt.kind!r} checkpoint, not a training checkpoint")
        restore_network(ckpt, net)
        optimizer.load_state_dict(ckpt.weight_optimizer)
        start_epoch = ckpt.epoch
        history = list(ckpt.meta.get("metrics", []))
        logger.warning(f"Resuming training from {ckpt_path} after epoch {start_epoch}")

    logger.info(f"Training for {cfg.epochs} epochs on {len(dataset)} samples, {net.num_params():,} parameters")
    for epoch in range(start_epoch, cfg.epochs):
        optimizer.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        net.train()
        loss_sum, seen = 0.0, 0
        correct = np.zeros(len(net.exits), dtype=np.int64)
        for batch in iterate_batches(dataset, cfg.batch_size, cfg.seed, epoch, policy, split="train"):
            optimizer.zero_grad()
            logits = network_forward(batch.images, net)
            loss = cumulative_loss(logits, batch.labels, weights, phase="train")
            backward(loss)
            optimizer.step()
            n = len(batch.labels)
            loss_sum += loss.item() * n
            seen += n
            for k, out in enumerate(logits):
                correct[k] += int(np.sum(out.data.argmax(axis=1) == batch.labels))

        rows = [
            {"epoch": epoch + 1, "exit_index": k, "split": "train", "loss": loss_sum / max(seen, 1), "accuracy": float(c / max(seen, 1))}
            for k, c in enumerate(correct)
        ]
        if test_set is not None:
            evaluation = exit_metrics(net, test_set)
            rows += [
                {"epoch": epoch + 1, "exit_index": k, "split": "test", "loss": float(loss), "accuracy": float(acc)}
                for k, (loss, acc) in enumerate(zip(evaluation.losses, evaluation.accuracies))
            ]
        history.extend(rows)
        accs = ", ".join(f"{r['accuracy']:.3f}" for r in rows if r["split"] == ("test" if test_set is not None else "train"))
        logger.info(f"Train epoch {epoch + 1}/{cfg.epochs}: lr {optimizer.lr:.5f}, loss {loss_sum / max(seen, 1):.4f}, accuracy per exit [{accs}]")
        if ckpt_path is not None:
            meta = {"kind": "train", "epoch": epoch + 1, "train": asdict(cfg), "metrics": history, "config": config_snapshot or {}}
            save_checkpoint(ckpt_path, net, meta, optimizer)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, rows)

    metrics = pd.DataFrame(history, columns=METRIC_COLUMNS)
    if out_path is not None:
        meta = {
            "kind": "model",
            "epoch": cfg.epochs,
            "train": asdict(cfg),
            "config": config_snapshot or {},
            "data_stats": {"mean": dataset.mean.tolist(), "std": dataset.std.tolist()},
        }
        save_checkpoint(out_path / MODEL_CHECKPOINT, net, meta)
        metrics.to_csv(out_path / "metrics.csv", index=False, float_format="%.9g")
    return TrainedModel(network=net, genotype=genotype, metrics=metrics, epochs=cfg.epochs)
