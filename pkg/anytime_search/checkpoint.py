"""
Versioned checkpoint container.
A single .npz archive holds every named array; run metadata (configuration,
genotype, epoch, metrics so far) travels as JSON bytes under __meta__.
"""

import io
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import CheckpointError
from .genotype import AlphaTable, Genotype
from .network import Network, NetworkConfig, build_network
from .optim import Optimizer

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    meta: dict
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    stat_mean: Dict[str, np.ndarray] = field(default_factory=dict)
    stat_var: Dict[str, np.ndarray] = field(default_factory=dict)
    alphas: Dict[str, np.ndarray] = field(default_factory=dict)
    weight_optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    alpha_optimizer: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")


_SECTIONS = {
    "param": "params",
    "stat_mean": "stat_mean",
    "stat_var": "stat_var",
    "alpha": "alphas",
    "w_opt": "weight_optimizer",
    "a_opt": "alpha_optimizer",
}


def save_checkpoint(
    path: Union[str, Path],
    net: Network,
    meta: dict,
    weight_optimizer: Optional[Optimizer] = None,
    alpha_optimizer: Optional[Optimizer] = None,
) -> Path:
    """
    Write a network and its training state atomically.

    Args:
        path: Target .npz path
        net: Network whose parameters and running statistics are stored
        meta: JSON-serializable run metadata (kind, epoch, config, metrics, ...)
        weight_optimizer: Optimizer of the network weights
        alpha_optimizer: Optimizer of the architecture alphas

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    full_meta = dict(meta)
    full_meta.update(
        {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "network": net.config.to_dict(),
            "genotype": net.genotype.to_dict() if net.genotype is not None else None,
            "dtype": net.store.dtype.name,
        }
    )
    arrays = {META_KEY: np.frombuffer(json.dumps(full_meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, tensor in net.store.params.items():
        arrays[f"param/{name}"] = tensor.data
    for name, stats in net.store.stats.items():
        arrays[f"stat_mean/{name}"] = stats.mean
        arrays[f"stat_var/{name}"] = stats.var
    if net.alphas is not None:
        for name, value in net.alphas.arrays().items():
            arrays[f"alpha/{name}"] = value
    for prefix, optimizer in (("w_opt", weight_optimizer), ("a_opt", alpha_optimizer)):
        if optimizer is not None:
            for key, value in optimizer.state_dict().items():
                arrays[f"{prefix}/{key}"] = value

    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    os.replace(tmp, path)
    logger.debug(f"Wrote checkpoint {path} ({len(arrays) - 1} arrays)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as archive:
            if META_KEY not in archive.files:
                raise CheckpointError(f"{path} is not a checkpoint (no metadata)")
            meta = json.loads(archive[META_KEY].tobytes().decode("utf-8"))
            ckpt = Checkpoint(meta=meta)
            for key in archive.files:
                if key == META_KEY:
                    continue
                section, name = key.split("/", 1)
                if section not in _SECTIONS:
                    raise CheckpointError(f"{path}: unknown array section {section!r}")
                getattr(ckpt, _SECTIONS[section])[name] = archive[key]
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise CheckpointError(f"{path} is corrupt or unreadable: {e}") from e
    version = ckpt.meta.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint schema version {version!r} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    return ckpt


def restore_network(ckpt: Checkpoint, net: Network):
    """Copy parameters, statistics and alphas from a checkpoint into a built network."""
    store = net.store
    missing = sorted(set(store.params) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(store.params))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match the network: {len(missing)} missing parameters "
            f"(e.g. {missing[:3]}), {len(extra)} unexpected (e.g. {extra[:3]})"
        )
    for name, tensor in store.params.items():
        value = ckpt.params[name]
        if value.shape != tensor.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {value.shape}, network shape {tensor.shape}")
        tensor.data = value.astype(store.dtype, copy=True)
    for name, stats in store.stats.items():
        if name not in ckpt.stat_mean or name not in ckpt.stat_var:
            raise CheckpointError(f"normalization statistics {name!r} missing from checkpoint")
        stats.mean = ckpt.stat_mean[name].copy()
        stats.var = ckpt.stat_var[name].copy()
    if net.alphas is not None:
        if set(ckpt.alphas) != {"normal", "reduce"}:
            raise CheckpointError("checkpoint holds no alpha tables for a relaxed network")
        net.alphas.normal.data = ckpt.alphas["normal"].astype(store.dtype, copy=True)
        net.alphas.reduce.data = ckpt.alphas["reduce"].astype(store.dtype, copy=True)


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    """Rebuild the checkpointed network and restore its state."""
    config = NetworkConfig.from_dict(ckpt.meta["network"])
    genotype = Genotype.from_dict(ckpt.meta["genotype"]) if ckpt.meta.get("genotype") else None
    dtype = np.dtype(ckpt.meta.get("dtype", "float32"))
    alphas = None
    if config.mode == "relaxed" and ckpt.alphas:
        alphas = AlphaTable.from_arrays(ckpt.alphas["normal"], ckpt.alphas["reduce"])
    net = build_network(config, genotype=genotype, dtype=dtype, alphas=alphas)
    restore_network(ckpt, net)
    return net
