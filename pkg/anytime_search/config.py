"""
Run configuration.
TOML files are flattened to dotted keys and resolved in the order
defaults < config file < preset < key=value overrides < --seed.
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np
from dotenv import find_dotenv, load_dotenv

from .data import DataConfig
from .errors import ConfigError
from .network import NetworkConfig
from .search import SearchConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

NETWORK_KEYS = (
    "layers",
    "scales",
    "init_channels",
    "nodes",
    "early_exits",
    "classifier_layers",
    "reduction_layers",
)


def _section_defaults(section: str, dataclass_type, skip: Tuple[str, ...] = ("seed",)) -> Dict[str, Any]:
    instance = dataclass_type()
    values = {}
    for f in fields(dataclass_type):
        if f.name in skip:
            continue
        value = getattr(instance, f.name)
        values[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
    return values


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "dtype": "float32",
    **{f"network.{k}": getattr(NetworkConfig(), k) for k in NETWORK_KEYS},
    **_section_defaults("search", SearchConfig),
    **_section_defaults("train", TrainConfig),
    **_section_defaults("data", DataConfig, skip=()),
    "eval.batch_size": 256,
    "eval.budgets": [],
}
# layer lists default to "derive from the layer count"
DEFAULTS["network.classifier_layers"] = None
DEFAULTS["network.reduction_layers"] = None

# expected type of keys whose default is None
NULLABLE = {
    "network.classifier_layers": list,
    "network.reduction_layers": list,
    "search.classifier_weights": list,
    "train.classifier_weights": list,
    "data.path": str,
}

CHOICES = {
    "dtype": ("float32", "float64"),
    "data.dataset": ("toy", "cifar10", "cifar100"),
}

_ABLATION = {
    "data.dataset": "cifar10",
    "network.layers": 5,
    "network.init_channels": 16,
    "train_network.scales": 1,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {
        "data.dataset": "toy",
        "data.num_samples": 1000,
        "data.num_classes": 2,
        "data.image_size": 8,
        "data.crop_padding": 1,
        "network.layers": 3,
        "network.scales": 2,
        "network.init_channels": 8,
        "network.nodes": 2,
        "network.early_exits": True,
        "network.reduction_layers": [3],
        "search.epochs": 10,
        "search.batch_size": 32,
        "search.weight_lr": 0.05,
        "search.alpha_lr": 3e-3,
        "search.cutout": True,
        "train.epochs": 10,
        "train.batch_size": 32,
        "train.lr": 0.05,
        "train.cutout": True,
    },
    "baseline-search": {
        "data.dataset": "cifar10",
        "network.layers": 5,
        "network.scales": 1,
        "network.init_channels": 16,
        "network.early_exits": False,
        "search.cutout": False,
    },
    "search-cutout": {**_ABLATION, "network.scales": 1, "network.early_exits": False, "search.cutout": True},
    "search-cutout-exits": {**_ABLATION, "network.scales": 1, "network.early_exits": True, "search.cutout": True},
    "search-cutout-exits-scales": {**_ABLATION, "network.scales": 3, "network.early_exits": True, "search.cutout": True},
    "paper-sota": {
        "data.dataset": "cifar10",
        "network.layers": 7,
        "network.scales": 3,
        "network.nodes": 2,
        "network.init_channels": 16,
        "network.early_exits": True,
        "search.cutout": True,
        "train.cutout": True,
    },
}
PRESETS["paper-sota-cifar100"] = {**PRESETS["paper-sota"], "data.dataset": "cifar100"}


def load_environment() -> Dict[str, Optional[str]]:
    """Load .env and return the settings the package reads from the environment."""
    load_dotenv(find_dotenv(usecwd=True))
    return {
        "log_level": os.getenv("ANYTIME_SEARCH_LOG_LEVEL", "INFO"),
        "data_dir": os.getenv("ANYTIME_SEARCH_DATA_DIR"),
        "out_dir": os.getenv("ANYTIME_SEARCH_OUT_DIR", "runs"),
    }


def flatten(mapping: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError("--config", f"file {path} does not exist") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("--config", f"{path} is not valid TOML: {e}") from e
    return flatten(document)


def parse_override(text: str) -> Tuple[str, Any]:
    """Parse key=value; the value uses TOML syntax and falls back to a bare string."""
    if "=" not in text:
        raise ConfigError(text, "overrides must look like key=value")
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def _expected_type(key: str):
    if key.startswith("train_network."):
        name = key.split(".", 1)[1]
        if name not in NETWORK_KEYS:
            raise ConfigError(key, f"unknown key; train_network accepts {', '.join(NETWORK_KEYS)}")
        key = f"network.{name}"
    if key not in DEFAULTS:
        raise ConfigError(key, "unknown configuration key")
    default = DEFAULTS[key]
    return key, (NULLABLE[key] if default is None else type(default))


def coerce(key: str, value: Any) -> Any:
    """Check a value against the type of its default and normalize it."""
    canonical, expected = _expected_type(key)
    if value is None:
        if DEFAULTS[canonical] is None:
            return None
        raise ConfigError(key, "may not be empty")
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
    elif expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
    elif expected is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(key, f"expected a list of numbers, got {value!r}")
        value = list(value)
    elif expected is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
    if canonical in CHOICES and key == canonical and value not in CHOICES[canonical]:
        raise ConfigError(key, f"must be one of {', '.join(CHOICES[canonical])}, got {value!r}")
    return value


def resolve_config(
    config_path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    base: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Resolve the flat configuration of a run.

    Args:
        config_path: TOML file
        preset: Name of a built-in preset
        overrides: key=value strings from the command line
        seed: Explicit seed, applied last
        base: Snapshot to start from instead of the defaults (e.g. a checkpoint's)

    Returns:
        Flat dict of dotted keys holding JSON-native values
    """
    resolved = dict(DEFAULTS)
    layers: list = []
    if base:
        layers.append(("checkpoint", base))
    if config_path is not None:
        layers.append((str(config_path), load_config_file(config_path)))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("--preset", f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        layers.append((f"preset {preset}", PRESETS[preset]))
    layers.append(("overrides", dict(parse_override(o) for o in overrides)))
    for source, values in layers:
        for key, value in values.items():
            resolved[key] = coerce(key, value)
        if values:
            logger.debug(f"Applied {len(values)} settings from {source}")
    if seed is not None:
        resolved["seed"] = coerce("seed", seed)
    return resolved


def network_config(cfg: Dict[str, Any], num_classes: int, input_size: int, phase: str = "search") -> NetworkConfig:
    """Network shape for a phase; the train phase applies train_network overrides."""
    values = {k: cfg[f"network.{k}"] for k in NETWORK_KEYS}
    if phase == "train":
        for k in NETWORK_KEYS:
            if f"train_network.{k}" in cfg:
                values[k] = cfg[f"train_network.{k}"]
    for key in ("classifier_layers", "reduction_layers"):
        if values[key] is not None:
            values[key] = tuple(int(v) for v in values[key])
    config = NetworkConfig(
        **values,
        num_classes=num_classes,
        input_size=input_size,
        mode="relaxed" if phase == "search" else "discrete",
    )
    return config.validate()


def _section(cfg: Dict[str, Any], section: str) -> Dict[str, Any]:
    prefix = f"{section}."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def search_config(cfg: Dict[str, Any]) -> SearchConfig:
    values = _section(cfg, "search")
    if values.get("classifier_weights") is not None:
        values["classifier_weights"] = tuple(values["classifier_weights"])
    return SearchConfig(**values, seed=cfg["seed"]).validate()


def train_config(cfg: Dict[str, Any]) -> TrainConfig:
    values = _section(cfg, "train")
    if values.get("classifier_weights") is not None:
        values["classifier_weights"] = tuple(values["classifier_weights"])
    return TrainConfig(**values, seed=cfg["seed"]).validate()


def data_config(cfg: Dict[str, Any], env: Optional[Dict[str, Optional[str]]] = None) -> DataConfig:
    values = _section(cfg, "data")
    if not values.get("path") and env and env.get("data_dir"):
        values["path"] = env["data_dir"]
    return DataConfig(**values)


def dtype_of(cfg: Dict[str, Any]) -> np.dtype:
    return np.dtype(cfg["dtype"])
