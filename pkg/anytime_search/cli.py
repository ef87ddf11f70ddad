"""
Command-line interface: search, train, eval and flops subcommands.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, network_from_checkpoint
from .config import (
    PRESETS,
    data_config,
    dtype_of,
    load_environment,
    network_config,
    resolve_config,
    search_config,
    train_config,
)
from .data import Dataset, load_cifar, load_datasets, sha256_file
from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    GenotypeError,
    ManifestError,
    ShapeError,
)
from .evaluate import error_gap, evaluate_anytime, evaluate_budgets, parse_budgets, plot_curve
from .flops import count_flops, trace_flops
from .genotype import Genotype
from .manifest import finalize_run, prepare_run
from .network import Network, build_network
from .search import run_search
from .trainer import MODEL_CHECKPOINT, train_final

logger = logging.getLogger(__name__)

USER_ERRORS = (
    ArgumentError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    GenotypeError,
    ManifestError,
    ShapeError,
    FileNotFoundError,
)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration preset")
    parser.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    parser.add_argument("--out-dir", help="output directory (default: $ANYTIME_SEARCH_OUT_DIR/<command>)")
    parser.add_argument("--force", action="store_true", help="overwrite a completed run in --out-dir")
    parser.add_argument("overrides", nargs="*", metavar="key=value", help="configuration overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anytime-search",
        description="Multi-scale, resource-aware architecture search with early-exit classifiers",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="search cell architectures")
    _add_common(search)

    train = sub.add_parser("train", help="train a discrete network from a genotype")
    train.add_argument("--genotype", required=True, help="genotype JSON file")
    _add_common(train)

    evaluate = sub.add_parser("eval", help="anytime evaluation of a trained checkpoint")
    evaluate.add_argument("--checkpoint", required=True, help="trained model checkpoint (.npz)")
    evaluate.add_argument("--dataset", help="CIFAR directory to evaluate on instead of the configured test set")
    evaluate.add_argument("--budgets", help="comma-separated per-sample MFLOPS budgets")
    evaluate.add_argument("--plot", action="store_true", help="also write an HTML accuracy chart")
    _add_common(evaluate)

    flops = sub.add_parser("flops", help="per-exit MFLOPS and parameter counts")
    source = flops.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="trained model checkpoint (.npz)")
    source.add_argument("--genotype", help="genotype JSON file (network from the config)")
    flops.add_argument("--json", action="store_true", help="print machine-readable JSON")
    flops.add_argument("--verify", action="store_true", help="check the closed form against a traced count")
    _add_common(flops)
    return parser


def _out_dir(args, env: Dict[str, Optional[str]]) -> Path:
    return Path(args.out_dir) if args.out_dir else Path(env["out_dir"]) / args.command


def _input_checksums(*datasets: Dataset, extra: Sequence[Tuple[str, str]] = ()) -> Dict[str, str]:
    checksums = {}
    for dataset in datasets:
        for item in dataset.provenance:
            checksums[item["file"]] = item["sha256"]
    checksums.update(dict(extra))
    return checksums


def cmd_search(args, env) -> int:
    cfg = resolve_config(args.config, args.preset, args.overrides, args.seed)
    data = data_config(cfg, env)
    train_set, _ = load_datasets(data)
    net_cfg = network_config(cfg, train_set.num_classes, train_set.image_size, phase="search")
    out_dir = _out_dir(args, env)
    manifest, resume = prepare_run(out_dir, "search", cfg, cfg["seed"], __version__, _input_checksums(train_set), args.force)
    result = run_search(
        train_set,
        net_cfg,
        search_config(cfg),
        out_dir=out_dir,
        resume=resume,
        augment=data.policy(),
        dtype=dtype_of(cfg),
        config_snapshot=cfg,
    )
    finalize_run(manifest, out_dir, [out_dir / "genotype.json", out_dir / "metrics.csv", out_dir / "alphas"])
    logger.info(f"Genotype written to {out_dir / 'genotype.json'}")
    print(result.genotype.to_json(), end="")
    return 0


def cmd_train(args, env) -> int:
    cfg = resolve_config(args.config, args.preset, args.overrides, args.seed)
    genotype = Genotype.load(args.genotype)
    data = data_config(cfg, env)
    train_set, test_set = load_datasets(data)
    net_cfg = network_config(cfg, train_set.num_classes, train_set.image_size, phase="train")
    if net_cfg.nodes != genotype.nodes:
        raise ConfigError("network.nodes", f"is {net_cfg.nodes} but the genotype has {genotype.nodes} nodes")
    out_dir = _out_dir(args, env)
    inputs = _input_checksums(train_set, test_set, extra=[(str(args.genotype), sha256_file(args.genotype))])
    manifest, resume = prepare_run(out_dir, "train", cfg, cfg["seed"], __version__, inputs, args.force)
    model = train_final(
        genotype,
        net_cfg,
        train_config(cfg),
        train_set,
        out_dir=out_dir,
        resume=resume,
        test_set=test_set,
        augment=data.policy(),
        dtype=dtype_of(cfg),
        config_snapshot=cfg,
    )
    table = count_flops(model.network)
    logger.info(f"Trained model: {table.total_mflops:.3f} MFLOPS at the last exit, {model.network.num_params():,} parameters")
    finalize_run(manifest, out_dir, [out_dir / MODEL_CHECKPOINT, out_dir / "metrics.csv"])
    return 0


def _eval_dataset(args, cfg, env) -> Dataset:
    data = data_config(cfg, env)
    if args.dataset:
        if data.dataset == "toy":
            raise ConfigError("data.dataset", "--dataset needs a CIFAR variant (data.dataset=cifar10 or cifar100)")
        train = load_cifar(args.dataset, data.dataset, "train")
        return load_cifar(args.dataset, data.dataset, "test", stats=(train.mean, train.std))
    return load_datasets(data)[1]


def _check_compatible(net: Network, dataset: Dataset):
    cfg = net.config
    if dataset.num_classes != cfg.num_classes or dataset.image_size != cfg.input_size:
        raise CheckpointError(
            f"checkpoint expects {cfg.num_classes} classes at {cfg.input_size}x{cfg.input_size}, "
            f"dataset provides {dataset.num_classes} classes at {dataset.image_size}x{dataset.image_size}"
        )


def cmd_eval(args, env) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    if net.relaxed:
        raise CheckpointError(f"{args.checkpoint} holds a relaxed search network; evaluate a trained model instead")
    cfg = resolve_config(args.config, args.preset, args.overrides, args.seed, base=ckpt.meta.get("config"))
    dataset = _eval_dataset(args, cfg, env)
    stats = ckpt.meta.get("data_stats")
    if stats:
        dataset = replace(dataset, mean=np.asarray(stats["mean"], dtype=np.float32), std=np.asarray(stats["std"], dtype=np.float32))
    _check_compatible(net, dataset)
    out_dir = _out_dir(args, env)
    inputs = _input_checksums(dataset)
    manifest, _ = prepare_run(out_dir, "eval", cfg, cfg["seed"], __version__, inputs, args.force)
    table = count_flops(net)
    curve = evaluate_anytime(net, dataset, batch_size=cfg["eval.batch_size"], flops=table)
    outputs = [curve.to_csv(out_dir / "curve.csv")]
    gap = error_gap(curve)
    logger.info(f"First-vs-last exit error gap: {gap * 100:.2f} points")

    budgets = parse_budgets(args.budgets) if args.budgets else [float(b) for b in cfg["eval.budgets"]]
    if budgets:
        frame = evaluate_budgets(net, dataset, budgets, cfg["eval.batch_size"], table)
        path = out_dir / "budgets.csv"
        frame.to_csv(path, index=False, float_format="%.9g")
        outputs.append(path)
        for row in frame.itertuples(index=False):
            flag = " (over budget)" if row.over_budget else ""
            logger.info(f"Budget {row.budget_mflops:.3f} MFLOPS -> exit {row.exit_index}, accuracy {row.accuracy:.4f}{flag}")
    if args.plot:
        outputs.append(plot_curve(curve, out_dir / "curve.html"))
    finalize_run(manifest, out_dir, outputs)
    return 0


def _flops_network(args, env) -> Network:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.meta.get("network", {}).get("mode") != "discrete":
            raise ArgumentError(f"{args.checkpoint} holds a relaxed network; FLOPs are defined for discrete networks only")
        return network_from_checkpoint(ckpt)
    cfg = resolve_config(args.config, args.preset, args.overrides, args.seed)
    genotype = Genotype.load(args.genotype)
    data = data_config(cfg, env)
    if data.dataset == "toy":
        num_classes, size = data.num_classes, data.image_size
    else:
        num_classes, size = (10 if data.dataset == "cifar10" else 100), 32
    net_cfg = network_config(cfg, num_classes, size, phase="train")
    return build_network(net_cfg, genotype=genotype, seed=cfg["seed"], dtype=dtype_of(cfg))


def cmd_flops(args, env) -> int:
    net = _flops_network(args, env)
    table = count_flops(net)
    if args.verify:
        for cost in table.exits:
            traced = trace_flops(net, cost.exit_index)["total"]
            if traced != cost.flops:
                raise RuntimeError(f"exit {cost.exit_index}: closed form {cost.flops} != traced {traced}")
        logger.info(f"Closed-form counts match traced counts for {len(table.exits)} exits")
    ratio = table.first_exit_ratio()
    logger.info(f"First exit costs {ratio * 100:.1f}% of the last exit's MFLOPS")
    if args.json:
        print(json.dumps(table.to_dict(), indent=2))
    else:
        print(table.to_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


COMMANDS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval, "flops": cmd_flops}


def main(argv: Optional[List[str]] = None) -> int:
    env = load_environment()
    logging.basicConfig(
        level=getattr(logging, str(env["log_level"]).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, env)
    except USER_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
