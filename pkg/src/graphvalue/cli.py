"""Command-line entry point.

    graphvalue [--seed S] [--config FILE] [--out DIR] [--jobs N] <command> ...

Config files are JSON with optional sections ``dataset`` (DatasetConfig
fields), ``train`` (TrainConfig fields) and ``experiment``
(ExperimentConfig fields). Command-line flags override config values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import autodiff as ad
from .dataset import DatasetConfig, DatasetFormatError, build_dataset, load_dataset, save_dataset
from .models import mlp_input_dim, params_from_checkpoint
from .svgplot import write_svg
from .sweeps import (
    GRID_SIZE,
    TRAIN_SIZE,
    ExperimentConfig,
    monotone_warning,
    print_progress,
    read_rows,
    run_sweep,
    summarise,
    write_rows,
)
from .training import TrainConfig, evaluate, train_model

CONFIG_SECTIONS = ("dataset", "train", "experiment")


class UsageError(Exception):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config section(s): {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    return doc


def _overrides(args: argparse.Namespace, names: list[str]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _dataset_config(args, config: dict) -> DatasetConfig:
    doc = {**config.get("dataset", {}), **_overrides(args, ["size", "kind", "n_train", "n_test", "bucket_count"])}
    return DatasetConfig.from_dict(doc)


def _train_config(args, config: dict) -> TrainConfig:
    doc = dict(config.get("train", {}))
    doc.update(_overrides(args, ["model", "epochs", "batch_size", "lr", "patience", "eval_every"]))
    unknown = set(doc) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
    doc["seed"] = args.seed
    return TrainConfig(**doc)


def _experiment_config(args, config: dict) -> ExperimentConfig:
    doc = dict(config.get("experiment", {}))
    if "train" in config:
        doc["train"] = {**config["train"], **doc.get("train", {})}
    doc.update(_overrides(args, ["grid_sizes", "train_sizes", "world_kinds", "repetitions", "n_train", "n_test"]))
    return ExperimentConfig.from_dict(doc)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _split_path(path: str, split: str) -> Path:
    p = Path(path)
    return p / f"{split}.jsonl" if p.is_dir() else p


def _load(path: Path):
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


# ------------------------------------------------------------------ commands


def cmd_gen(args, config) -> int:
    cfg = _dataset_config(args, config)
    out = _out_dir(args)
    train, test = build_dataset(cfg, args.seed)
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    provenance = {"dataset": asdict(cfg), "seed": args.seed, "files": ["train.jsonl", "test.jsonl"]}
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return 0


def cmd_train(args, config) -> int:
    cfg = _train_config(args, config)
    train = _load(_split_path(args.data, "train"))
    test = _load(_split_path(args.test if args.test else args.data, "test"))
    out = _out_dir(args)
    params, metrics = train_model(train.samples, test.samples, cfg)
    metrics.write_csv(out / "metrics.csv", timing=args.timing)
    meta = params.meta()
    ad.save_checkpoint(out / "checkpoint.json", params.arrays(), meta)
    if metrics.fault is not None:
        print(f"numeric fault at batch {metrics.fault_batch}: {metrics.fault}", file=sys.stderr)
        return 3
    last = metrics.records[-1] if metrics.records else None
    summary = f"best test accuracy {metrics.best_test_accuracy:.4f} at epoch {metrics.best_epoch}"
    if last is not None:
        summary += f"; final train accuracy {last.train_accuracy:.4f}"
    print(summary)
    return 0


def cmd_eval(args, config) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    arrays, meta = ad.load_checkpoint(path)
    params = params_from_checkpoint(arrays, meta)
    data = _load(_split_path(args.data, "test"))
    n_nodes = {s.n_nodes for s in data.samples}
    if meta.get("model") == "deepgv" and n_nodes != {params.config.n_nodes}:
        raise UsageError(f"checkpoint is built for {params.config.n_nodes} nodes, dataset has {sorted(n_nodes)}")
    if meta.get("model") == "mlp" and {mlp_input_dim(n) for n in n_nodes} != {params.config.input_dim}:
        raise UsageError(f"checkpoint input size {params.config.input_dim} does not match dataset grids {sorted(n_nodes)}")
    print(f"{evaluate(params, data.samples):.6f}")
    return 0


def _sweep(args, config, sweep: str) -> int:
    cfg = _experiment_config(args, config)
    out = _out_dir(args)
    rows = run_sweep(
        sweep,
        cfg,
        args.seed,
        jobs=args.jobs,
        cache_dir=args.cache,
        progress=None if args.quiet else print_progress,
    )
    stem = "sweep_size" if sweep == GRID_SIZE else "sweep_samples"
    write_rows(out / f"{stem}.csv", sweep, rows)
    summary = summarise(rows, sweep)
    write_svg(out / f"{stem}.svg", summary, sweep)
    for (kind, model, x), s in summary.items():
        print(f"{kind:6s} {model:6s} {sweep}={x:<5d} mean {s['mean']:.3f} min {s['min']:.3f} max {s['max']:.3f}")
    if sweep == TRAIN_SIZE:
        for line in monotone_warning(summary):
            print(line, file=sys.stderr)
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} cell(s) failed; see the status column", file=sys.stderr)
    return 0


def cmd_sweep_size(args, config) -> int:
    return _sweep(args, config, GRID_SIZE)


def cmd_sweep_samples(args, config) -> int:
    return _sweep(args, config, TRAIN_SIZE)


def cmd_plot(args, config) -> int:
    sweep, rows = read_rows(args.csv)
    target = Path(args.svg) if args.svg else _out_dir(args) / (Path(args.csv).stem + ".svg")
    write_svg(target, summarise(rows, sweep), sweep)
    print(f"wrote {target}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphvalue", description=__doc__.split("\n\n")[0])
    parser.add_argument("--seed", type=int, default=0, help="master seed for all randomness (default 0)")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", default=".", help="output directory (default: current directory)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel sweep cells (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate train/test JSON-lines datasets")
    p.add_argument("--size", type=int)
    p.add_argument("--kind", choices=["plain", "traps"])
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--bucket-count", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model, write metrics.csv and checkpoint.json")
    p.add_argument("--data", required=True, help="dataset directory or train .jsonl file")
    p.add_argument("--test", help="test .jsonl file (default: test.jsonl next to --data)")
    p.add_argument("--model", choices=["deepgv", "mlp"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column (output is then not reproducible)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (uses test.jsonl) or .jsonl file")
    p.set_defaults(func=cmd_eval)

    for name, func, help_text in (
        ("sweep-size", cmd_sweep_size, "accuracy against grid size"),
        ("sweep-samples", cmd_sweep_samples, "accuracy against training-set size"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--grid-sizes", type=int, nargs="+")
        p.add_argument("--train-sizes", type=int, nargs="+")
        p.add_argument("--world-kinds", nargs="+", choices=["plain", "traps"])
        p.add_argument("--repetitions", type=int)
        p.add_argument("--n-train", type=int)
        p.add_argument("--n-test", type=int)
        p.add_argument("--cache", help="directory for per-cell results reused across runs")
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render a sweep CSV as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", help="output file (default: <out>/<csv stem>.svg)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args, load_config(args.config))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ad.CheckpointError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ad.DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
