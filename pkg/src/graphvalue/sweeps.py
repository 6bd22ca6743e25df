"""Grid-size and train-size sweeps.

Every (world kind, x value, model, repetition) cell is an independent
training run. Repetition ``r`` uses seed ``master_seed + r`` for both the
dataset build and the model, so the two models of a cell see the same data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetConfig, GraphSample, build_dataset
from .training import ModelKind, TrainConfig, train_model

GRID_SIZE = "grid_size"
TRAIN_SIZE = "train_size"
SWEEP_KINDS = (GRID_SIZE, TRAIN_SIZE)


def sweep_columns(sweep: str) -> tuple[str, ...]:
    return ("world_kind", sweep, "model", "seed", "test_accuracy", "status")


@dataclass
class ExperimentConfig:
    grid_sizes: list[int] = field(default_factory=lambda: [4, 6, 8])
    train_sizes: list[int] = field(default_factory=lambda: [200, 500, 1000, 2000])
    sample_grid_size: int = 8
    world_kinds: list[str] = field(default_factory=lambda: ["plain", "traps"])
    models: list[str] = field(default_factory=lambda: ["deepgv", "mlp"])
    repetitions: int = 3
    n_train: int = 2000
    n_test: int = 500
    bucket_count: int = 4
    # TrainConfig fields shared by every cell; "model" and "seed" are set per cell
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("grid_sizes", "train_sizes", "world_kinds", "models"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if min(self.grid_sizes) < 2 or self.sample_grid_size < 2:
            raise ValueError("grid sizes must be at least 2")
        if min(self.train_sizes) < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("sample counts must be positive")
        self.world_kinds = [DatasetConfig(size=2, kind=k, n_train=1, n_test=1).kind for k in self.world_kinds]
        self.models = [ModelKind(m).value for m in self.models]
        unknown = set(self.train) - {f.name for f in fields(TrainConfig)}
        if unknown or {"model", "seed"} & set(self.train):
            raise ValueError(f"invalid train override(s): {sorted(unknown | ({'model', 'seed'} & set(self.train)))}")
        self.train_config("mlp", 0)  # validates the overrides

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config field(s): {sorted(unknown)}")
        return cls(**doc)

    def train_config(self, model: str, seed: int) -> TrainConfig:
        return TrainConfig(model=model, seed=seed, **self.train)

    def dataset_config(self, kind: str, size: int, n_train: int) -> DatasetConfig:
        return DatasetConfig(
            size=size, kind=kind, n_train=n_train, n_test=self.n_test, bucket_count=self.bucket_count
        )


@dataclass(frozen=True)
class Cell:
    index: int
    sweep: str
    world_kind: str
    x: int
    model: str
    seed: int
    dataset: dict
    train: dict
    # train-size sweeps train on the first ``prefix`` samples of a larger build
    prefix: int | None = None

    def key(self, source_digest: str) -> str:
        """Identity of the training run: data, training config and code.

        A train-size cell that uses the whole build is the same run as the
        grid-size cell with the same data, so both share one key.
        """
        prefix = None if self.prefix == self.dataset["n_train"] else self.prefix
        doc = {
            "dataset": self.dataset,
            "train": self.train,
            "seed": self.seed,
            "prefix": prefix,
            "source": source_digest,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:24]


def plan_cells(sweep: str, config: ExperimentConfig, master_seed: int) -> list[Cell]:
    if sweep not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep {sweep!r}")
    cells = []
    xs = config.grid_sizes if sweep == GRID_SIZE else config.train_sizes
    for kind in config.world_kinds:
        for x in xs:
            for model in config.models:
                for rep in range(config.repetitions):
                    seed = master_seed + rep
                    if sweep == GRID_SIZE:
                        data, prefix = config.dataset_config(kind, x, config.n_train), None
                    else:
                        data = config.dataset_config(kind, config.sample_grid_size, max(config.train_sizes))
                        prefix = x
                    train = asdict(config.train_config(model, seed))
                    train["model"] = ModelKind(train["model"]).value
                    train["mlp_hidden"] = list(train["mlp_hidden"])
                    cells.append(Cell(len(cells), sweep, kind, x, model, seed, asdict(data), train, prefix))
    return cells


@lru_cache(maxsize=4)
def _cached_build(dataset_json: str, seed: int):
    train, test = build_dataset(DatasetConfig(**json.loads(dataset_json)), seed)
    return train.samples, test.samples


def _datasets(cell: Cell) -> tuple[list[GraphSample], list[GraphSample]]:
    train, test = _cached_build(json.dumps(cell.dataset, sort_keys=True), cell.seed)
    return (train if cell.prefix is None else train[: cell.prefix]), test


def run_cell(cell: Cell) -> dict:
    """Train and evaluate one cell; failures become a status string."""
    try:
        train, test = _datasets(cell)
        cfg = dict(cell.train)
        cfg["mlp_hidden"] = tuple(cfg["mlp_hidden"])
        _, metrics = train_model(train, test, TrainConfig(**cfg))
        status = "ok" if metrics.fault is None else f"numeric fault at batch {metrics.fault_batch}"
        return {"test_accuracy": metrics.best_test_accuracy, "status": status}
    except Exception as exc:  # a failing cell must not stop the sweep
        return {"test_accuracy": None, "status": f"error: {type(exc).__name__}: {exc}"}


# modules whose code determines a cell's result
RESULT_MODULES = ("mdp.py", "dataset.py", "autodiff.py", "models.py", "training.py")


def source_digest() -> str:
    """Hash of the modules that shape results, so cached cells expire when they change."""
    h = hashlib.sha256()
    for path in (Path(__file__).parent / name for name in RESULT_MODULES):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _row(cell: Cell, result: dict) -> dict:
    return {
        "world_kind": cell.world_kind,
        cell.sweep: cell.x,
        "model": cell.model,
        "seed": cell.seed,
        "test_accuracy": result["test_accuracy"],
        "status": result["status"],
    }


def run_sweep(
    sweep: str,
    config: ExperimentConfig,
    master_seed: int,
    jobs: int = 1,
    cache_dir: str | Path | None = None,
    progress: Callable[[Cell, dict], None] | None = None,
) -> list[dict]:
    """Run every cell and return CSV rows in cell order.

    With ``cache_dir`` set, finished cells are stored as JSON keyed by the
    cell definition and the package source hash, and reused on later runs.
    """
    cells = plan_cells(sweep, config, master_seed)
    results: dict[int, dict] = {}
    cache = Path(cache_dir) if cache_dir is not None else None
    digest = source_digest() if cache is not None else ""
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        for cell in cells:
            path = cache / f"{cell.key(digest)}.json"
            if path.exists():
                results[cell.index] = json.loads(path.read_text())["result"]
    todo = [c for c in cells if c.index not in results]

    def finish(cell: Cell, result: dict) -> None:
        results[cell.index] = result
        if cache is not None and result["status"] == "ok":
            doc = {"cell": asdict(cell), "result": result}
            (cache / f"{cell.key(digest)}.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
        if progress is not None:
            progress(cell, result)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, result in zip(todo, pool.map(run_cell, todo)):
                finish(cell, result)
    else:
        for cell in todo:
            finish(cell, run_cell(cell))
    return [_row(cell, results[cell.index]) for cell in cells]


def write_rows(path: str | Path, sweep: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=sweep_columns(sweep), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            acc = row["test_accuracy"]
            writer.writerow({**row, "test_accuracy": "" if acc is None else repr(float(acc))})


def read_rows(path: str | Path) -> tuple[str, list[dict]]:
    """Parse a sweep CSV; returns the sweep kind (the x column) and typed rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        sweep = next((s for s in SWEEP_KINDS if header == sweep_columns(s)), None)
        if sweep is None:
            raise ValueError(f"{path}: unrecognised sweep CSV header {header}")
        rows = []
        for row in reader:
            row[sweep] = int(row[sweep])
            row["seed"] = int(row["seed"])
            row["test_accuracy"] = float(row["test_accuracy"]) if row["test_accuracy"] else None
            rows.append(row)
    return sweep, rows


def summarise(rows: Sequence[dict], sweep: str) -> dict[tuple[str, str, int], dict]:
    """Mean/min/max test accuracy per (world kind, model, x) over successful cells."""
    groups: dict[tuple[str, str, int], list[float]] = {}
    for row in rows:
        if row["test_accuracy"] is None:
            continue
        groups.setdefault((row["world_kind"], row["model"], row[sweep]), []).append(row["test_accuracy"])
    return {
        key: {"mean": float(np.mean(v)), "min": min(v), "max": max(v), "n": len(v)}
        for key, v in sorted(groups.items())
    }


def smallest_reaching(summary: dict, kind: str, model: str, threshold: float) -> float:
    """Smallest x whose mean accuracy reaches ``threshold``; inf if none does."""
    xs = sorted(x for (k, m, x), s in summary.items() if k == kind and m == model and s["mean"] >= threshold)
    return float(xs[0]) if xs else float("inf")


def monotone_warning(summary: dict, model: str = "deepgv") -> list[str]:
    """Warnings for kinds where the largest train size scores below the smallest."""
    out = []
    for kind in sorted({k for k, _, _ in summary}):
        xs = sorted(x for k, m, x in summary if k == kind and m == model)
        if len(xs) >= 2 and summary[(kind, model, xs[-1])]["mean"] < summary[(kind, model, xs[0])]["mean"]:
            out.append(f"warning: {model} on {kind} scores lower at {xs[-1]} samples than at {xs[0]}")
    return out


def print_progress(cell: Cell, result: dict) -> None:
    acc = result["test_accuracy"]
    acc_text = "-" if acc is None else f"{acc:.3f}"
    print(
        f"[{cell.index}] {cell.world_kind} {cell.sweep}={cell.x} {cell.model} seed={cell.seed}: "
        f"{acc_text} ({result['status']})",
        file=sys.stderr,
        flush=True,
    )
