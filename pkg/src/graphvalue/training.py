"""Cross-entropy training with Adam, evaluation and metrics for both models."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import GraphSample
from .models import (
    AttentionMonitor,
    DeepGVConfig,
    DeepGVParams,
    MLPBaselineParams,
    MLPConfig,
    ModelParams,
    collate,
    forward,
    mlp_input_dim,
)

METRICS_COLUMNS = ("epoch", "split", "loss", "accuracy", "wall_ms")


class ModelKind(str, Enum):
    DEEPGV = "deepgv"
    MLP = "mlp"


@dataclass
class TrainConfig:
    model: ModelKind = ModelKind.DEEPGV
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    patience: int = 20
    eval_every: int = 1
    embed_dim: int = 32
    iterations: int | None = None
    mlp_hidden: tuple[int, ...] = (256, 256)
    edge_attention: bool = True
    reinject: bool = True
    skip: bool = False
    residual: bool = False

    def __post_init__(self):
        self.model = ModelKind(self.model)
        self.mlp_hidden = tuple(self.mlp_hidden)
        for name in ("epochs", "batch_size", "patience", "eval_every", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


@dataclass
class EvalRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    wall_ms: float


@dataclass
class Metrics:
    records: list[EvalRecord] = field(default_factory=list)
    best_test_accuracy: float = 0.0
    best_epoch: int = 0
    fault_batch: int | None = None
    fault: str | None = None
    attention: AttentionMonitor = field(default_factory=AttentionMonitor)

    def rows(self, timing: bool = False) -> list[dict]:
        out = []
        for r in self.records:
            wall = f"{r.wall_ms:.0f}" if timing else ""
            out.append({"epoch": r.epoch, "split": "train", "loss": r.train_loss, "accuracy": r.train_accuracy, "wall_ms": wall})
            out.append({"epoch": r.epoch, "split": "test", "loss": r.test_loss, "accuracy": r.test_accuracy, "wall_ms": wall})
        return out

    def write_csv(self, path: str | Path, timing: bool = False) -> None:
        """Write one row per split per evaluation; ``wall_ms`` stays empty unless ``timing``."""
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows(timing):
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["epoch"] = int(row["epoch"])
        row["loss"] = float(row["loss"])
        row["accuracy"] = float(row["accuracy"])
        row["wall_ms"] = float(row["wall_ms"]) if row["wall_ms"] else None
    return rows


def cross_entropy_loss(logits, label) -> Tensor:
    """-log softmax(logits)[label]; batched logits give the mean over samples."""
    logits = ad.as_tensor(logits)
    if logits.data.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
        label = [label]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label outside 0..{n_classes - 1}")
    return ad.softmax_cross_entropy(logits, labels)


def init_params(config: TrainConfig, n_nodes: int, bucket_count: int) -> ModelParams:
    if config.model is ModelKind.DEEPGV:
        cfg = DeepGVConfig(
            n_nodes=n_nodes,
            embed_dim=config.embed_dim,
            iterations=config.iterations,
            bucket_count=bucket_count,
            skip=config.skip,
            edge_attention=config.edge_attention,
            residual=config.residual,
            reinject=config.reinject,
        )
        return DeepGVParams.init(cfg, seed=config.seed)
    cfg = MLPConfig.for_grid(n_nodes, hidden=config.mlp_hidden, bucket_count=bucket_count)
    return MLPBaselineParams.init(cfg, seed=config.seed)


def _batches(samples: Sequence[GraphSample], batch_size: int):
    for start in range(0, len(samples), batch_size):
        yield collate(samples[start:start + batch_size])


def predict(params: ModelParams, samples: Sequence[GraphSample], batch_size: int = 64) -> np.ndarray:
    """Logits for every sample, shape (n, buckets)."""
    out = []
    with ad.no_grad():
        for batch in _batches(samples, batch_size):
            out.append(forward(params, batch).data)
    return np.concatenate(out)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax breaks ties towards the lowest index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(params: ModelParams, samples: Sequence[GraphSample], batch_size: int = 64) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty split")
    labels = np.array([s.label for s in samples])
    return accuracy_from_logits(predict(params, samples, batch_size), labels)


def _loss_and_accuracy(params, samples, batch_size=64) -> tuple[float, float]:
    logits = predict(params, samples, batch_size)
    labels = np.array([s.label for s in samples])
    with ad.no_grad():
        loss = float(cross_entropy_loss(logits, labels).data)
    return loss, accuracy_from_logits(logits, labels)


def _check_compatible(params: ModelParams, splits: Sequence[Sequence[GraphSample]]) -> None:
    for samples in splits:
        n_nodes = sorted({s.n_nodes for s in samples})
        if isinstance(params, DeepGVParams):
            if n_nodes != [params.config.n_nodes]:
                raise ValueError(f"model built for {params.config.n_nodes} nodes, data has {n_nodes} nodes")
        elif [mlp_input_dim(n) for n in n_nodes] != [params.config.input_dim]:
            raise ValueError(f"MLP input size {params.config.input_dim} does not fit grids with {n_nodes} nodes")
        if len(n_nodes) != 1:
            raise ValueError(f"mixed grid sizes in one split: {n_nodes}")


def train_model(
    train: Sequence[GraphSample],
    test: Sequence[GraphSample],
    config: TrainConfig,
    params: ModelParams | None = None,
    log=None,
) -> tuple[ModelParams, Metrics]:
    """Mini-batch Adam on cross-entropy with early stopping on test accuracy.

    Train loss/accuracy in the records are running means over the epoch's
    batches. Returns the parameters of the best evaluation.
    """
    train, test = list(train), list(test)
    if not train or not test:
        raise ValueError("train and test splits must be non-empty")
    bucket_count = train[0].bucket_count
    if params is None:
        params = init_params(config, train[0].n_nodes, bucket_count)
    _check_compatible(params, (train, test))

    metrics = Metrics()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = ad.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    names = {id(t): name for name, t in params.tensors.items()}
    best = {k: v.copy() for k, v in params.arrays().items()}
    monitor = metrics.attention if isinstance(params, DeepGVParams) else None
    start = time.perf_counter()
    stale = 0
    batch_index = 0

    # epoch 0 is the initialisation; later epochs must beat it to replace it
    metrics.best_test_accuracy = _loss_and_accuracy(params, test)[1]

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        try:
            # overflow surfaces as NumericFault from the finiteness checks, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                for lo in range(0, len(order), config.batch_size):
                    batch = collate([train[k] for k in order[lo:lo + config.batch_size]])
                    logits = forward(params, batch, monitor)
                    loss = cross_entropy_loss(logits, batch.labels)
                    loss_sum += float(loss.data) * len(batch)
                    correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
                    grads = ad.backward(loss)
                    ad.adam_step(params.tensors, {names[id(t)]: g for t, g in grads.items()}, state)
                    batch_index += 1
        except ad.NumericFault as exc:
            ad.active_tape().clear()
            metrics.fault_batch = batch_index
            metrics.fault = str(exc)
            break

        if epoch % config.eval_every and epoch != config.epochs:
            continue
        test_loss, test_acc = _loss_and_accuracy(params, test)
        record = EvalRecord(
            epoch=epoch,
            train_loss=loss_sum / len(train),
            train_accuracy=correct / len(train),
            test_loss=test_loss,
            test_accuracy=test_acc,
            wall_ms=(time.perf_counter() - start) * 1000.0,
        )
        metrics.records.append(record)
        if log is not None:
            log(record)
        if test_acc > metrics.best_test_accuracy:
            metrics.best_test_accuracy = test_acc
            metrics.best_epoch = epoch
            best = {k: v.copy() for k, v in params.arrays().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    for name, arr in best.items():
        params.tensors[name].data = arr
    return params, metrics
