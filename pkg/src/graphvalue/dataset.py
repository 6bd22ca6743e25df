"""Supervised graph samples built from solved grid worlds, plus JSON-lines I/O.

Seeding: sample ``k`` of a build (train samples first, then test) uses
``SeedSequence([master_seed, k])``; its first 64-bit word is the world
seed and its spawned child drives the initial values and the query.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .mdp import (
    MDP,
    N_ACTIONS,
    RankLabeling,
    ValueSolution,
    WorldKind,
    compile_mdp,
    generate_grid_world,
    rank_states,
    value_iteration,
)

SCHEMA = "graphvalue-v1"
NODE_FEATURES = 4  # x / N, y / N, initial value, is_query
EDGE_CHANNELS = 2 * N_ACTIONS  # per action: reward, reachable


class InvalidQuery(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SampleMeta:
    size: int
    discount: float
    kind: str
    world_seed: int
    sample_seed: int
    query_value: float = 0.0


@dataclass(eq=False)
class GraphSample:
    """One query on one world.

    Edges are stored sparsely: ``edge_index`` rows are ``(i, a, j)`` with
    ``T[i, a, j] > 0`` and ``edge_reward`` holds ``R[i, a, j]`` for them.
    ``edge_features`` expands this to the dense ``(V, V, 8)`` layout with
    channel ``2a`` the reward and ``2a + 1`` the reachability flag.
    """

    node_features: np.ndarray
    edge_index: np.ndarray
    edge_reward: np.ndarray
    reward_table: np.ndarray
    query_index: int
    label: int
    bucket_count: int
    meta: SampleMeta

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def edge_features(self) -> np.ndarray:
        v = self.n_nodes
        dense = np.zeros((v, v, EDGE_CHANNELS))
        i, a, j = self.edge_index.T
        dense[i, j, 2 * a] = self.edge_reward
        dense[i, j, 2 * a + 1] = 1.0
        return dense

    def __eq__(self, other):
        if not isinstance(other, GraphSample):
            return NotImplemented
        return (
            np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.edge_index, other.edge_index)
            and np.array_equal(self.edge_reward, other.edge_reward)
            and np.array_equal(self.reward_table, other.reward_table)
            and (self.query_index, self.label, self.bucket_count, self.meta)
            == (other.query_index, other.label, other.bucket_count, other.meta)
        )

    def to_dict(self) -> dict:
        return {
            "node_features": self.node_features.tolist(),
            "edge_index": self.edge_index.tolist(),
            "edge_reward": self.edge_reward.tolist(),
            "reward_table": self.reward_table.tolist(),
            "query_index": self.query_index,
            "label": self.label,
            "bucket_count": self.bucket_count,
            "meta": asdict(self.meta),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GraphSample":
        sample = cls(
            node_features=np.asarray(doc["node_features"], dtype=np.float64),
            edge_index=np.asarray(doc["edge_index"], dtype=np.int64).reshape(-1, 3),
            edge_reward=np.asarray(doc["edge_reward"], dtype=np.float64),
            reward_table=np.asarray(doc["reward_table"], dtype=np.float64),
            query_index=int(doc["query_index"]),
            label=int(doc["label"]),
            bucket_count=int(doc["bucket_count"]),
            meta=SampleMeta(**doc["meta"]),
        )
        sample.validate()
        return sample

    def validate(self) -> None:
        v = self.n_nodes
        if self.node_features.shape != (v, NODE_FEATURES):
            raise ValueError(f"node_features must be ({v}, {NODE_FEATURES})")
        if self.meta.size**2 != v:
            raise ValueError(f"{v} nodes do not form a {self.meta.size}x{self.meta.size} grid")
        if self.reward_table.shape != (v, N_ACTIONS):
            raise ValueError(f"reward_table must be ({v}, {N_ACTIONS})")
        if len(self.edge_index) != len(self.edge_reward):
            raise ValueError("edge_index and edge_reward lengths differ")
        if self.edge_index.size and (
            self.edge_index[:, [0, 2]].min() < 0
            or self.edge_index[:, [0, 2]].max() >= v
            or not np.isin(self.edge_index[:, 1], range(N_ACTIONS)).all()
        ):
            raise ValueError("edge_index out of range")
        if not 0 <= self.query_index < v:
            raise ValueError(f"query_index {self.query_index} out of range")
        flags = self.node_features[:, 3]
        if flags.sum() != 1.0 or flags[self.query_index] != 1.0:
            raise ValueError("exactly the query node must carry is_query = 1")
        if not 0 <= self.label < self.bucket_count:
            raise ValueError(f"label {self.label} outside 0..{self.bucket_count - 1}")


def make_sample(
    mdp: MDP,
    solution: ValueSolution,
    ranks: RankLabeling,
    query: int,
    sample_seed: int,
    *,
    kind: str = WorldKind.PLAIN.value,
    world_seed: int = 0,
) -> GraphSample:
    n_states = mdp.n_states
    size = math.isqrt(n_states)
    if size * size != n_states:
        raise ValueError(f"{n_states} states do not form a square grid")
    if not 0 <= query < n_states:
        raise InvalidQuery(f"query {query} out of range")
    if mdp.obstacle[query]:
        raise InvalidQuery(f"query {query} is an obstacle")
    rng = np.random.default_rng(sample_seed)
    rows, cols = np.divmod(np.arange(n_states), size)
    feats = np.zeros((n_states, NODE_FEATURES))
    feats[:, 0] = cols / size
    feats[:, 1] = rows / size
    feats[:, 2] = rng.random(n_states)
    feats[query, 3] = 1.0
    edge_index = np.argwhere(mdp.transition > 0)
    edge_reward = mdp.reward[tuple(edge_index.T)]
    return GraphSample(
        node_features=feats,
        edge_index=edge_index.astype(np.int64),
        edge_reward=edge_reward,
        reward_table=mdp.expected_reward(),
        query_index=int(query),
        label=int(ranks.buckets[query]),
        bucket_count=ranks.bucket_count,
        meta=SampleMeta(
            size=size,
            discount=float(mdp.discount),
            kind=str(kind),
            world_seed=int(world_seed),
            sample_seed=int(sample_seed),
            query_value=float(solution.values[query]),
        ),
    )


@dataclass
class DatasetConfig:
    size: int = 8
    kind: str = WorldKind.PLAIN.value
    n_train: int = 2000
    n_test: int = 500
    bucket_count: int | None = 4  # None labels with the exact rank
    slip_prob: float = 0.8
    discount: float = 0.9
    reward_goal: float = 1.0
    reward_fire: float = -1.0
    reward_step: float = 0.0

    def __post_init__(self):
        self.kind = WorldKind(self.kind).value
        if self.size < 2:
            raise ValueError(f"size must be at least 2, got {self.size}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be at least 1")
        buckets = self.n_buckets
        if not 2 <= buckets <= self.size**2:
            raise ValueError(f"bucket_count must lie in [2, {self.size ** 2}]")

    @property
    def n_buckets(self) -> int:
        return self.size**2 if self.bucket_count is None else self.bucket_count

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown dataset config field(s): {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Dataset:
    samples: list[GraphSample]
    split: str
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[GraphSample]:
        return iter(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.provenance == other.provenance
            and len(self.samples) == len(other.samples)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )


def sample_seeds(master_seed: int, counter: int) -> tuple[int, int]:
    """(world_seed, sample_seed) for the ``counter``-th sample of a build."""
    seq = np.random.SeedSequence([master_seed, counter])
    world_seed = int(seq.generate_state(1, np.uint64)[0])
    sample_seed = int(seq.spawn(1)[0].generate_state(1, np.uint64)[0])
    return world_seed, sample_seed


def build_sample(config: DatasetConfig, master_seed: int, counter: int) -> GraphSample:
    world_seed, sample_seed = sample_seeds(master_seed, counter)
    spec = generate_grid_world(
        world_seed,
        config.size,
        config.kind,
        slip_prob=config.slip_prob,
        discount=config.discount,
        reward_goal=config.reward_goal,
        reward_fire=config.reward_fire,
        reward_step=config.reward_step,
    )
    mdp = compile_mdp(spec)
    solution = value_iteration(mdp)
    ranks = rank_states(solution, config.n_buckets)
    rng = np.random.default_rng([sample_seed, 1])
    query = int(rng.choice(np.flatnonzero(~mdp.obstacle)))
    return make_sample(
        mdp, solution, ranks, query, sample_seed, kind=config.kind, world_seed=world_seed
    )


def build_dataset(config: DatasetConfig, master_seed: int) -> tuple[Dataset, Dataset]:
    """Fresh world per sample; train uses counters 0..n_train-1, test the next n_test."""
    provenance = {"config": asdict(config), "master_seed": master_seed}
    train = [build_sample(config, master_seed, k) for k in range(config.n_train)]
    test = [build_sample(config, master_seed, config.n_train + k) for k in range(config.n_test)]
    overlap = {s.meta.world_seed for s in train} & {s.meta.world_seed for s in test}
    if overlap:
        raise RuntimeError(f"world seeds shared between splits: {sorted(overlap)[:5]}")
    return (
        Dataset(train, "train", provenance),
        Dataset(test, "test", provenance),
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    header = {
        "schema": SCHEMA,
        "split": dataset.split,
        "count": len(dataset),
        "provenance": dataset.provenance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in dataset.samples:
            fh.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:1: header is not JSON ({exc})") from None
    if not isinstance(header, dict) or "schema" not in header:
        raise DatasetFormatError(f"{path}:1: missing schema header")
    if header["schema"] != SCHEMA:
        raise DatasetFormatError(f"{path}:1: schema {header['schema']!r}, expected {SCHEMA!r}")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            samples.append(GraphSample.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: cannot parse sample ({exc})") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: invalid sample ({exc})") from None
    if header.get("count") is not None and header["count"] != len(samples):
        raise DatasetFormatError(
            f"{path}: header announces {header['count']} samples, found {len(samples)}"
        )
    return Dataset(samples, header.get("split", ""), header.get("provenance", {}))
