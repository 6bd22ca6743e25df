"""DeepGV message-passing network and the MLP baseline.

Batched shapes: node features ``(B, V, 4)``, dense edge features
``(B, V, V, 8)``, discounts ``(B,)``. Node embeddings are ``(B, V, d)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import EDGE_CHANNELS, NODE_FEATURES, GraphSample
from .mdp import N_ACTIONS

ATTENTION_TOL = 1e-9


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


# -------------------------------------------------------------------- DeepGV


@dataclass
class DeepGVConfig:
    n_nodes: int
    embed_dim: int = 32
    iterations: int | None = None  # None: 2 (N - 1), the grid diameter
    bucket_count: int = 4
    # edge_attention adds a learned edge bias to the attention logits;
    # reinject feeds the input embedding to every node update
    edge_attention: bool = True
    reinject: bool = True
    skip: bool = False
    residual: bool = False

    def __post_init__(self):
        size = int(round(np.sqrt(self.n_nodes)))
        if self.iterations is None:
            self.iterations = max(1, 2 * (size - 1))
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.embed_dim < 1 or self.bucket_count < 2:
            raise ValueError("embed_dim must be positive and bucket_count at least 2")


@dataclass
class DeepGVParams:
    config: DeepGVConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: DeepGVConfig, seed: int) -> "DeepGVParams":
        rng = np.random.default_rng(seed)
        d, v, b = config.embed_dim, config.n_nodes, config.bucket_count
        shapes = [
            ("embed_in.w", (NODE_FEATURES, d)),
            ("embed_in.b", (d,)),
            ("edge_embed.w", (EDGE_CHANNELS // N_ACTIONS, d)),
            ("edge_embed.b", (d,)),
            # attention logits; no output bias since softmax ignores shifts
            ("f_theta.w1", (2 * d, d)),
            ("f_theta.b1", (d,)),
            ("f_theta.w2", (d, 1)),
            *([("attn_edge.w", (EDGE_CHANNELS, 1))] if config.edge_attention else []),
            ("f_psi.w1", ((N_ACTIONS + config.skip + config.reinject) * d, d)),
            ("f_psi.b1", (d,)),
            ("f_psi.w2", (d, d)),
            ("f_psi.b2", (d,)),
            ("f_omega.w1", (v * d, d)),
            ("f_omega.b1", (d,)),
            ("f_omega.w2", (d, b)),
            ("f_omega.b2", (b,)),
        ]
        arrays = []
        for name, shape in shapes:
            arr = glorot(rng, *shape) if len(shape) == 2 else np.zeros(shape)
            arrays.append((name, arr))
        return cls(config, ad.parameters(arrays))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def meta(self) -> dict:
        return {"model": "deepgv", **asdict(self.config)}


@dataclass
class AttentionMonitor:
    """Tracks the worst attention row-sum deviation seen."""

    rows_checked: int = 0
    max_row_error: float = 0.0

    def observe(self, attention: np.ndarray) -> None:
        err = float(np.max(np.abs(attention.sum(axis=-1) - 1.0)))
        self.rows_checked += int(np.prod(attention.shape[:-1]))
        self.max_row_error = max(self.max_row_error, err)


def attention_weights(h: Tensor, params: DeepGVParams, edge_features=None) -> Tensor:
    """Row-softmax over j of f_theta(h_i, h_j), computed for all ordered pairs.

    The first layer of f_theta acts on concat(h_i, h_j), which splits into a
    term for h_i plus a term for h_j, so the pairwise hidden layer is never
    stored.
    """
    d = h.shape[-1]
    w1 = params["f_theta.w1"]
    left = _linear(h, ad.gather_rows(w1, range(d)), params["f_theta.b1"])
    right = _linear(h, ad.gather_rows(w1, range(d, 2 * d)))
    logits = ad.pairwise_relu_logits(left, right, params["f_theta.w2"])
    if params.config.edge_attention:
        bias = ad.matmul(ad.as_tensor(edge_features), params["attn_edge.w"])
        logits = ad.add(logits, ad.reshape(bias, logits.shape))
    attn = ad.softmax_rows(logits)
    assert np.all(np.abs(attn.data.sum(axis=-1) - 1.0) <= ATTENTION_TOL), "attention rows must sum to 1"
    return attn


def edge_rewards(edge_features, params: DeepGVParams) -> Tensor:
    """Embedded rewards r(i, a, j), shape (..., V, V, |A|, d)."""
    ef = ad.as_tensor(edge_features)
    per_action = ad.reshape(ef, ef.shape[:-1] + (N_ACTIONS, EDGE_CHANNELS // N_ACTIONS))
    return _linear(per_action, params["edge_embed.w"], params["edge_embed.b"])


def f_psi(messages: Tensor, params: DeepGVParams) -> Tensor:
    hidden = ad.relu(_linear(messages, params["f_psi.w1"], params["f_psi.b1"]))
    return _linear(hidden, params["f_psi.w2"], params["f_psi.b2"])


def _discounted(h: Tensor, gamma) -> Tensor:
    gamma = np.asarray(gamma, dtype=np.float64)
    return ad.mul(h, gamma.reshape(gamma.shape + (1, 1)))


def _psi_input(messages: Tensor, h: Tensor, z: Tensor | None, params: DeepGVParams) -> Tensor:
    """Flattened per-action messages, optionally followed by h and the input embedding z."""
    parts = [messages]
    if params.config.skip:
        parts.append(h)
    if params.config.reinject:
        if z is None:
            raise ValueError("reinject needs the input embedding z")
        parts.append(z)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


def node_update(
    h: Tensor, attention: Tensor, edge_r: Tensor, gamma, params: DeepGVParams, z: Tensor | None = None
) -> Tensor:
    """h_i' = f_psi(concat_a sum_j A_ij (r(i, a, j) + gamma h_j)) on the full edge tensor."""
    lead, (v, d) = h.shape[:-2], h.shape[-2:]
    gh = _discounted(h, gamma)
    target = ad.add(edge_r, ad.reshape(gh, lead + (1, v, 1, d)))
    weighted = ad.mul(target, ad.reshape(attention, lead + (v, v, 1, 1)))
    messages = ad.reshape(ad.sum_rows(weighted, axis=-3), lead + (v, N_ACTIONS * d))
    return f_psi(_psi_input(messages, h, z, params), params)


def node_update_fused(
    h: Tensor, attention: Tensor, edge_features, gamma, params: DeepGVParams, z: Tensor | None = None
) -> Tensor:
    """Same result as :func:`node_update` without materialising r(i, a, j).

    The edge embedding is affine and attention rows sum to one, so
    sum_j A_ij r(i, a, j) = (sum_j A_ij e(i, a, j)) W + b.
    """
    lead, (v, d) = h.shape[:-2], h.shape[-2:]
    ef = ad.as_tensor(edge_features)
    # row i of A against the (V, 8) edge block of node i
    pooled = ad.matmul(ad.reshape(attention, lead + (v, 1, v)), ef)
    pooled = ad.reshape(pooled, lead + (v, N_ACTIONS, EDGE_CHANNELS // N_ACTIONS))
    reward_part = _linear(pooled, params["edge_embed.w"], params["edge_embed.b"])
    value_part = ad.matmul(attention, _discounted(h, gamma))
    messages = ad.add(reward_part, ad.reshape(value_part, lead + (v, 1, d)))
    messages = ad.reshape(messages, lead + (v, N_ACTIONS * d))
    return f_psi(_psi_input(messages, h, z, params), params)


def embed_nodes(node_features, params: DeepGVParams) -> Tensor:
    return _linear(ad.as_tensor(node_features), params["embed_in.w"], params["embed_in.b"])


def message_passing(
    node_features, edge_features, gamma, params: DeepGVParams, monitor: AttentionMonitor | None = None
) -> Tensor:
    """Embed nodes and run the K shared-weight rounds; returns h^(K)."""
    h = z = embed_nodes(node_features, params)
    for _ in range(params.config.iterations):
        attn = attention_weights(h, params, edge_features)
        if monitor is not None:
            monitor.observe(attn.data)
        update = node_update_fused(h, attn, edge_features, gamma, params, z)
        h = ad.add(h, update) if params.config.residual else update
    return h


def readout(h: Tensor, params: DeepGVParams) -> Tensor:
    """f_omega over the row-major concat of node embeddings; (V, d) gives a B-vector."""
    v, d = h.shape[-2:]
    expected = params["f_omega.w1"].shape[0]
    if v * d != expected:
        raise ad.DimensionError(
            f"readout built for {expected // d} nodes, got embeddings of shape {h.shape}"
        )
    single = len(h.shape) == 2
    flat = ad.reshape(h, (1, v * d) if single else h.shape[:-2] + (v * d,))
    hidden = ad.relu(_linear(flat, params["f_omega.w1"], params["f_omega.b1"]))
    logits = _linear(hidden, params["f_omega.w2"], params["f_omega.b2"])
    return ad.reshape(logits, (logits.shape[-1],)) if single else logits


def deepgv_forward(
    batch: "Batch | GraphSample", params: DeepGVParams, monitor: AttentionMonitor | None = None
) -> Tensor:
    """Logits of shape (B, buckets) for a batch, or (1, buckets) for one sample."""
    if isinstance(batch, GraphSample):
        batch = collate([batch])
    if batch.node_features.shape[1] != params.config.n_nodes:
        raise ad.DimensionError(
            f"model built for {params.config.n_nodes} nodes, sample has {batch.node_features.shape[1]}"
        )
    h = message_passing(batch.node_features, batch.edge_features, batch.gamma, params, monitor)
    return readout(h, params)


# ---------------------------------------------------------------------- MLP


@dataclass
class MLPConfig:
    input_dim: int
    hidden: tuple[int, ...] = (256, 256)
    bucket_count: int = 4

    def __post_init__(self):
        self.hidden = tuple(self.hidden)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.bucket_count]

    @classmethod
    def for_grid(cls, n_nodes: int, **kw) -> "MLPConfig":
        return cls(input_dim=mlp_input_dim(n_nodes), **kw)


def mlp_input_dim(n_nodes: int) -> int:
    return n_nodes * NODE_FEATURES + n_nodes * N_ACTIONS + n_nodes


@dataclass
class MLPBaselineParams:
    config: MLPConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: MLPConfig, seed: int) -> "MLPBaselineParams":
        rng = np.random.default_rng(seed)
        sizes = config.layer_sizes
        arrays = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            arrays.append((f"layer{k}.w", glorot(rng, fan_in, fan_out)))
            arrays.append((f"layer{k}.b", np.zeros(fan_out)))
        return cls(config, ad.parameters(arrays))

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_sizes) - 1

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def meta(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return {"model": "mlp", **cfg}


def flatten_sample(sample: GraphSample) -> np.ndarray:
    """Node features (row-major), then the |V| x |A| expected rewards, then the query one-hot."""
    one_hot = np.zeros(sample.n_nodes)
    one_hot[sample.query_index] = 1.0
    return np.concatenate([sample.node_features.reshape(-1), sample.reward_table.reshape(-1), one_hot])


def mlp_forward(batch: "Batch | GraphSample | np.ndarray", params: MLPBaselineParams) -> Tensor:
    if isinstance(batch, GraphSample):
        x = flatten_sample(batch)[None, :]
    elif isinstance(batch, Batch):
        x = batch.flat
    else:
        x = np.atleast_2d(batch)
    if x.shape[-1] != params.config.input_dim:
        raise ad.DimensionError(
            f"MLP expects inputs of length {params.config.input_dim}, got shape {x.shape}"
        )
    out = Tensor(x)
    for k in range(params.n_layers):
        out = _linear(out, params[f"layer{k}.w"], params[f"layer{k}.b"])
        if k < params.n_layers - 1:
            out = ad.relu(out)
    return out


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    node_features: np.ndarray
    edge_features: np.ndarray
    gamma: np.ndarray
    labels: np.ndarray
    flat: np.ndarray

    def __len__(self):
        return len(self.labels)


def collate(samples: Sequence[GraphSample]) -> Batch:
    sizes = {s.n_nodes for s in samples}
    if len(sizes) != 1:
        raise ad.DimensionError(f"cannot batch samples with node counts {sorted(sizes)}")
    return Batch(
        node_features=np.stack([s.node_features for s in samples]),
        edge_features=np.stack([s.edge_features for s in samples]),
        gamma=np.array([s.meta.discount for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        flat=np.stack([flatten_sample(s) for s in samples]),
    )


ModelParams = DeepGVParams | MLPBaselineParams


def forward(params: ModelParams, batch: Batch, monitor: AttentionMonitor | None = None) -> Tensor:
    if isinstance(params, DeepGVParams):
        return deepgv_forward(batch, params, monitor)
    return mlp_forward(batch, params)


def params_from_checkpoint(arrays: dict[str, np.ndarray], meta: dict) -> ModelParams:
    meta = dict(meta)
    kind = meta.pop("model", None)
    if kind == "deepgv":
        params = DeepGVParams(DeepGVConfig(**meta))
    elif kind == "mlp":
        params = MLPBaselineParams(MLPConfig(**meta))
    else:
        raise ad.CheckpointError(f"unknown model kind {kind!r}")
    reference = type(params).init(params.config, seed=0).tensors
    if set(arrays) != set(reference):
        raise ad.CheckpointError("checkpoint tensors do not match the model layout")
    for name, ref in reference.items():
        if arrays[name].shape != ref.shape:
            raise ad.CheckpointError(f"tensor {name!r} has shape {arrays[name].shape}, expected {ref.shape}")
    params.tensors = ad.parameters(arrays.items())
    return params
