"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive appends its output to the thread's active :class:`Tape`
when any input requires a gradient. :func:`backward` walks the tape in
reverse, returns gradients for the leaf tensors and clears the tape.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np

CHECKPOINT_FORMAT = "graphvalue-checkpoint-v1"


class NumericFault(ArithmeticError):
    """A NaN or infinity appeared in a forward value or a gradient."""


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Tape:
    def __init__(self):
        self.records: list[Tensor] = []

    def record(self, t: "Tensor") -> None:
        t.node_id = len(self.records)
        self.records.append(t)

    def clear(self) -> None:
        for t in self.records:
            t.node_id = None
        self.records.clear()

    def __len__(self):
        return len(self.records)


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward
        active_tape().record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    # a stack of row vectors times one matrix is a single 2-D product
    flat = b.data.ndim == 2
    k = a.shape[-1]

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    if flat:
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)
    return _make(out, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), backward, "softmax_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax_rows")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if t.data.ndim != ndim or other != first:
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def gather_rows(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries ``indices`` along ``axis`` (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.data.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise DimensionError(f"gather_rows: index out of range for shape {a.shape}")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return _make(np.take(a.data, idx, axis=ax), (a,), backward, "gather_rows")


def sum_rows(a: Tensor, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (``None`` sums everything)."""
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum_rows")


def mean(a: Tensor) -> Tensor:
    return scale(sum_rows(a, axis=None), 1.0 / a.data.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


@numba.njit(cache=True)
def _pair_logits_fwd(left, right, w, out):
    m_count, v, d = left.shape
    for m in range(m_count):
        for i in range(v):
            for j in range(v):
                acc = 0.0
                for k in range(d):
                    x = left[m, i, k] + right[m, j, k]
                    if x > 0.0:
                        acc += x * w[k]
                out[m, i, j] = acc


@numba.njit(cache=True)
def _pair_logits_bwd(left, right, w, g, dleft, dright, dw):
    m_count, v, d = left.shape
    for m in range(m_count):
        for i in range(v):
            for j in range(v):
                gij = g[m, i, j]
                for k in range(d):
                    x = left[m, i, k] + right[m, j, k]
                    if x > 0.0:
                        dleft[m, i, k] += gij * w[k]
                        dright[m, j, k] += gij * w[k]
                        dw[k] += gij * x


def pairwise_relu_logits(left: Tensor, right: Tensor, w: Tensor) -> Tensor:
    """out[..., i, j] = sum_k w[k] * relu(left[..., i, k] + right[..., j, k]).

    Equivalent to ``matmul(relu(left[..., :, None, :] + right[..., None, :, :]), w)``
    without materialising the pairwise hidden layer.
    """
    if left.shape != right.shape or left.data.ndim < 2 or w.shape not in ((left.shape[-1],), (left.shape[-1], 1)):
        raise DimensionError(
            f"pairwise_relu_logits: incompatible shapes {left.shape}, {right.shape} and {w.shape}"
        )
    lead, (v, d) = left.shape[:-2], left.shape[-2:]
    l3 = np.ascontiguousarray(left.data.reshape(-1, v, d))
    r3 = np.ascontiguousarray(right.data.reshape(-1, v, d))
    w1 = np.ascontiguousarray(w.data.reshape(d))
    out = np.empty((l3.shape[0], v, v))
    _pair_logits_fwd(l3, r3, w1, out)

    def backward(g):
        dl, dr, dw = np.zeros_like(l3), np.zeros_like(r3), np.zeros(d)
        _pair_logits_bwd(l3, r3, w1, np.ascontiguousarray(g.reshape(-1, v, v)), dl, dr, dw)
        return dl.reshape(left.shape), dr.reshape(right.shape), dw.reshape(w.shape)

    return _make(out.reshape(lead + (v, v)), (left, right, w), backward, "pairwise_relu_logits")


def take_labels(a: Tensor, labels) -> Tensor:
    """Pick ``a[i, labels[i]]`` from a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, labels), g)
        return (out,)

    return _make(a.data[rows, labels], (a,), backward, "take_labels")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], fused for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be {n} integers in [0, {c})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf tensor that requires one.

    The returned dict is keyed by the leaf tensors themselves.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if loss.node_id is None or loss.node_id >= len(tape) or tape.records[loss.node_id] is not loss:
        raise ContractError("loss was not produced on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.records[: loss.node_id + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
            if parent._backward is None:
                leaves[key] = parent
    tape.clear()
    out = {leaves[k]: grads[k] for k in leaves}
    for g in out.values():
        _check_finite(g, "backward")
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks every coordinate of ``params`` unless ``n_coords`` asks for a
    random sample. Relative error is |a - n| / max(1e-8, |a| + |n|).
    """
    loss = f()
    grads = backward(loss)
    coords = [(p, i) for p in params for i in range(p.data.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        coords = [coords[k] for k in rng.choice(len(coords), size=n_coords, replace=False)]
    worst = 0.0
    with no_grad():
        for p, i in coords:
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(f().data)
            flat[i] = orig - epsilon
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = float(grads.get(p, np.zeros_like(p.data)).reshape(-1)[i])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # decoupled decay (AdamW) applied to matrices only; biases are left alone
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    updates = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        with np.errstate(over="ignore", invalid="ignore"):
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            new = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
            if state.weight_decay and p.data.ndim >= 2:
                new = new - state.lr * state.weight_decay * p.data
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
            raise NumericFault(f"Adam update overflowed for parameter {name!r}")
        updates[name] = (m, v, new)
    # commit only once every parameter has a finite update
    state.step = t
    for name, (m, v, new) in updates.items():
        state.m[name], state.v[name] = m, v
        params[name].data = new
    return state


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(np.shape(_array(t))), "data": _array(t).reshape(-1).tolist()}
            for name, t in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing or unknown checkpoint format")
    tensors = {}
    for name, entry in doc.get("tensors", {}).items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {name!r} has {data.size} values for shape {shape}")
        tensors[name] = data.reshape(shape)
    return tensors, doc.get("meta", {})


def _array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def parameters(named: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {name: Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name) for name, arr in named}
