"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is how inference runs. ``Tape.backward`` walks
the record in exact reverse execution order.

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), y)
    grads = tape.backward(loss, [w])
"""

from __future__ import annotations

import io
import threading
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(value, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value, name: Optional[str] = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable


class Tape:
    _local = threading.local()

    def __init__(self):
        self.nodes: list = []

    @classmethod
    def _stack(cls) -> list:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def __enter__(self):
        self._stack().append(self)
        return self

    def __exit__(self, *exc):
        self._stack().pop()
        return False

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list:
        """Gradients of scalar ``loss`` with respect to ``params``.

        Parameters the loss does not reach get an all-zero gradient.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def _record(value: np.ndarray, inputs: tuple, vjp: Callable, name: str) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, name=name)
    tape = Tape.current()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- forward ops ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def sparse_matmul(s: sp.spmatrix, b: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    b = _as_tensor(b)
    if s.shape[1] != b.shape[0]:
        raise ShapeError(f"sparse_matmul shapes {s.shape} and {b.shape} do not chain")
    s = sp.csr_matrix(s)
    st = s.T.tocsr()
    return _record(np.asarray(s @ b.value), (b,), lambda g: (np.asarray(st @ g),), "sparse_matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def row_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (a,), vjp, "row_softmax")


def log_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log of a non-positive value")
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def dropout(a: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.value * mask, (a,), lambda g: (g * mask,), "dropout")


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id; row ``i`` goes to ``segment_ids[i]``."""
    a = _as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise ShapeError(f"segment_ids has shape {ids.shape}, expected ({a.shape[0]},)")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeError(f"segment id outside [0, {num_segments})")
    agg = sp.csr_matrix(
        (np.ones(ids.size), (ids, np.arange(ids.size))), shape=(num_segments, ids.size)
    )
    width = int(np.prod(a.shape[1:]))
    out = np.asarray(agg @ a.value.reshape(ids.size, width)).reshape((num_segments,) + a.shape[1:])
    return _record(out, (a,), lambda g: (g[ids],), "segment_sum")


def gather_rows(a: Tensor, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather index outside [0, {n})")

    def vjp(g):
        scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
        return (np.asarray(scatter @ g.reshape(idx.size, int(np.prod(a.shape[1:])))).reshape(a.shape),)

    return _record(a.value[idx], (a,), vjp, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.value for t in ts], axis=axis), ts, vjp, "concat")


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reduce_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


@dataclass
class BatchNormStats:
    """Running mean / variance used by :func:`batch_norm` at inference time."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormStats":
        return cls(np.zeros(dim), np.ones(dim), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, train: bool) -> Tensor:
    """Normalise each column of ``x``.

    Training uses the batch statistics and folds them into ``stats``;
    inference uses ``stats`` and is a fixed affine map.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n = x.shape[0]
    gv, bv = gamma.value, beta.value
    if train and n > 1:
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        m = stats.momentum
        stats.mean = (1.0 - m) * stats.mean + m * mu
        stats.var = (1.0 - m) * stats.var + m * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + stats.eps)
        xhat = (x.value - mu) * inv

        def vjp(g):
            dxhat = g * gv
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        inv = 1.0 / np.sqrt(stats.var + stats.eps)
        xhat = (x.value - stats.mean) * inv

        def vjp(g):
            return g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(xhat * gv + bv, (x, gamma, beta), vjp, "batch_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``targets`` is either a vector of class indices or an ``n x C`` matrix of
    target distributions whose rows sum to one.
    """
    logits = _as_tensor(logits)
    if logits.value.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    n, C = logits.shape
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ShapeError(f"{t.shape[0]} targets for {n} rows")
        if t.size and (t.min() < 0 or t.max() >= C):
            raise ShapeError(f"target class outside [0, {C})")
        soft = np.zeros((n, C))
        soft[np.arange(n), t.astype(np.int64)] = 1.0
    else:
        if t.shape != (n, C):
            raise ShapeError(f"soft targets shape {t.shape} != logits shape {logits.shape}")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("soft target rows must sum to 1")
        soft = t.astype(DTYPE)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(soft * logp).sum() / n
    p = np.exp(logp)

    def vjp(g):
        return (g * (p * soft.sum(axis=1, keepdims=True) - soft) / n,)

    return _record(np.asarray(loss), (logits,), vjp, "cross_entropy")


# -- parameters, initialisation, optimiser --------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name: Optional[str] = None) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-a, a, size=(fan_in, fan_out)), name=name)


def zeros_param(n: int, name: Optional[str] = None) -> Tensor:
    return parameter(np.zeros(n), name=name)


@dataclass
class AdamState:
    """Moment estimates for one optimisation run.

    Weight decay is classic L2: ``weight_decay * param`` is added to the
    gradient before the moment updates.
    """

    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update of every tensor in ``params`` (keyed by name)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.learning_rate:
            p.value = p.value - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# -- checkpoints ----------------------------------------------------------------


def save_params(params: dict, path) -> None:
    """Write ``name -> array`` records to an ``.npz`` container (exact round trip).

    Accepts tensors or plain arrays. Entries are sorted and stamped with a
    fixed date so equal contents give equal bytes (``np.savez`` stamps the
    current time).
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            value = params[name]
            arr = np.ascontiguousarray(value.value if isinstance(value, Tensor) else value)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_params(path) -> dict:
    with np.load(Path(path), allow_pickle=False) as data:
        return {name: np.array(data[name]) for name in data.files}


def snapshot(params: dict) -> dict:
    return {name: t.value.copy() for name, t in params.items()}


def restore(params: dict, values: dict) -> None:
    for name, t in params.items():
        if values[name].shape != t.shape:
            raise ShapeError(f"checkpoint entry {name} has shape {values[name].shape}, expected {t.shape}")
        t.value = values[name].copy()
