"""Minimal reverse-mode differentiation on dense float64 arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded in
insertion order; ``backward(loss, tape)`` walks the recorded nodes in reverse
and accumulates gradients into every tensor created with ``requires_grad``.
Outside a tape, operations are plain numpy evaluations and nothing is recorded.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(matmul(w, w))
    >>> backward(loss, tape)
    >>> w.grad
    array([[4.]])
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError, TrainingError, UsageError

KL_EPS = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]
    parents: tuple  # tape index of each input's producing node, -1 for leaves


class Tape:
    """Ordered record of differentiable operations.

    Insertion order is a topological order by construction. A tape is
    single-threaded; the active tape is tracked per thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, kind: str, inputs: tuple, out: Tensor, vjp) -> None:
        parents = tuple(self._index.get(id(t), -1) for t in inputs)
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(Node(kind, inputs, out, vjp, parents))

    def index_of(self, t: Tensor) -> Optional[int]:
        return self._index.get(id(t))

    def clear(self) -> None:
        self.nodes.clear()
        self._index.clear()


def _record(kind: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape._push(kind, inputs, result, vjp)
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tracked leaf that ``loss`` depends on.

    Leaf gradients accumulate across repeated calls until reset with
    ``zero_grad``; intermediate gradients are recomputed from scratch.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    end = tape.index_of(loss)
    if end is None:
        raise UsageError("loss was not produced on this tape")
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite loss value {loss.item()}")
    for node in tape.nodes:
        node.output.grad = None
    loss.grad = np.ones_like(loss.data)
    produced = tape._index
    for node in reversed(tape.nodes[: end + 1]):
        g = node.output.grad
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.vjp(g)):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gt, dtype=np.float64)
            else:
                t.grad = t.grad + gt
            if id(t) not in produced and not np.isfinite(t.grad).all():
                label = t.name or repr(t)
                raise TrainingError(f"non-finite gradient for {label}")


# ---------------------------------------------------------------------------
# deterministic randomness


def _mix(seed: int, tag: str) -> int:
    h = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngState:
    """Counter-based random stream (Philox keyed by ``seed``).

    Every draw call uses a fresh counter block, so the values depend only on
    ``(seed, counter)`` and not on anything else that ran in between.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64 or not 0 <= self.counter < 2**64:
            raise ParameterError("seed and counter must be unsigned 64-bit integers")

    def _next(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=self.counter << 128)
        self.counter += 1
        return np.random.Generator(bitgen)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._next().uniform(low, high, size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        return self._next().normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        """Integers drawn uniformly from the closed range [low, high]."""
        return self._next().integers(low, high, size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def derive(self, tag: str) -> "RngState":
        return RngState(_mix(self.seed, tag), 0)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)


# ---------------------------------------------------------------------------
# operations


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None
    A, B = a.data, b.data
    return _record(
        "mul", out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    return _record("relu", np.where(gate, x.data, 0.0), (x,), lambda g: (g * gate,))


def dropout(x: Tensor, rate: float, rng: Optional[RngState], training: bool) -> Tensor:
    """Inverted dropout: survivors are rescaled at train time so eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an RngState")
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def _log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_logits(x: Tensor, op: str) -> None:
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"{op} expects batch x C logits with C >= 2, got {x.shape}")


def softmax(logits: Tensor) -> Tensor:
    _check_logits(logits, "softmax")
    p = np.exp(_log_softmax_array(logits.data))

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax", p, (logits,), vjp)


def log_softmax(logits: Tensor) -> Tensor:
    _check_logits(logits, "log_softmax")
    out = _log_softmax_array(logits.data)
    p = np.exp(out)
    return _record(
        "log_softmax", out, (logits,), lambda g: (g - p * g.sum(axis=1, keepdims=True),)
    )


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    _check_logits(logits, "cross_entropy")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for a batch of {n}")
    bad = np.flatnonzero((y < 0) | (y >= c))
    if bad.size:
        raise DataError(f"label {y[bad[0]]} at index {bad[0]} is outside [0, {c})")
    logp = _log_softmax_array(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (g / n),)

    return _record("cross_entropy", np.array(loss), (logits,), vjp)


def _check_prob_rows(x: np.ndarray, which: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"kl_div expects batch x C arrays, {which} has shape {x.shape}")
    bad = np.flatnonzero((np.abs(x.sum(axis=1) - 1.0) > 1e-6) | (x < 0).any(axis=1))
    if bad.size:
        raise DataError(f"row {bad[0]} of {which} is not a probability vector")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of KL(p_row || q_row), with 0 log 0 = 0 and q clamped at 1e-12."""
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    P, Q = p.data, q.data
    _check_prob_rows(P, "p")
    _check_prob_rows(Q, "q")
    n = P.shape[0]
    qc = np.maximum(Q, KL_EPS)
    pos = P > 0
    logp = np.log(np.where(pos, P, 1.0))
    logq = np.log(qc)
    terms = np.where(pos, P * (logp - logq), 0.0)
    value = terms.sum() / n

    def vjp(g):
        gp = np.where(pos, logp - logq + 1.0, 0.0) * (g / n)
        gq = np.where(Q >= KL_EPS, -P / qc, 0.0) * (g / n)
        return gp, gq

    return _record("kl_div", np.array(value), (p, q), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _record(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def take_columns(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    width = x.shape[1]

    def vjp(g):
        gx = np.zeros((g.shape[0], width))
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _record("take_columns", x.data[:, idx], (x,), vjp)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record(
        "mean", np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data, False)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    probe: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> float:
    """Largest relative disagreement between backward() and central differences.

    ``fn(*inputs)`` must return a scalar and be deterministic across calls.
    ``probe`` optionally gives, per input, a boolean array selecting which
    elements to perturb (e.g. to stay clear of relu kinks).
    The error for one element is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    backward(loss, tape)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        grad = analytic[k].reshape(-1)
        mask = None if probe is None or probe[k] is None else np.asarray(probe[k]).reshape(-1)
        for i in range(flat.size):
            if mask is not None and not mask[i]:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*inputs).item()
            flat[i] = orig - eps
            down = fn(*inputs).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]), abs(numeric))
            worst = max(worst, err)
    return worst
