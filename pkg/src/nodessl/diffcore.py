"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the active :class:`Tape` (a context manager).
Outside a tape, tensor arithmetic runs as plain numpy with no bookkeeping,
which is what the ODE solvers use for their inner loops.

    >>> w = Tensor([0.3], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tanh(w * 1.0).sum()
    >>> grads = backward(tape, loss)
    >>> round(float(grads[w][0]), 5)
    0.91513
"""

from __future__ import annotations

import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "DenseNet",
    "backward",
    "forward",
    "set_precision",
    "get_dtype",
    "as_tensor",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "l2_normalize",
    "log_softmax",
    "logsumexp",
    "where",
    "custom_op",
]


class ContractError(ValueError):
    """Raised when an operation's precondition is violated (shapes, ranges)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or gradient."""


_DTYPE = np.float64


def set_precision(precision: str) -> None:
    """Switch the storage dtype for newly created tensors ("f64" or "f32")."""
    global _DTYPE
    if precision not in ("f32", "f64"):
        raise ContractError(f"unknown precision {precision!r}")
    _DTYPE = np.float64 if precision == "f64" else np.float32


def get_dtype():
    return _DTYPE


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)
_NODE_IDS = itertools.count()


def _check_finite(value: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {what}")
    return value


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in creation order, so each node's parents precede it.
    One tape belongs to one training step; use it as a context manager.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)


class Tensor:
    """An immutable dense array with an optional place on a tape.

    ``requires_grad`` marks leaves (parameters, or inputs whose gradient is
    wanted). Interior nodes carry their parents and a vector-Jacobian
    product closure.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.id = next(_NODE_IDS)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=_DTYPE))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*xs: Tensor) -> bool:
    return any(x.requires_grad or x.vjp is not None for x in xs)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(value, op)
    out = Tensor(value)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and _tracked(*parents):
        out.parents = parents
        out.vjp = vjp
        out.op = op
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def reciprocal(a: Tensor) -> Tensor:
    value = 1.0 / a.data
    return _make(value, (a,), lambda g: (-g * value * value,), "reciprocal")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        if a.ndim == 1:
            ga = g @ b.data.T
            gb = np.outer(a.data, g)
        else:
            ga = g @ b.data.T
            gb = a.data.T @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return _make(value, (a,), lambda g: (g * (1.0 - value * value),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    value = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(value, (a,), lambda g: (g * value * (1.0 - value),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    return _make(value, (a,), lambda g: (g * value,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), vjp, "sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def take(a: Tensor, index) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index]), (a,), vjp, "take")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, vjp, "concat")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; the mask is data."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
        "where",
    )


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    value = (np.log(total) + m).squeeze(axis)
    soft = shifted / total
    return _make(value, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    soft = np.exp(value)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(value, (a,), vjp, "log_softmax")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale ``a`` to unit Euclidean norm along ``axis``.

    A zero vector has no direction; that is an error rather than a silent
    NaN.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps) or np.any(norm == 0):
        raise ContractError("cannot L2-normalize a zero vector")
    value = a.data / norm

    def vjp(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        return ((g - value * dot) / norm,)

    return _make(value, (a,), vjp, "l2_normalize")


def custom_op(
    value: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Record an externally computed value with a hand-supplied VJP.

    Used by the ODE layer, whose backward pass is an adjoint solve.
    """
    return _make(np.asarray(value, dtype=_DTYPE), tuple(parents), vjp, op)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns a mapping from tensor to gradient array for every leaf with
    ``requires_grad`` reached from the loss; any tensor in ``params`` that
    was not reached maps to zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.vjp is None and loss.requires_grad:
        leaves[loss.id] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not (parent.requires_grad or parent.vjp is not None):
                continue
            _check_finite(pg, f"backward of {node.op}")
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            if parent.vjp is None:
                leaves[parent.id] = parent
    out = {leaf: grads[leaf.id] for leaf in leaves.values() if leaf.id in grads}
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.data)
    return out


# dense networks

ACTIVATIONS = ("tanh", "identity")


class DenseNet:
    """Stack of affine layers, each followed by tanh or identity."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor], activations: list[str]):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise ContractError("DenseNet needs matching non-empty layer lists")
        for i, (w, b, act) in enumerate(zip(weights, biases, activations)):
            if act not in ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
            if b.shape != (w.shape[1],):
                raise ContractError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ContractError(f"layer {i}: dims do not chain")
        self.weights = weights
        self.biases = biases
        self.activations = activations

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        final_activation: str = "identity",
    ) -> "DenseNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        weights, biases, acts = [], [], []
        n = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            biases.append(Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))
            acts.append(final_activation if i == n - 1 else activation)
        return cls(weights, biases, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x):
        return forward(self, x)

    def apply_numpy(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on raw arrays with no recording."""
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ w.data + b.data
            if act == "tanh":
                x = np.tanh(x)
        return x


def forward(net: DenseNet, x, tape: Tape | None = None) -> Tensor:
    """Run ``net`` on ``x``; ops land on ``tape`` (or the active one)."""
    x = as_tensor(x)
    if x.shape[-1] != net.in_dim:
        raise ContractError(f"input width {x.shape[-1]} != net.in_dim {net.in_dim}")
    if tape is not None and _ACTIVE_TAPE.get() is not tape:
        with tape:
            return forward(net, x)
    for w, b, act in zip(net.weights, net.biases, net.activations):
        x = matmul(x, w) + b
        if act == "tanh":
            x = tanh(x)
    return x
