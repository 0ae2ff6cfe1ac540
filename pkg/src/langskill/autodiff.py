"""
Reverse-mode automatic differentiation over dense float64 arrays.

A graph is rebuilt on every forward pass. Each differentiable primitive returns a new
:class:`Tensor` that remembers its parents and a closure mapping the output gradient to
one gradient per parent. :func:`backward` walks the graph once in reverse topological
order.
"""

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from langskill.errors import GatherIndexError, GraphError, NonFiniteError, ShapeError

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

GELU_COEFF = float(np.sqrt(2.0 / np.pi))
LAYER_NORM_EPS = 1e-5

_node_ids = itertools.count()
_grad_state = threading.local()

logger = logging.getLogger(__name__)


def is_grad_enabled() -> bool:
    """
    Whether operations on this thread record a graph.

    :return: True unless inside :class:`no_grad`
    :rtype: bool
    """
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager disabling graph construction on the current thread."""

    def __enter__(self) -> "no_grad":
        self._previous = is_grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        _grad_state.enabled = self._previous


class Tensor:
    """Dense float64 array taking part in reverse-mode differentiation."""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None) -> None:
        """
        Initialize the Tensor object.

        :param values: Array-like data, copied to float64
        :type values: array-like
        :param requires_grad: Whether gradients are accumulated into ``grad``
        :type requires_grad: bool, optional
        :param name: Optional stable name (parameters use it in checkpoints)
        :type name: str, optional
        """
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[BackwardFn] = None
        self._consumed = False

    @classmethod
    def _from_op(
        cls, values: np.ndarray, op: str, parents: Sequence["Tensor"], backward_fn: Optional[BackwardFn]
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.grad = None
        out.name = None
        out.node_id = next(_node_ids)
        out.op = op
        out._consumed = False
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward_fn = backward_fn if track else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item", self.shape, detail="only a single-element tensor converts to a float")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return subtract(_as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other: Number) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return slice_(self, key)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class OpRecord:
    """One node of a recorded graph."""

    op: str
    input_ids: Tuple[int, ...]
    output_id: int


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        """
        Collect the graph feeding ``output``.

        :param output: Final tensor of a forward pass
        :type output: Tensor
        :return: Graph with nodes ordered so every input precedes its consumers
        :rtype: Graph
        """
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.node_id not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    @property
    def records(self) -> List[OpRecord]:
        return [OpRecord(n.op, tuple(p.node_id for p in n.parents), n.node_id) for n in self.nodes]


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every tensor that feeds ``loss`` and requires gradients.

    :param loss: Scalar output of graph operations
    :type loss: Tensor
    :raises GraphError: If ``loss`` is not scalar or its graph was already consumed
    """
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; call reset() or rebuild the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    pending = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(graph.nodes):
        grad = pending.pop(node.node_id, None)
        if grad is None:
            continue
        node.grad = grad if node.grad is None else node.grad + grad
        if node._backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + parent_grad
            else:
                pending[parent.node_id] = parent_grad


def reset(loss: Tensor) -> None:
    """Allow ``backward`` to run again on ``loss``; gradients keep accumulating."""
    loss._consumed = False


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; ``b`` may be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    out = np.matmul(a.values, b.values)

    def _backward(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2)) if a.requires_grad else None
        grad_b = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                grad_b = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return grad_a, grad_b

    return Tensor._from_op(out, "matmul", (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.values + b.values, "add", (a, b), _backward)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("subtract", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.values - b.values, "subtract", (a, b), _backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("multiply", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor._from_op(a.values * b.values, "multiply", (a, b), _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def _backward(g: np.ndarray):
        return (g * factor,)

    return Tensor._from_op(a.values * factor, "scale", (a,), _backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape, detail="needs at least two dimensions")

    def _backward(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._from_op(np.swapaxes(a.values, -1, -2), "transpose", (a,), _backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def _backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, "reshape", (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; every other axis must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", (), detail="nothing to concatenate")
    first = tensors[0]
    ndim = first.ndim
    axis = axis % ndim if ndim else 0
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != first.shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", first.shape, t.shape, detail=f"axis {axis}")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, "concat", tensors, _backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing with a scatter-add backward rule."""
    out = a.values[key]

    def _backward(g: np.ndarray):
        full = np.zeros_like(a.values)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), "slice", (a,), _backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """
    Gather rows of ``weight`` by integer id.

    :param weight: Table of shape (rows, dim)
    :type weight: Tensor
    :param ids: Integer ids of any shape
    :type ids: array-like
    :return: Tensor of shape ids.shape + (dim,)
    :rtype: Tensor
    :raises GatherIndexError: If an id falls outside [0, rows)
    """
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise GatherIndexError(f"embedding: id {bad} outside table of {weight.shape[0]} rows")

    def _backward(g: np.ndarray):
        full = np.zeros_like(weight.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor._from_op(weight.values[ids], "embedding", (weight,), _backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries receive probability zero."""
    shifted = a.values - np.max(a.values, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(probs, "softmax", (a,), _backward)


def log(a: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (g / a.values,)

    with np.errstate(divide="ignore"):
        out = np.log(a.values)
    return Tensor._from_op(out, "log", (a,), _backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def _backward(g: np.ndarray):
        return (g * out,)

    return Tensor._from_op(out, "exp", (a,), _backward)


def square(a: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (2.0 * a.values * g,)

    return Tensor._from_op(a.values * a.values, "square", (a,), _backward)


def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, "sum", (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.values.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the learnable gain and bias."""
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.values + bias.values

    def _backward(g: np.ndarray):
        d_hat = g * gain.values
        grad_x = (
            inv_std
            / dim
            * (dim * d_hat - d_hat.sum(axis=-1, keepdims=True) - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True))
        )
        reduce_axes = tuple(range(g.ndim - 1))
        return grad_x, (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return Tensor._from_op(out, "layer_norm", (x, gain, bias), _backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.values
    inner = GELU_COEFF * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g: np.ndarray):
        d_inner = GELU_COEFF * (1.0 + 3.0 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out, "gelu", (a,), _backward)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate zero."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit random generator")
    keep = (rng.random(a.shape) >= rate).astype(np.float64) / (1.0 - rate)

    def _backward(g: np.ndarray):
        return (g * keep,)

    return Tensor._from_op(a.values * keep, "dropout", (a,), _backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no gradient flows to them)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full_mask = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None

    def _backward(g: np.ndarray):
        return (np.where(full_mask, 0.0, g),)

    return Tensor._from_op(np.where(full_mask, value, a.values), "masked_fill", (a,), _backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """
    Mean negative log-likelihood of integer ``targets`` under row-wise softmax of ``logits``.

    :param logits: Tensor of shape (N, C)
    :type logits: Tensor
    :param targets: Integer class ids of shape (N,)
    :type targets: array-like
    :return: Scalar tensor
    :rtype: Tensor
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise GatherIndexError(f"cross_entropy: target outside {logits.shape[1]} classes")
    n = logits.shape[0]
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = -log_probs[rows, targets].mean()

    def _backward(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return Tensor._from_op(np.array(loss), "cross_entropy", (logits,), _backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.values - b.values
    n = diff.size

    def _backward(g: np.ndarray):
        grad = 2.0 * diff * (g / n)
        return grad, -grad

    return Tensor._from_op(np.array((diff * diff).mean()), "mse", (a, b), _backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity, backward zero."""
    return Tensor._from_op(a.values.copy(), "stop_gradient", (), None)


def straight_through(z_tilde: Tensor, z: np.ndarray) -> Tensor:
    """
    Forward value ``z`` exactly, gradient copied unchanged to ``z_tilde``.

    Numerically exact form of ``z_tilde + stop_gradient(z - z_tilde)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != z_tilde.shape:
        raise ShapeError("straight_through", z_tilde.shape, z.shape)

    def _backward(g: np.ndarray):
        return (g,)

    return Tensor._from_op(z.copy(), "straight_through", (z_tilde,), _backward)


# ---------------------------------------------------------------------------
# finite differences


def op_catalog() -> frozenset:
    """Names of the differentiable primitives provided by this module."""
    return frozenset(
        {
            "matmul",
            "add",
            "multiply",
            "scale",
            "subtract",
            "transpose",
            "reshape",
            "concat",
            "slice",
            "embedding",
            "softmax",
            "log",
            "exp",
            "square",
            "sum",
            "mean",
            "layer_norm",
            "gelu",
            "dropout",
            "masked_fill",
            "cross_entropy",
            "mse",
            "stop_gradient",
            "straight_through",
        }
    )


def gradient(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    """
    Analytic gradient of scalar ``f`` at ``point``; zeros when no path reaches the input.

    :param f: Function from Tensor to scalar Tensor
    :type f: Callable
    :param point: Evaluation point
    :type point: np.ndarray
    :return: Gradient with the shape of ``point``
    :rtype: np.ndarray
    """
    x = Tensor(point, requires_grad=True)
    backward(f(x))
    return np.zeros_like(x.values) if x.grad is None else x.grad


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-4) -> float:
    """
    Compare analytic and central-difference gradients of scalar ``f``.

    :param f: Function from Tensor to scalar Tensor
    :type f: Callable
    :param point: Evaluation point
    :type point: np.ndarray
    :param step: Finite-difference step, defaults to 1e-4
    :type step: float, optional
    :return: max |analytic - numeric| / (|analytic| + |numeric| + 1e-8) over coordinates
    :rtype: float
    :raises ValueError: If step is not positive
    :raises NonFiniteError: If a non-finite value is met, naming the coordinate
    """
    if step <= 0:
        raise ValueError(f"step must be positive but {step} given")
    point = np.array(point, dtype=np.float64)
    analytic = gradient(f, point)
    worst = 0.0
    for index in np.ndindex(point.shape):
        plus = point.copy()
        minus = point.copy()
        plus[index] += step
        minus[index] -= step
        with no_grad():
            f_plus = f(Tensor(plus)).item()
            f_minus = f(Tensor(minus)).item()
        numeric = (f_plus - f_minus) / (2.0 * step)
        if not (np.isfinite(numeric) and np.isfinite(analytic[index])):
            raise NonFiniteError("non-finite gradient", where=f"coordinate {index}")
        error = abs(analytic[index] - numeric) / (abs(analytic[index]) + abs(numeric) + 1e-8)
        worst = max(worst, float(error))
    logger.debug(f"grad check over {point.size} coordinates, max relative error = {worst:.3e}")
    return worst
