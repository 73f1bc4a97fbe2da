"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every primitive records its parents and a
backward closure on the output tensor; ``backward`` traces the recorded graph
into topological order and runs the closures in reverse.

Only the primitives the adapter-expert / attention-gate model needs are
provided. Broadcasting is numpy broadcasting, reduced back to the operand
shape on the way down.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled = True


class PillError(Exception):
    """Base class for every error raised by the pill package."""


class DimensionError(PillError, ValueError):
    """Operand shapes do not fit the primitive."""


class NumericError(PillError, ArithmeticError):
    """A primitive produced or received non-finite values."""


class EmptyLossError(PillError, ValueError):
    """The loss mask selects no position."""


class GradientStateError(PillError, RuntimeError):
    """Backward would reuse a consumed graph or add into gradients that were never reset."""


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """
    A float64 array that can take part in a differentiation graph.

    Args:
        data: Values; copied into a float64 array.
        requires_grad: Whether ``backward`` should populate ``grad``.
        name: Optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "Tensor")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = ""
        out._parents = ()
        out._backward = None
        out._op = op
        out._consumed = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item: tensor of shape {list(self.shape)} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Graph":
        return backward(self)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={list(self.shape)}, requires_grad={self.requires_grad})"


@dataclass
class Graph:
    """Executed primitives reachable from a root, parents before children."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


@contextmanager
def no_grad():
    """Run primitives without recording a graph (evaluation, probing)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(data, op)
    out = Tensor._from_op(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------- #
# Linear algebra and elementwise arithmetic
# --------------------------------------------------------------------------- #
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has exactly the same leading axes as ``a``.

    Args:
        a: Tensor of shape [..., m, k].
        b: Tensor of shape [k, n] or [..., k, n].

    Returns:
        Tensor of shape [..., m, n].

    Raises:
        DimensionError: If the inner dimensions or batch axes disagree.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ: {list(a.shape)} vs {list(b.shape)}")

    out_data = np.matmul(a.data, b.data)

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, np.matmul(grad, _swap_last(b.data)))
        if b.requires_grad:
            if shared:
                k, n = b.shape
                _accumulate(b, a.data.reshape(-1, k).T @ grad.reshape(-1, n))
            else:
                _accumulate(b, np.matmul(_swap_last(a.data), grad))

    return _result(out_data, (a, b), "matmul", backward_fn)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: cannot broadcast {list(a.shape)} with {list(b.shape)}") from e

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _result(out_data, (a, b), "add", backward_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: cannot broadcast {list(a.shape)} with {list(b.shape)}") from e

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, -_unbroadcast(grad, b.shape))

    return _result(out_data, (a, b), "sub", backward_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: cannot broadcast {list(a.shape)} with {list(b.shape)}") from e

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _result(out_data, (a, b), "mul", backward_fn)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(grad, x.shape))

    return _result(np.array(x.data.sum()), (x,), "sum_all", backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {list(x.shape)} as {list(shape)}") from e

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad.reshape(x.shape))

    return _result(out_data, (x,), "reshape", backward_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, np.transpose(grad, inverse))

    return _result(np.transpose(x.data, axes), (x,), "transpose", backward_fn)


# --------------------------------------------------------------------------- #
# Activations and normalisation
# --------------------------------------------------------------------------- #
def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-log(1 + exp(-x))) stays finite for any finite x
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad * (s + x.data * s * (1.0 - s)))

    return _result(x.data * s, (x,), "silu", backward_fn)


def tanh_act(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, grad * (1.0 - y * y))

    return _result(y, (x,), "tanh", backward_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(inner)

    def backward_fn(grad: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        _accumulate(x, grad * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner))

    return _result(0.5 * x.data * (1.0 + t), (x,), "gelu", backward_fn)


def softmax_lastdim(x: Tensor, where: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis, stabilised by max-subtraction.

    Args:
        x: Scores of shape [..., n].
        where: Optional boolean array broadcastable to ``x``; False entries
            receive probability exactly 0 (used for causal masking). Every
            slice must keep at least one True entry.

    Returns:
        Probabilities with the shape of ``x``.

    Raises:
        DimensionError: If the last axis is empty.
        NumericError: If ``x`` holds non-finite values.
    """
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: last axis must be non-empty, got {list(x.shape)}")
    _check_finite(x.data, "softmax_lastdim input")
    z = x.data if where is None else np.where(where, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(x, p * (grad - (grad * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), "softmax_lastdim", backward_fn)


def rmsnorm(x: Tensor, weight: Tensor) -> Tensor:
    """
    Scale ``x`` by 1/sqrt(mean(x^2) + eps) over the last axis, then by ``weight``.

    Args:
        x: Tensor of shape [..., d].
        weight: Tensor of shape [d].

    Returns:
        Tensor of the same shape as ``x``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1:] != weight.shape:
        raise DimensionError(f"rmsnorm: weight {list(weight.shape)} does not match {list(x.shape)}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + RMS_EPS)
    normed = x.data * r

    def backward_fn(grad: np.ndarray) -> None:
        if weight.requires_grad:
            _accumulate(weight, (grad * normed).reshape(-1, weight.shape[0]).sum(axis=0))
        if x.requires_grad:
            g_n = grad * weight.data
            _accumulate(x, r * (g_n - normed * np.mean(g_n * normed, axis=-1, keepdims=True)))

    return _result(normed * weight.data, (x, weight), "rmsnorm", backward_fn)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """
    Rotary position embedding on the last axis (rotate-half layout).

    Args:
        x: Tensor of shape [..., T, d] with even d.
        cos: Array of shape [T, d/2].
        sin: Array of shape [T, d/2].
    """
    x = as_tensor(x)
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], half):
        raise DimensionError(f"rope: tables {list(cos.shape)} do not fit {list(x.shape)}")
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out_data = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def backward_fn(grad: np.ndarray) -> None:
        g1, g2 = grad[..., :half], grad[..., half:]
        _accumulate(x, np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1))

    return _result(out_data, (x,), "rope", backward_fn)


# --------------------------------------------------------------------------- #
# Row routing
# --------------------------------------------------------------------------- #
def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` [V, d] indexed by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: ids outside [0, {table.shape[0]})")

    def backward_fn(grad: np.ndarray) -> None:
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        _accumulate(table, g)

    return _result(table.data[ids], (table,), "take_rows", backward_fn)


def route_rows(mask: np.ndarray, when_true: Tensor, when_false: Tensor) -> Tensor:
    """
    Pick rows from ``when_true`` where ``mask`` holds and from ``when_false`` elsewhere.

    Args:
        mask: Boolean array of shape [...] (one entry per row).
        when_true: Tensor of shape [..., d].
        when_false: Tensor of shape [..., d].
    """
    when_true, when_false = as_tensor(when_true), as_tensor(when_false)
    if when_true.shape != when_false.shape or mask.shape != when_true.shape[:-1]:
        raise DimensionError(
            f"route_rows: mask {list(mask.shape)} with {list(when_true.shape)} / {list(when_false.shape)}"
        )
    rows = mask[..., None]

    def backward_fn(grad: np.ndarray) -> None:
        _accumulate(when_true, np.where(rows, grad, 0.0))
        _accumulate(when_false, np.where(rows, 0.0, grad))

    return _result(np.where(rows, when_true.data, when_false.data), (when_true, when_false), "route_rows", backward_fn)


def masked_mean_rows(x: Tensor, mask: np.ndarray, causal: bool = False) -> Tensor:
    """
    Mean of the rows of ``x`` [B, T, d] selected by ``mask`` [B, T].

    With ``causal`` the result has the shape of ``x``: row i is the mean of
    the selected rows at positions <= i. Means over no selected row are zero.
    """
    x = as_tensor(x)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean_rows: mask {list(mask.shape)} does not fit {list(x.shape)}")
    weights = mask.astype(np.float64)
    if causal:
        length = mask.shape[-1]
        weights = np.tril(np.ones((length, length))) * weights[..., None, :]
    counts = np.maximum(weights.sum(axis=-1, keepdims=True), 1.0)
    weights = weights / counts

    def backward_fn(grad: np.ndarray) -> None:
        if causal:
            _accumulate(x, np.matmul(_swap_last(weights), grad))
        else:
            _accumulate(x, grad[..., None, :] * weights[..., None])

    out = np.matmul(weights, x.data) if causal else np.einsum("...t,...td->...d", weights, x.data)
    return _result(out, (x,), "masked_mean_rows", backward_fn)


# --------------------------------------------------------------------------- #
# Loss and backward
# --------------------------------------------------------------------------- #
def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood over the positions selected by ``mask``.

    Args:
        logits: Tensor of shape [..., V].
        targets: Integer array of shape [...], values in [0, V).
        mask: Boolean array of shape [...].

    Returns:
        Scalar tensor.

    Raises:
        EmptyLossError: If ``mask`` selects nothing.
        DimensionError: If shapes disagree or a selected target is out of range.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(
            f"cross_entropy: logits {list(logits.shape)}, targets {list(targets.shape)}, mask {list(mask.shape)}"
        )
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: mask selects no position")
    picked_targets = targets[mask]
    if picked_targets.min() < 0 or picked_targets.max() >= vocab:
        raise DimensionError(f"cross_entropy: targets outside [0, {vocab})")

    picked = logits.data[mask]
    shifted = picked - picked.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(count)
    nll = log_z - shifted[rows, picked_targets]

    def backward_fn(grad: np.ndarray) -> None:
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, picked_targets] -= 1.0
        g = np.zeros_like(logits.data)
        g[mask] = probs * (float(grad) / count)
        _accumulate(logits, g)

    return _result(np.array(nll.sum() / count), (logits,), "cross_entropy", backward_fn)


def backward(loss: Tensor) -> Graph:
    """
    Populate ``grad`` on every tensor reachable from ``loss`` that requires it.

    Leaves that require grad must hold no gradient from an earlier call;
    reset them with ``zero_grad`` first. Intermediate gradients are cleared
    before the sweep.

    Args:
        loss: Scalar tensor at the end of a recorded graph.

    Returns:
        The traced graph, in topological order.

    Raises:
        DimensionError: If ``loss`` is not a scalar.
        GradientStateError: If ``loss`` carries no graph, its graph was already consumed,
            or a leaf still holds a gradient from an earlier backward.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got {list(loss.shape)}")
    if loss._consumed:
        raise GradientStateError("backward: this graph was already back-propagated; rebuild it after zero_grad")
    if not loss.requires_grad:
        raise GradientStateError("backward: loss is not connected to any tensor that requires grad")

    graph = Graph.trace(loss)
    stale = [node for node in graph if node.is_leaf and node.requires_grad and node.grad is not None]
    if stale:
        names = ", ".join(node.name or repr(node) for node in stale[:3])
        raise GradientStateError(
            f"backward: {len(stale)} leaf gradient(s) not reset since the last backward ({names}); call zero_grad"
        )
    for node in graph:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._consumed = True
    return graph


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------- #
# Finite-difference verification
# --------------------------------------------------------------------------- #
def numerical_gradient(f: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central finite differences of the scalar ``f()`` with respect to ``tensor``.

    ``tensor.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = f().item()
            flat[i] = original - h
            minus = f().item()
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(f: Callable[[], Tensor], tensors: Sequence[Tuple[str, Tensor]],
                   h: float = 1e-5) -> dict:
    """
    Compare analytic gradients of ``f()`` against central finite differences.

    Args:
        f: Builds the scalar loss from the current tensor values.
        tensors: (name, tensor) pairs to check; each must require grad.
        h: Finite-difference step.

    Returns:
        Dict mapping each name to its max relative error.
    """
    zero_grad(t for _, t in tensors)
    backward(f())
    errors = {}
    for name, t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[name] = relative_error(analytic, numerical_gradient(f, t, h))
    zero_grad(t for _, t in tensors)
    return errors
