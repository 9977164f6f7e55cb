"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: every operation computes its value eagerly and,
when any input participates in differentiation, records a backward rule
closing over the inputs. :func:`backward` then walks the implicit graph in
reverse topological order and accumulates gradients into the leaves.

Everything is double precision. Tensors are immutable after creation except
for their gradient buffer; gradients are cleared explicitly with
:func:`zero_grads` and a second backward pass from the same loss is an error.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, GraphError, NumericError, ShapeError

# Floor applied inside log so probabilities that underflow stay finite.
EPS_LOG = 1e-12
# Smallest row norm that still counts as a usable direction.
EPS_NORM = 1e-12


class Tensor:
    """A dense float64 array, optionally tracked by the differentiation graph.

    ``requires_grad`` marks differentiable leaves (parameters). Results of
    operations on tracked tensors are tracked automatically; everything else
    is a constant and never accumulates gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value, cut out of the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # ``own=True`` promises g is freshly allocated and aliased nowhere,
        # letting the first contribution be adopted without a copy.
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    # Light operator sugar; the module-level functions are the actual ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(value) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an op result, attaching the backward rule only when needed."""
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(ax for ax, n in enumerate(shape) if n == 1 and grad.shape[ax] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b._accumulate(gb, own=gb is not g)

    return _result(data, (a, b), backward)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape), own=True)

    return _result(data, (a, b), backward)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), own=True)

    return _result(data, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    """Multiply by a plain python scalar."""
    a = as_tensor(a)
    factor = float(factor)
    data = a.data * factor

    def backward(g):
        a._accumulate(g * factor, own=True)

    return _result(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul needs (m, k) by (k, n) operands, got {a.data.shape} by {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T, own=True)
        if b.requires_grad:
            b._accumulate(a.data.T @ g, own=True)

    return _result(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got shape {a.data.shape}")
    data = a.data.T

    def backward(g):
        a._accumulate(g.T)

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data, own=True)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    """Natural log with the argument floored at ``EPS_LOG``.

    The clamped region is flat, so its gradient is zero there.
    """
    a = as_tensor(a)
    data = np.log(np.maximum(a.data, EPS_LOG))

    def backward(g):
        a._accumulate(np.where(a.data > EPS_LOG, g / a.data, 0.0), own=True)

    return _result(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0), own=True)

    return _result(data, (a,), backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent (positive bases intended)."""
    a = as_tensor(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0), own=True)

    return _result(data, (a,), backward)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy(), own=True)

    return _result(data, (a,), backward)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape) / count, own=True)

    return _result(data, (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(data, tensors, backward)


def rowdot(a, b) -> Tensor:
    """Row-wise dot products of two equally shaped 2-d tensors -> vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(
            f"rowdot needs matching 2-d tensors, got {a.data.shape} and {b.data.shape}"
        )
    data = np.einsum("ij,ij->i", a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, None] * b.data, own=True)
        if b.requires_grad:
            b._accumulate(g[:, None] * a.data, own=True)

    return _result(data, (a, b), backward)


def pairwise_dot(a) -> Tensor:
    """All pairwise row dot products of a 2-d tensor -> square matrix.

    Uses a fixed per-entry accumulation order (einsum) so each entry depends
    only on the two row values, never on their position in the batch.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"pairwise_dot needs a 2-d tensor, got shape {a.data.shape}")
    data = np.einsum("id,jd->ij", a.data, a.data)

    def backward(g):
        a._accumulate(g @ a.data + g.T @ a.data, own=True)

    return _result(data, (a,), backward)


def rowsum_sorted(a) -> Tensor:
    """Sum each row in ascending value order -> vector.

    The canonical order makes the result depend only on each row's multiset
    of values, so reordering columns (or whole rows) cannot perturb it.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"rowsum_sorted needs a 2-d tensor, got shape {a.data.shape}")
    data = np.sort(a.data, axis=1).sum(axis=1)

    def backward(g):
        a._accumulate(np.broadcast_to(g[:, None], a.data.shape).copy(), own=True)

    return _result(data, (a,), backward)


def sum_sorted(a) -> Tensor:
    """Sum a vector in ascending value order -> scalar (order-canonical)."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"sum_sorted needs a 1-d tensor, got shape {a.data.shape}")
    data = np.sort(a.data).sum()

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy(), own=True)

    return _result(data, (a,), backward)


def softmax(logits) -> Tensor:
    """Row-wise softmax of a 2-d tensor, computed with max subtraction."""
    t = as_tensor(logits)
    if t.data.ndim != 2:
        raise ShapeError(f"softmax needs a 2-d tensor, got shape {t.data.shape}")
    if np.isnan(t.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        t._accumulate((g - inner) * data, own=True)

    return _result(data, (t,), backward)


def l2_normalize(a) -> Tensor:
    """Scale each row of a 2-d tensor to unit Euclidean norm."""
    t = as_tensor(a)
    if t.data.ndim != 2:
        raise ShapeError(f"l2_normalize needs a 2-d tensor, got shape {t.data.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", t.data, t.data))
    bad = np.nonzero(norms <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateVectorError(f"rows {bad.tolist()} have near-zero norm")
    inv = 1.0 / norms[:, None]
    data = t.data * inv

    def backward(g):
        along = (g * data).sum(axis=1, keepdims=True)
        t._accumulate((g - data * along) * inv, own=True)

    return _result(data, (t,), backward)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every differentiable leaf reachable from ``loss``.

    ``loss`` must be scalar. Running backward twice from the same loss is a
    graph-contract error; gradients from separate graphs accumulate until
    cleared with :func:`zero_grads`.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise GraphError("backward already ran for this loss; rebuild the graph")
    loss._backward_ran = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    """Clear gradient buffers ahead of a fresh backward pass."""
    for p in params:
        p.grad = None


def finite_difference_gradient(loss_fn, param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. one parameter tensor.

    ``loss_fn`` must re-evaluate the loss from scratch using ``param.data``.
    Intended for gradient checking, not production use.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = float(loss_fn())
        flat[i] = saved - step
        lo = float(loss_fn())
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


__all__ = [
    "EPS_LOG",
    "EPS_NORM",
    "Tensor",
    "as_tensor",
    "add",
    "subtract",
    "multiply",
    "scale",
    "matmul",
    "transpose",
    "exp",
    "log",
    "relu",
    "power",
    "tsum",
    "tmean",
    "concat",
    "rowdot",
    "pairwise_dot",
    "rowsum_sorted",
    "sum_sorted",
    "softmax",
    "l2_normalize",
    "backward",
    "zero_grads",
    "finite_difference_gradient",
]
