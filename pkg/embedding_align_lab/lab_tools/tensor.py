"""Dense tensors with a reverse-mode tape.

Storage and kernels are numpy; every differentiable operation is a ``Function``
subclass whose ``apply`` records the parents on the output tensor. A ``Graph``
is the topologically ordered record behind one scalar loss; one reverse sweep
over it populates ``grad`` on every leaf that requires it.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError, DegenerateEmbeddingError, DimensionError

logger = logging.getLogger(__name__)

_precision = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


def get_default_dtype():
    return getattr(_precision, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are stored in (per thread)."""
    previous = get_default_dtype()
    _precision.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _precision.dtype = previous


class Function:
    """One recorded operation: forward on arrays, backward to parent gradients."""

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs) -> "Tensor":
        func = cls(*parents)
        out = func.forward(*(p.data for p in parents), **kwargs)
        requires_grad = any(p.requires_grad for p in parents)
        result = Tensor(out, requires_grad=requires_grad, dtype=parents[0].data.dtype)
        if requires_grad:
            result._ctx = func
        return result


class Tensor:
    """Dense array of reals, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other) if isinstance(other, Tensor) else scale(self, other)
    __rmul__ = __mul__


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


class Graph:
    """Operations behind ``root`` in topological order (parents before children)."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def backward(self) -> "Graph":
        if self.root.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.root.shape}")
        if not self.root.requires_grad:
            return self
        pending = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node._ctx.backward(grad)
            for parent, parent_grad in zip(node._ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        return self


def backward(loss: Tensor) -> Graph:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    return Graph(loss).backward()


# ---------------------------------------------------------------------------
# elementwise and bias arithmetic
# ---------------------------------------------------------------------------

def _check_bias_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    # b matches a, or matches a trailing block of a (row bias, per-position table)
    if a.shape == b.shape or (1 <= b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape):
        return
    raise DimensionError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0)


class Add(Function):
    def forward(self, a, b):
        _check_bias_shape("add", a, b)
        self.b_shape = b.shape
        return a + b

    def backward(self, grad):
        return grad, _reduce_to(grad, self.b_shape)


class Sub(Function):
    def forward(self, a, b):
        _check_bias_shape("sub", a, b)
        self.b_shape = b.shape
        return a - b

    def backward(self, grad):
        return grad, -_reduce_to(grad, self.b_shape)


class Mul(Function):
    def forward(self, a, b):
        _check_bias_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, _reduce_to(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class AddConstant(Function):
    def forward(self, a, constant):
        if np.broadcast_shapes(a.shape, np.shape(constant)) != a.shape:
            raise DimensionError("add_const", a.shape, np.shape(constant))
        return (a + constant).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad,)


class MulConstant(Function):
    def forward(self, a, constant):
        if np.broadcast_shapes(a.shape, np.shape(constant)) != a.shape:
            raise DimensionError("mul_const", a.shape, np.shape(constant))
        self.constant = np.asarray(constant, dtype=a.dtype)
        return a * self.constant

    def backward(self, grad):
        return (grad * self.constant,)


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b where b has a's shape or is a row vector over a's last axis."""
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def add_const(a: Tensor, constant) -> Tensor:
    """Add a non-differentiable constant (mask bias, shift)."""
    return AddConstant.apply(a, constant=constant)


def mul_const(a: Tensor, constant) -> Tensor:
    """Multiply by a non-differentiable constant broadcastable to ``a``."""
    return MulConstant.apply(a, constant=constant)


# ---------------------------------------------------------------------------
# linear algebra and movement
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul", a.shape, b.shape)
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise DimensionError("matmul", a.shape, b.shape)
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return grad_a, grad_b


class Transpose(Function):
    def forward(self, a):
        return np.swapaxes(a, -1, -2)

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError("reshape", a.shape, shape) from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class TakeRows(Function):
    def forward(self, table, ids):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.rows = table.shape[0]
        return table[self.ids]

    def backward(self, grad):
        out = np.zeros((self.rows, grad.shape[-1]), dtype=grad.dtype)
        np.add.at(out, self.ids.reshape(-1), grad.reshape(-1, grad.shape[-1]))
        return (out,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; b is shared (2-D) or batched like a."""
    return MatMul.apply(a, b)


def transpose(a: Tensor) -> Tensor:
    return Transpose.apply(a)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def permute(a: Tensor, axes) -> Tensor:
    return Permute.apply(a, axes=axes)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; the gradient scatters back into the table."""
    return TakeRows.apply(table, ids=ids)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=a.dtype)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).astype(grad.dtype, copy=True),)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------

class SoftmaxRows(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LogSoftmaxRows(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=-1, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
        mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.x_hat = ((x - mu) * self.inv_std).astype(x.dtype)
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad):
        x_hat, inv_std = self.x_hat, self.inv_std
        g_hat = grad * self.gamma
        grad_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        grad_gamma = (grad * x_hat).reshape(-1, grad.shape[-1]).sum(axis=0)
        grad_beta = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return grad_x, grad_gamma, grad_beta


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class L2Normalize(Function):
    def forward(self, x, tiny):
        norm = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
        if np.any(norm <= tiny):
            raise DegenerateEmbeddingError("cannot normalize a zero vector")
        self.norm = norm.astype(x.dtype)
        self.y = (x / norm).astype(x.dtype)
        return self.y

    def backward(self, grad):
        y = self.y
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / self.norm,)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    return SoftmaxRows.apply(x)


def log_softmax_rows(x: Tensor) -> Tensor:
    return LogSoftmaxRows.apply(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    return ReLU.apply(x)


def l2_normalize(x: Tensor, tiny: float = 0.0) -> Tensor:
    """x / ||x|| along the last axis."""
    return L2Normalize.apply(x, tiny=tiny)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_gradient(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-3,
                         indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h.

    Returns the full gradient in x's shape, or only the entries at the given
    flat ``indices`` (as a 1-D array) when they are supplied.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    base = np.array(x.data, copy=True)
    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    values = []
    for i in coords:
        original = flat[i]
        flat[i] = original + h
        plus = float(_scalar(f(Tensor(base, dtype=base.dtype))))
        flat[i] = original - h
        minus = float(_scalar(f(Tensor(base, dtype=base.dtype))))
        flat[i] = original
        values.append((plus - minus) / (2.0 * h))
    out = np.asarray(values, dtype=np.float64)
    return out.reshape(base.shape) if indices is None else out


def _scalar(value):
    return value.item() if isinstance(value, Tensor) else value


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
