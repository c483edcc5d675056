"""Dense float64 tensor with reverse-mode automatic differentiation.

Every differentiable quantity in mvssl (embeddings, correlation matrices,
losses, parameters) is a ``Tensor``. Operations are recorded on the active
``Tape`` when at least one input requires a gradient; outside a ``with Tape():``
block nothing is recorded, which is how evaluation and the finite-difference
oracle run gradient-free.

    with Tape():
        loss = (w * w).sum()
        grads = backward(loss)

The tape is append-only, so its order is already topological; ``backward``
walks it in reverse and accumulates parent gradients in that fixed order.
"""
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvssl.errors import (
    BatchTooSmallError,
    DimensionError,
    EmptyInputError,
    NumericError,
    RankError,
    TapeError,
)
from utils.logger import setup_logger

logger = setup_logger(__name__)

ArrayLike = Union[float, int, Sequence, np.ndarray]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

STANDARDIZE_EPS = 1e-5
COSINE_EPS = 1e-8

_local = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape opened in this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording inside an open tape (used for off-graph diagnostics)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@dataclass
class _Node:
    op: str
    parents: Tuple["Tensor", ...]
    backward: BackwardFn
    shape: Tuple[int, ...]


class Tape:
    """Ordered record of primitive operations for one forward pass.

    A tape belongs to the thread that opened it and supports exactly one
    ``backward``; a second call needs a fresh forward on a new tape.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._owner = threading.get_ident()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, op: str, parents: Tuple["Tensor", ...], backward_fn: BackwardFn,
               shape: Tuple[int, ...]) -> int:
        if threading.get_ident() != self._owner:
            raise TapeError("a tape may only be extended by the thread that opened it")
        if self.consumed:
            raise TapeError("tape already consumed by backward(); open a new Tape")
        self._nodes.append(_Node(op, parents, backward_fn, shape))
        return len(self._nodes) - 1

    def ops(self) -> List[str]:
        """Primitive op names in recording order."""
        return [node.op for node in self._nodes]


class Tensor:
    """Dense row-major float64 array that can take part in a gradient tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.node_id = None
        out._tape = None
        return out

    @classmethod
    def parameter(cls, data: ArrayLike, name: str) -> "Tensor":
        """Create a named trainable leaf."""
        return cls(data, requires_grad=True, name=name)

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _result(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _result(
            a / b, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, power: float) -> "Tensor":
        a = self.data
        return _result(a ** power, (self,), lambda g: (g * power * a ** (power - 1),), "pow")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def _backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return _result(self.data[index], (self,), _backward, "getitem")

    # ------------------------------------------------------------------
    # reductions and elementwise functions
    # ------------------------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), _backward, "sum")

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return _result(np.log(a), (self,), lambda g: (g / a,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def reshape(self, *shape: int) -> "Tensor":
        original = self.shape
        return _result(self.data.reshape(*shape), (self,), lambda g: (g.reshape(original),), "reshape")

    @property
    def T(self) -> "Tensor":
        return _result(self.data.T, (self,), lambda g: (g.T,), "transpose")


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    """Wrap plain numbers and arrays as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = tape.record(op, parents, backward_fn, out.shape)
        out._tape = tape
    return out


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D, 1-D @ 2-D and 2-D @ 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise DimensionError("matmul needs matrix operands", a.shape, b.shape)
    inner_b = b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    x, y = a.data, b.data

    def _backward(g):
        if x.ndim == 2 and y.ndim == 2:
            return g @ y.T, x.T @ g
        if x.ndim == 1:
            return y @ g, np.outer(x, g)
        return np.outer(g, y), x.T @ g

    return _result(x @ y, (a, b), _backward, "matmul")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise EmptyInputError("stack needs at least one tensor")
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError("stack needs equal shapes", *sorted(shapes))

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, _backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise EmptyInputError("concat needs at least one tensor")
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def diagonal(m: Tensor) -> Tensor:
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("diagonal needs a square matrix", m.shape)
    size = m.shape[0]

    def _backward(g):
        full = np.zeros((size, size))
        np.fill_diagonal(full, g)
        return (full,)

    return _result(np.diagonal(m.data).copy(), (m,), _backward, "diagonal")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def _backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), _backward, "take_rows")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    x = as_tensor(x)
    active = x.data > floor
    return _result(np.maximum(x.data, floor), (x,), lambda g: (g * active,), "clamp_min")


def norm(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at an exactly-zero vector is taken as 0."""
    x = as_tensor(x)
    a = x.data
    kept = np.sqrt((a * a).sum(axis=axis, keepdims=True))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(kept > 0.0, kept, 1.0)
        return (np.where(kept > 0.0, g * a / safe, 0.0),)

    if keepdims:
        out = kept
    elif axis is None:
        out = kept.reshape(())
    else:
        out = np.squeeze(kept, axis=axis)
    return _result(out, (x,), _backward, "norm")


def _check_finite(x: Tensor, what: str) -> None:
    if np.isnan(x.data).any():
        raise NumericError(f"{what} received NaN input")
    if not np.isfinite(x.data).all():
        raise NumericError(f"{what} received non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; outputs lie on the probability simplex."""
    x = as_tensor(x)
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), _backward, "log_softmax")


def column_standardize(z: Tensor, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Standardize each column of a B×d batch to mean 0 and population sd 1.

    Columns whose sd does not exceed ``eps`` are mapped to exact zeros and pass
    no gradient.
    """
    z = as_tensor(z)
    if z.ndim != 2:
        raise DimensionError("column_standardize needs a B×d matrix", z.shape)
    batch = z.shape[0]
    if batch < 2:
        raise BatchTooSmallError(f"column_standardize needs B >= 2, got B={batch}")
    centered = z.data - z.data.mean(axis=0, keepdims=True)
    sd = np.sqrt((centered * centered).mean(axis=0, keepdims=True))
    active = sd > eps
    denom = np.where(active, sd, 1.0)
    out = np.where(active, centered / denom, 0.0)

    def _backward(g):
        g_centered = g - g.mean(axis=0, keepdims=True)
        proj = (g * out).mean(axis=0, keepdims=True)
        return (np.where(active, (g_centered - out * proj) / denom, 0.0),)

    return _result(out, (z,), _backward, "column_standardize")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    """Scale to unit norm along ``axis``; norms below ``eps`` are clamped to it."""
    x = as_tensor(x)
    return x / clamp_min(norm(x, axis=axis, keepdims=True), eps)


def cosine_sim(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of two vectors; a zero vector yields 0 with a warning."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError("cosine_sim needs two vectors of equal length", a.shape, b.shape)
    na, nb = norm(a), norm(b)
    if na.item() < eps or nb.item() < eps:
        logger.warning("cosine_sim: degenerate (zero-norm) input, similarity reported as 0")
    return (a * b).sum() / (clamp_min(na, eps) * clamp_min(nb, eps))


def cosine_matrix(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` (n×d) and ``b`` (m×d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError("cosine_matrix needs row matrices of equal width", a.shape, b.shape)
    return matmul(l2_normalize(a, axis=1, eps=eps), l2_normalize(b, axis=1, eps=eps).T)


# ----------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------

def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss over its tape.

    Populates ``grad`` on every requires_grad leaf the loss depends on and
    returns the gradients keyed by leaf name (``leaf<k>`` for unnamed leaves).

    Raises:
        RankError: loss is not a scalar
        TapeError: loss is not on a tape, or the tape was already consumed
    """
    if loss.data.size != 1:
        raise RankError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise TapeError("loss was not computed on an active tape")
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; run a new forward pass")
    tape.consumed = True

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: Dict[int, Tensor] = {}
    for node_id in range(loss.node_id, -1, -1):
        g = pending.pop(node_id, None)
        if g is None:
            continue
        node = tape._nodes[node_id]
        for parent, parent_grad in zip(node.parents, node.backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node_id is not None and parent._tape is tape:
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + parent_grad
                else:
                    pending[parent.node_id] = parent_grad
            else:
                if id(parent) not in leaves:
                    leaves[id(parent)] = parent
                    parent.grad = np.zeros(parent.shape)
                parent.grad = parent.grad + np.reshape(parent_grad, parent.shape)

    return {
        (leaf.name or f"leaf{k}"): leaf.grad
        for k, leaf in enumerate(leaves.values())
    }


def _scalar_value(value: Union[Tensor, float]) -> float:
    result = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(result):
        raise NumericError(f"objective evaluated to a non-finite value ({result})")
    return result


def numerical_gradient(f: Callable[[], Union[Tensor, float]], params: Sequence[Tensor],
                       h: float = 1e-5) -> List[np.ndarray]:
    """Central finite differences of ``f`` with respect to each parameter tensor."""
    grads = []
    for param in params:
        grad = np.zeros(param.shape)
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = _scalar_value(f())
            flat[i] = original - h
            lower = _scalar_value(f())
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2.0 * h)
        grads.append(grad)
    return grads


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            h: float = 1e-5) -> float:
    """
    Compare autodiff gradients of ``f`` against central differences.

    Args:
        f: zero-argument callable computing a scalar Tensor from ``params``
        params: requires_grad leaves to perturb in place (restored afterwards)
        h: finite-difference step

    Returns:
        max over all coordinates of |analytic - numeric| / max(1e-8, |numeric|)
    """
    if not params:
        raise EmptyInputError("finite_difference_check needs at least one parameter")
    for param in params:
        param.zero_grad()
    with Tape():
        loss = f()
        _scalar_value(loss)
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    numeric = numerical_gradient(f, params, h)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(1e-8, np.abs(n))
        if rel.size:
            worst = max(worst, float(rel.max()))
    logger.debug(f"finite_difference_check: max relative error {worst:.3e}")
    return worst
