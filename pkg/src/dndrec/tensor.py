"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its inputs and a backward rule. :func:`backward` collects the nodes
reachable from a scalar loss into a :class:`Tape` (creation order is a valid
topological order) and replays the rules in reverse.

Only the operations the recommender models need are provided. Broadcasting
follows numpy semantics and gradients are summed back to operand shapes.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

_ids = itertools.count()
_grad_enabled = True

ACTIVATIONS = ("sigmoid", "tanh", "relu", "softplus")


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (evaluation and precompute paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A row-major float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")
    # make ndarray (op) Tensor defer to the Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------- tape


class Tape:
    """Recorded operations in creation order, restricted to one loss."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
        for node in reversed(self.ops):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    tape.replay(loss)
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b`` (exact, no arithmetic blend)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def activation(x: Tensor, kind: str) -> Tensor:
    """Element-wise sigmoid, tanh, relu or softplus."""
    xd = x.data
    if kind == "sigmoid":
        out = expit(xd)
        return _make(out, (x,), lambda g: (g * out * (1.0 - out),), kind)
    if kind == "tanh":
        out = np.tanh(xd)
        return _make(out, (x,), lambda g: (g * (1.0 - out * out),), kind)
    if kind == "relu":
        pos = xd > 0
        return _make(np.where(pos, xd, 0.0), (x,), lambda g: (g * pos,), kind)
    if kind == "softplus":
        # logaddexp(0, x) == x + log1p(exp(-x)) for large x, no overflow
        out = np.logaddexp(0.0, xd)
        return _make(out, (x,), lambda g: (g * expit(xd),), kind)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def softplus(x: Tensor) -> Tensor:
    return activation(x, "softplus")


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes batch as in :func:`numpy.matmul`."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(np.matmul(ad, bd), (a, b), rule, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), rule, "stack")


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatter-adds (repeats accumulate)."""
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), rule, "take")


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; any index shape is allowed."""
    idx = np.asarray(indices, dtype=np.int64)
    m = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"embedding index out of range [0, {m})")
    return take(table, idx)


# ------------------------------------------------------------ softmax family


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), rule, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), rule, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    xmax = x.data.max(axis=axis, keepdims=True)
    lse = xmax + np.log(np.exp(x.data - xmax).sum(axis=axis, keepdims=True))
    weights = np.exp(x.data - lse)

    def rule(g):
        return (np.expand_dims(g, axis) * weights,)

    return _make(np.squeeze(lse, axis=axis), (x,), rule, "logsumexp")


# ------------------------------------------------------------------- dropout


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; one per training run."""
    return np.random.Generator(np.random.Philox(seed))


def dropout_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``ratio``, survivors 1/(1-ratio)."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
    keep = rng.random(shape) >= ratio
    return keep / (1.0 - ratio)


def dropout(x: Tensor, ratio: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or ratio == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs a generator")
    return mul(x, dropout_mask(x.shape, ratio, rng))


# ------------------------------------------------------------ gradient checks


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                      eps: float = 1e-5, stencil: int = 2) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the graph from ``params`` on each call. Parameter
    data is perturbed in place and restored. ``stencil=2`` is the classic
    ``(f(x+h) - f(x-h)) / 2h``; ``stencil=4`` uses the fourth-order central
    formula, which tolerates a larger ``h`` and so less round-off.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if stencil not in (2, 4):
        raise ContractError("stencil must be 2 or 4")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(loss)

    def at(flat, i, value):
        flat[i] = value
        return loss_fn().item()

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros(p.data.size)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            d1 = at(flat, i, x0 + eps) - at(flat, i, x0 - eps)
            if stencil == 2:
                numeric[i] = d1 / (2 * eps)
            else:
                d2 = at(flat, i, x0 + 2 * eps) - at(flat, i, x0 - 2 * eps)
                numeric[i] = (8 * d1 - d2) / (12 * eps)
            flat[i] = x0
        worst = max(worst, _relative_error(analytic.reshape(-1), numeric))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               stencil: int = 2) -> float:
    leaf = Tensor(x.data.copy(), requires_grad=True)
    return grad_check_params(lambda: f(leaf), [leaf], eps, stencil)
