"""Dense numpy tensors with tape-free reverse-mode differentiation.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  Nodes carry a creation
counter, so sorting reachable nodes by that counter is a valid topological
order and the backward sweep is deterministic.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "uid", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.uid = next(_ids)
        self.op = op

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise NumericError(f"{what} contains NaN or Inf")
        return self

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Create an op output; drops the graph link when no parent needs grad."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, False, (), None, op)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(a, dtype=dtype))


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not match") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    k = x.dtype.type(_SQRT_2_OVER_PI)
    c = x.dtype.type(GELU_COEFF)
    x2 = x * x
    t = x2 * c
    t += 1.0
    t *= x
    t *= k
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) k (1 + 3 c x^2)
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= k
        d *= x2 * (3.0 * c) + 1.0
        d *= x
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return make(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch one of add/sub/mul/gelu/scale by name."""
    if op in _ELEMENTWISE:
        return _ELEMENTWISE[op](a, b)
    if op == "gelu":
        return gelu(a)
    if op == "scale":
        return scale(a, float(b))
    raise UsageError(f"unknown elementwise op {op!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; b may be 2-D (shared weight) or match a's batch dims."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one large GEMM instead of numpy's per-batch loop
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- reductions and reshapes ---------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    return make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows of a 2-D table picked by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids[(ids < 0) | (ids >= n)].reshape(-1)[0])
        raise IndexError(f"gather_rows: id {bad} out of range for table of {n} rows")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return make(table.data[ids], (table,), bw, "gather_rows")


def select(a: Tensor, index) -> Tensor:
    """Basic numpy indexing (slices / ints) with scatter backward."""
    shape = a.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        gt[index] += g
        return (gt,)

    return make(a.data[index], (a,), bw, "select")


# -- softmax family -----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make(p, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), bw, "log_softmax")


# -- backward -----------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n.uid in seen or not n.requires_grad:
            continue
        seen.add(n.uid)
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda t: t.uid, reverse=True)
    return nodes


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    With ``wrt`` given, returns the matching gradient arrays (zeros for
    tensors the root does not depend on).
    """
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.uid: np.ones_like(root.data)}
    for node in _reachable(root):
        g = grads.pop(node.uid, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.uid in grads:
                grads[parent.uid] = grads[parent.uid] + pg
            else:
                grads[parent.uid] = pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(loss_fn: Callable[[], Tensor], params, eps: float = 1e-5,
               n_coords: int = 64, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences.

    ``params`` is a mapping or sequence of leaf tensors (f64 expected).  Up to
    ``n_coords`` coordinates per tensor are sampled.  The relative error of a
    coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if eps <= 0:
        raise UsageError("grad_check needs eps > 0")
    tensors = list(params.values()) if hasattr(params, "values") else list(params)
    zero_grad(tensors)
    loss = loss_fn()
    if not loss.is_finite():
        raise NumericError("grad_check: loss is not finite")
    analytic = backward(loss, tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        count = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                fp = loss_fn().item()
                flat[c] = orig - eps
                fm = loss_fn().item()
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("grad_check: perturbed loss is not finite")
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grad(tensors)
    return worst
