"""Dense tensors with a reverse-mode gradient tape.

Every op that touches a tensor with ``requires_grad`` set appends one node to
the active :class:`GradientTape`; :func:`backward` replays those nodes in
reverse recorded order. Ops whose inputs are all grad-free record nothing.

Broadcasting is restricted to scalar-vs-tensor. Row-wise work that would
normally need broadcasting (bias add, per-row cosine) is exposed as fused ops.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradientTape", "DimensionError", "ContractError",
    "tensor", "zeros", "as_tensor", "no_grad", "grad_enabled", "get_tape",
    "backward", "set_precision", "get_dtype", "diagnostics", "reset_diagnostics",
    "matmul", "affine", "add", "sub", "mul", "neg", "scale", "relu", "tanh",
    "exp", "log", "square", "softplus", "minimum", "clip", "sum", "mean",
    "reshape", "concat", "getitem", "take_rows", "pick", "cosine_similarity", "elementwise",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype = _PRECISIONS[os.environ.get("VLRL_PRECISION", "f64").lower()]


def set_precision(name: str) -> None:
    """Select the repo-wide real type: ``"f64"`` (default) or ``"f32"``."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


def get_dtype() -> type:
    return _dtype


# Counts rows where cosine similarity saw a zero-norm vector.
diagnostics: dict[str, int] = {"zero_vector_cosine": 0}


def reset_diagnostics() -> None:
    for k in diagnostics:
        diagnostics[k] = 0


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable):
        self.out = out
        self.parents = parents
        self.fn = fn


class GradientTape:
    """Ordered record of differentiable ops.

    Single-threaded; one tape per training run. The tape is cleared after each
    :func:`backward` call, so a loss can be differentiated once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


_tape = GradientTape()
_grad_on = True


def get_tape() -> GradientTape:
    return _tape


def grad_enabled() -> bool:
    return _grad_on


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _grad_on
    prev = _grad_on
    _grad_on = False
    try:
        yield
    finally:
        _grad_on = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_acc", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._acc: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis: int | None = None):
        return sum(self, axis)

    def mean(self, axis: int | None = None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    """Wrap an op result, recording a node only if some parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._acc = None
    out.name = None
    if _grad_on and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, fn)
        out._node = node
        _tape.nodes.append(node)
    else:
        out.requires_grad = False
        out._node = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten. The tape is cleared afterwards.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss was not produced on the current tape (grad-free or already consumed)")
    nodes = _tape.nodes
    try:
        stop = next(i for i in range(len(nodes) - 1, -1, -1) if nodes[i] is loss._node)
    except StopIteration:
        raise ContractError("loss does not belong to the active tape") from None

    loss._acc = np.ones_like(loss.data)
    touched = [loss]
    for node in reversed(nodes[: stop + 1]):
        g = node.out._acc
        if g is None:
            continue
        grads = node.fn(g)
        for p, pg in zip(node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p._acc is None:
                p._acc = pg
                touched.append(p)
            else:
                p._acc = p._acc + pg
    for t in touched:
        g = np.ascontiguousarray(t._acc, dtype=_dtype).reshape(t.data.shape)
        t._acc = None
        if t._node is None and t.grad is not None:
            t.grad = t.grad + g
        else:
            t.grad = g
    _tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _is_scalar(x: Tensor) -> bool:
    return x.data.ndim == 0 or x.data.size == 1 and x.data.ndim <= 1


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a) if a.requires_grad else None,
                            _unbroadcast(g * ad, b) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * _dtype(c), (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0)
    return _make(y, (a,), lambda g: (g * (y > 0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * g * x,))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0, x).astype(_dtype, copy=False)

    def fn(g):
        return (g / (1 + np.exp(-x)),)

    return _make(y, (a,), fn)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("minimum", a, b)
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a), _unbroadcast(g * ~take_a, b)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "tanh": tanh, "negate": neg, "scale": scale}


def elementwise(tag: str, *inputs) -> Tensor:
    """Dispatch one of ``add, mul, relu, tanh, negate, scale`` by name."""
    try:
        fn = _ELEMENTWISE[tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op {tag!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum(), dtype=_dtype), (a,),
                     lambda g: (np.broadcast_to(g, shape),))
    return _make(a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(p.shape, parts[0].shape)) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[q.shape for q in parts]}")
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), fn)


def getitem(a, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.asarray(a.data[key]), (a,), fn)


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]`` (repeats allowed); gradients scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), fn)


def pick(a, idx) -> Tensor:
    """Per-row element selection: ``out[i] = a[i, idx[i]]`` for a 2-D ``a``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"pick expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: index shape {idx.shape} does not match rows of {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, idx] = g
        return (out,)

    return _make(a.data[rows, idx], (a,), fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def affine(x, w, b, relu: bool = False) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row; ``relu=True`` fuses the
    activation into the same node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine: shapes x{x.shape} w{w.shape} b{b.shape} do not compose")
    xd, wd = x.data, w.data
    y = xd @ wd
    y += b.data
    if relu:
        np.maximum(y, 0, out=y)

    def fn(g):
        if relu:
            g = g * (y > 0)
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _make(y, (x, w, b), fn)


def cosine_similarity(x, y) -> Tensor:
    """Cosine similarity along the last axis.

    A zero-norm vector on either side yields similarity 0 with zero gradient
    and bumps ``diagnostics["zero_vector_cosine"]``. The forward value is
    clipped to [-1, 1] so that ``2 - 2*cos`` never goes negative from rounding.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.ndim == 0:
        raise DimensionError(f"cosine_similarity: shapes {x.shape} and {y.shape} differ")
    xd, yd = x.data, y.data
    nx = np.sqrt((xd * xd).sum(axis=-1))
    ny = np.sqrt((yd * yd).sum(axis=-1))
    ok = (nx > 0) & (ny > 0)
    n_bad = int(np.size(ok) - np.count_nonzero(ok))
    if n_bad:
        diagnostics["zero_vector_cosine"] += n_bad
    denom = np.where(ok, nx * ny, 1)
    s = np.where(ok, (xd * yd).sum(axis=-1) / denom, 0).astype(_dtype, copy=False)
    nx_safe = np.where(ok, nx, 1)[..., None]
    ny_safe = np.where(ok, ny, 1)[..., None]
    okc = ok[..., None]

    def fn(g):
        ge = g[..., None]
        se = s[..., None]
        gx = gy = None
        if x.requires_grad:
            gx = np.where(okc, ge * (yd / (nx_safe * ny_safe) - se * xd / (nx_safe * nx_safe)), 0)
        if y.requires_grad:
            gy = np.where(okc, ge * (xd / (nx_safe * ny_safe) - se * yd / (ny_safe * ny_safe)), 0)
        return gx, gy

    return _make(np.clip(s, -1, 1), (x, y), fn)

