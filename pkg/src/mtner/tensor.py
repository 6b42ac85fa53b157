"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every differentiable op records its inputs and a closure mapping the output
gradient to one gradient per input. Nodes are numbered in creation order;
``Tensor.backward`` replays the reachable nodes in exactly the reverse of
that order, summing contributions that reach the same tensor.

Values are checked for NaN/Inf at every op boundary (forward and backward)
and a :class:`NonFiniteError` is raised at the first offending op.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm_stats",
    "concat",
    "conv2d",
    "take_rows",
    "amax",
    "relu",
    "tanh",
    "exp",
    "log",
    "finite_diff_check",
    "dump_tensor",
    "parse_tensor",
]

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced by an operation."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_node_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, numeric probes)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    # a sum of squares is finite only if every entry is; it can also overflow
    # on huge finite entries, so the exact test settles the non-finite case
    flat = arr.ravel()
    if math.isfinite(flat.dot(flat)):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op")
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_node_counter)
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._seq = next(_node_counter)
        out._op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = next(_node_counter)
        out._op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor t upstream.

        ``self`` must hold a single value. Repeated calls add to existing
        gradients; call ``zero_grad`` on parameters between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        pending = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node._op}")
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    _check_finite(out.data, "constant operand")
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._seq = next(_node_counter)
    out._op = "const"
    return out


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if not (bd != 0).all():
        raise ZeroDivisionError("division by a zero entry")
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))

    return Tensor._from_op(out, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    ad = a.data
    out = ad ** p

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(ad),)
        if p == 1.0:
            return (g,)
        return (g * p * ad ** (p - 1.0),)

    return Tensor._from_op(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if not (ad > 0).all():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions ------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)
    return Tensor._from_op(
        out, (a,),
        lambda g: (_expand_reduced(g / count, shape, axis, keepdims).copy(),), "mean")


def amax(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, idx, np.expand_dims(g, axis), axis=axis)
        return (z,)

    return Tensor._from_op(out, (a,), backward, "max")


# -- shape ops -----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return Tensor._from_op(np.array(a.data[idx]), (a,), backward, "getitem")


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding lookup); repeated ids accumulate."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return Tensor._from_op(table.data[ids], (table,), backward, "take_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.shape for x in ts]} disagree off-axis")
    if len(ts) == 1:
        return ts[0]
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(
        np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward, "concat")


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    with np.errstate(over="ignore", invalid="ignore"):
        out = ad @ bd
    return Tensor._from_op(out, (a, b), backward, "matmul")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def _pop_std(x: Tensor, mu: np.ndarray) -> Tensor:
    centered = x.data - mu
    d = x.shape[-1]
    sigma = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))

    def backward(g):
        safe = np.where(sigma > 0, sigma, 1.0)
        return (np.where(sigma > 0, g * centered / (d * safe), 0.0),)

    return Tensor._from_op(sigma, (x,), backward, "pop_std")


def layer_norm_stats(x) -> tuple:
    """Mean and population standard deviation over the last axis.

    Both results keep the reduced axis (size 1). The gradient of sigma is
    taken as zero where sigma == 0.
    """
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm_stats needs at least one element")
    mu = mean(x, axis=-1, keepdims=True)
    return mu, _pop_std(x, mu.data)


def conv2d(x, kernel) -> Tensor:
    """Same-padded 2-D cross-correlation.

    x: (H, W, c_in), kernel: (k, k, c_in, c_out) with odd k -> (H, W, c_out).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,C) and (k,k,Cin,Cout), got {x.shape}, {kernel.shape}")
    k, k2, c_in, c_out = kernel.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd for same padding, got {k}")
    if x.shape[2] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    h, w, _ = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    # patches[i, j, di, dj, c] = xp[i + di, j + dj, c]
    patches = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    patches = np.ascontiguousarray(patches.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * c_in)
    kmat = kernel.data.reshape(k * k * c_in, c_out)
    out = (patches @ kmat).reshape(h, w, c_out)

    def backward(g):
        g2 = g.reshape(h * w, c_out)
        gk = (patches.T @ g2).reshape(kernel.shape)
        gpatch = (g2 @ kmat.T).reshape(h, w, k, k, c_in)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[di:di + h, dj:dj + w] += gpatch[:, :, di, dj]
        return gxp[pad:pad + h, pad:pad + w], gk

    return Tensor._from_op(out, (x, kernel), backward, "conv2d")


# -- verification ------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[tuple]] = None,
) -> float:
    """Compare autodiff against central differences for ``f`` at ``x``.

    Returns max |analytic - numeric| / max(1, |numeric|) over the probed
    coordinates (all of them unless ``indices`` is given). ``x.grad`` is
    reset before the analytic pass.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = f(x).item()
            x.data[idx] = orig - eps
            fm = f(x).item()
            x.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"function not finite near coordinate {idx}")
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# -- text dump -----------------------------------------------------------------

def dump_tensor(t: Tensor) -> str:
    """Flat text form: ``shape: d1 d2 ...`` then ``data: v1 v2 ...``."""
    shape = " ".join(str(d) for d in t.shape)
    data = " ".join(repr(float(v)) for v in t.data.reshape(-1))
    return f"shape: {shape}\ndata: {data}\n"


def parse_tensor(text: str) -> Tensor:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2 or not lines[0].startswith("shape:") or not lines[1].startswith("data:"):
        raise ValueError("tensor dump must have a 'shape:' line followed by a 'data:' line")
    shape = tuple(int(v) for v in lines[0][len("shape:"):].split())
    values = [float(v) for v in lines[1][len("data:"):].split()]
    if int(np.prod(shape)) != len(values):
        raise ShapeError(f"dump declares shape {shape} but holds {len(values)} values")
    return Tensor(np.array(values, dtype=np.float64).reshape(shape))
