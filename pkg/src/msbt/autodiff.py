"""Dense double-precision tensors with reverse-mode automatic differentiation.

Every operation records a closure that maps the output gradient to input
gradients. Graphs are built per forward pass and released by ``backward``
unless ``retain_graph`` is set.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, ContractError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

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
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------- unary

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        # zero upstream gradient at sqrt(0) stays zero instead of 0/0
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_SQRT_2_OVER_PI * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    pos = xd >= 0
    ez = np.exp(np.where(pos, -xd, xd))
    out = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient passes only where x > floor."""
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            return x
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of ``concat``: cut ``x`` into consecutive pieces of ``sizes``."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(take(x, tuple(idx)))
        start += n
    return out


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take(x: Tensor, index) -> Tensor:
    """Differentiable ``x[index]`` for basic or integer-array indexing."""
    shape = x.shape
    out = x.data[index]

    fancy = _is_fancy(index)

    def bw(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, dtype=np.float64), (x,), bw)


# ---------------------------------------------------------------- fused ops

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as one graph node."""
    if x.ndim < 1 or w.ndim < 2 or x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def bw(g):
        gx = _unbroadcast(g @ np.swapaxes(wd, -1, -2), xd.shape) if x.requires_grad else None
        gw = _unbroadcast(np.swapaxes(xd, -1, -2) @ g, wd.shape) if w.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    # (..., N, D) -> (..., H, N, D/H)
    return np.swapaxes(x.reshape(x.shape[:-1] + (h, x.shape[-1] // h)), -2, -3)


def _merge(x: np.ndarray) -> np.ndarray:
    # (..., H, N, dh) -> (..., N, H*dh)
    x = np.swapaxes(x, -2, -3)
    return x.reshape(x.shape[:-2] + (-1,))


def attention(xq: Tensor, xkv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, bo: Tensor,
              heads: int) -> Tensor:
    """Multi-head scaled dot-product attention as one node.

    Queries come from ``xq`` (..., M, D), keys and values from ``xkv`` (..., N, D).
    Column block h of ``wq``/``wk``/``wv`` is head h; heads are concatenated
    and mixed by ``wo``. Leading axes broadcast like matmul.
    """
    d = xq.shape[-1]
    if xkv.shape[-1] != d or wq.shape[-2] != d or d % heads:
        raise DimensionError(f"attention: shapes {xq.shape}, {xkv.shape}, {wq.shape} with {heads} heads")
    xqd, xkd = xq.data, xkv.data
    c = 1.0 / np.sqrt(d // heads)
    q, k, v = _heads(xqd @ wq.data, heads), _heads(xkd @ wk.data, heads), _heads(xkd @ wv.data, heads)
    s = (q @ np.swapaxes(k, -1, -2)) * c
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    a = s / s.sum(axis=-1, keepdims=True)
    merged = _merge(a @ v)
    out = merged @ wo.data + bo.data

    def bw(g):
        T = lambda m: np.swapaxes(m, -1, -2)
        g_wo = _unbroadcast(T(merged) @ g, wo.shape)
        g_bo = _unbroadcast(g, bo.shape)
        g_ctx = _heads(g @ T(wo.data), heads)
        g_a = g_ctx @ T(v)
        g_v = _merge(T(a) @ g_ctx)
        g_s = a * (g_a - (g_a * a).sum(axis=-1, keepdims=True)) * c
        g_q = _merge(g_s @ k)
        g_k = _merge(T(g_s) @ q)
        g_xq = _unbroadcast(g_q @ T(wq.data), xqd.shape)
        g_xkv = _unbroadcast(g_k @ T(wk.data) + g_v @ T(wv.data), xkd.shape)
        return (g_xq, g_xkv,
                _unbroadcast(T(xqd) @ g_q, wq.shape),
                _unbroadcast(T(xkd) @ g_k, wk.shape),
                _unbroadcast(T(xkd) @ g_v, wv.shape),
                g_wo, g_bo)

    return _make(out, (xq, xkv, wq, wk, wv, wo, bo), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    d = x.shape[-1]
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise DimensionError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} vs feature dim {d}")
    xd = x.data
    inv_d = 1.0 / d
    # sum * (1/d) rather than .mean(): same result, less call overhead
    mu = xd.sum(axis=-1, keepdims=True) * inv_d
    xc = xd - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dgamma = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        dbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gd
            dx = rstd * (gx - gx.sum(axis=-1, keepdims=True) * inv_d
                         - xhat * ((gx * xhat).sum(axis=-1, keepdims=True) * inv_d))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw)


def cosine_similarity(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis with eps-guarded norms.

    Works on vectors or batches; rows of ``u`` and ``v`` broadcast.
    """
    nu = clamp_min(sqrt(sum_(u * u, axis=-1, keepdims=True)), eps)
    nv = clamp_min(sqrt(sum_(v * v, axis=-1, keepdims=True)), eps)
    return sum_((u / nu) * (v / nv), axis=-1)


def cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """All-pairs cosine similarity: ``out[..., i, j] = cos(a[..., i, :], b[..., j, :])``."""
    na = a / clamp_min(sqrt(sum_(a * a, axis=-1, keepdims=True)), eps)
    nb = b / clamp_min(sqrt(sum_(b * b, axis=-1, keepdims=True)), eps)
    return matmul(na, transpose(nb))


# ---------------------------------------------------------------- backward

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any requires_grad tensor")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst}" if self.worst else ""
        return f"grad_check {status}: max rel. err {self.max_rel_err:.3e}{where} (tol {self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x``."""
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def grad_check(f: Callable[..., Tensor], x: Tensor | Iterable[Tensor] | dict[str, Tensor],
               step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``x`` may be one tensor, a list, or a name->tensor mapping. If ``f``
    accepts arguments it is called with the tensors positionally (list or
    single tensor); a mapping means ``f`` closes over the tensors itself.
    """
    if isinstance(x, Tensor):
        named = {"x": x}
        call = lambda: f(x)
    elif isinstance(x, dict):
        named = dict(x)
        call = f
    else:
        xs = list(x)
        named = {f"x{i}": t for i, t in enumerate(xs)}
        call = lambda: f(*xs)

    for t in named.values():
        t.requires_grad = True
        t.grad = None
    loss = call()
    backward(loss)

    worst_err, worst_name = 0.0, ""
    for name, t in named.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = numeric_grad(call, t, step)
        err = relative_error(analytic, numeric, floor)
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst_name = f"{name}{list(np.unravel_index(int(err.argmax()), t.shape))}"
    return GradCheckReport(worst_err, tol, worst_err < tol, worst_name)
