"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every operation records a tape node (creation-ordered); backward() replays
the reachable subgraph in reverse creation order, which fixes the gradient
accumulation order and makes replays bit-identical for identical inputs.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "ContractError",
    "NumericError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "maximum",
    "minimum",
    "clamp",
    "relu",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "absolute",
    "power",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "tsum",
    "tmean",
    "matmul",
    "softmax_axis",
    "conv2d",
    "depthwise_xcorr",
    "xcorr",
    "norm_affine",
    "backward",
    "sgd_step",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    __slots__ = ("nid", "parents", "backward_fn")

    def __init__(self, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.nid = next(_node_ids)
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense n-d float64 value with a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named learnable tensor; names must be unique within a model."""

    __slots__ = ("name", "tensor", "learnable")

    def __init__(self, name: str, data, learnable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=learnable)
        self.learnable = learnable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; the subgradient follows the selected argument,
    ties select the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g, a=a, b=b, pick_a=pick_a):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.data.shape))

    return _make(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties select the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g, a=a, b=b, pick_a=pick_a):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.data.shape))

    return _make(out, (a, b), bw)


def clamp(a, lo: float | None, hi: float | None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bw(g, a=a, inside=inside):
        if a.requires_grad:
            a._accumulate(g * inside)

    return _make(out, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bw(g, a=a, mask=mask):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g, a=a, out=out):
        if a.requires_grad:
            a._accumulate(g * out)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out, (a,), bw)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g * _sigmoid(a.data))

    return _make(out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)

    def bw(g, a=a, out=out):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bw)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def bw(g, a=a, sign=sign):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _make(np.abs(a.data), (a,), bw)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data**p

    def bw(g, a=a, p=p):
        if a.requires_grad:
            if p == 0:
                a._accumulate(np.zeros_like(a.data))
            else:
                a._accumulate(g * p * a.data ** (p - 1))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bw(g, a=a):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g, a=a, inv=inv):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(out, (a,), bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, parts=parts, offsets=offsets, axis=axis):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(out, tuple(parts), bw)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = a.data[idx]

    def bw(g, a=a, idx=idx):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g, a=a, axis=axis, keepdims=keepdims, n=n):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and network kernels


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out, (a, b), bw)


def softmax_axis(a, axis: int) -> Tensor:
    """Softmax along `axis`, stabilized by max subtraction."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_axis requires finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, a=a, out=out, axis=axis):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            a._accumulate(out * (g - dot))

    return _make(out, (a,), bw)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of w (C_out x C_in x k x k) over x (C_in x H x W); no bias."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects CHW input and OIkk weight, got {x.shape}, {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[0]}, weight expects {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d requires stride >= 1 and pad >= 0")
    xp = _pad_hw(x.data, pad)
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # C_in x H' x W' x k x k
    out = np.einsum("ocuv,cijuv->oij", w.data, win, optimize=True)

    def bw(g, x=x, w=w, win=win, xp_shape=xp.shape, stride=stride, pad=pad,
           h_out=h_out, w_out=w_out, kh=kh, kw=kw):
        if w.requires_grad:
            w._accumulate(np.einsum("oij,cijuv->ocuv", g, win, optimize=True))
        if x.requires_grad:
            tmp = np.einsum("oij,ocuv->cijuv", g, w.data, optimize=True)
            gx = np.zeros(xp_shape)
            for u in range(kh):
                for v in range(kw):
                    gx[:, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += tmp[:, :, :, u, v]
            if pad:
                gx = gx[:, pad:-pad, pad:-pad]
            x._accumulate(gx)

    return _make(out, (x, w), bw)


def depthwise_xcorr(kernel, search) -> Tensor:
    """Per-channel sliding inner product: C x h x w over C x H x W -> C x H' x W'."""
    kernel, search = _as_tensor(kernel), _as_tensor(search)
    if kernel.ndim != 3 or search.ndim != 3:
        raise ShapeError("depthwise_xcorr expects CHW operands")
    if kernel.shape[0] != search.shape[0]:
        raise ShapeError(f"channel mismatch: {kernel.shape[0]} vs {search.shape[0]}")
    c, h, w = kernel.shape
    _, hs, ws = search.shape
    if h > hs or w > ws:
        raise ShapeError("kernel larger than search region")
    win = np.lib.stride_tricks.sliding_window_view(search.data, (h, w), axis=(1, 2))
    out = np.einsum("cuv,cijuv->cij", kernel.data, win, optimize=True)

    def bw(g, kernel=kernel, search=search, win=win, h=h, w=w):
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("cij,cijuv->cuv", g, win, optimize=True))
        if search.requires_grad:
            gs = np.zeros_like(search.data)
            h_out, w_out = g.shape[1], g.shape[2]
            for u in range(h):
                for v in range(w):
                    gs[:, u:u + h_out, v:v + w_out] += g * kernel.data[:, u:u + 1, v:v + 1]
            search._accumulate(gs)

    return _make(out, (kernel, search), bw)


def xcorr(kernel, search) -> Tensor:
    """Full cross-correlation summed over channels -> 1 x H' x W'."""
    dw = depthwise_xcorr(kernel, search)
    return tsum(dw, axis=0, keepdims=True)


def norm_affine(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial standardization (instance statistics) then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError("norm_affine expects a CHW tensor")
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError("gain/bias must be per-channel vectors")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = gain.data[:, None, None] * xhat + bias.data[:, None, None]

    def bw(g, x=x, gain=gain, bias=bias, xhat=xhat, std=std):
        n = x.data.shape[1] * x.data.shape[2]
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=(1, 2)))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxhat = g * gain.data[:, None, None]
            m1 = gxhat.mean(axis=(1, 2), keepdims=True)
            m2 = (gxhat * xhat).mean(axis=(1, 2), keepdims=True)
            x._accumulate((gxhat - m1 - xhat * m2) / std)

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# backward pass, optimizer step, gradient checking


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor the scalar loss depends on.

    Nodes are visited in reverse creation order, so accumulation order is
    deterministic for a deterministically constructed graph.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            return
        loss._accumulate(np.ones_like(loss.data))
        return

    nodes: list[tuple[Tensor, TapeNode]] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append((t, t.node))
        for p in t.node.parents:
            if p.requires_grad and p.node is not None and id(p) not in seen:
                stack.append(p)

    nodes.sort(key=lambda pair: pair[1].nid, reverse=True)
    loss._accumulate(np.ones_like(loss.data))
    for t, node in nodes:
        if t.grad is None:
            continue
        node.backward_fn(t.grad)


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """p <- p - lr * grad(p); gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    for p in params:
        p.tensor.data -= lr * p.tensor.grad
        p.tensor.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ContractError("grad_check requires h > 0")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise ContractError("grad_check requires a scalar-valued builder")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(flat.reshape(x.data.shape))).item()
            flat[i] = orig - h
            fm = f(Tensor(flat.reshape(x.data.shape))).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
