"""Reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its output array, its parents and a closure
mapping the output gradient to one gradient per parent. ``Tensor.backward``
walks the graph in reverse topological order. Gradients are kept on every
node that requires them, so intermediate activations can be inspected after
a backward pass (Grad-CAM relies on this).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import _kernels as _k

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_check_finite = False


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or infinity."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_check(enabled: bool) -> None:
    """Toggle the per-op NaN/inf hook on forward outputs."""
    global _check_finite
    _check_finite = bool(enabled)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for p, g in zip(node._parents, parent_grads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.shape:
                    raise RuntimeError(f"{node.op}: gradient shape {g.shape} != parent shape {p.shape}")
                if _check_finite and not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient flowing out of {node.op}")
                p.grad = g if p.grad is None else p.grad + g

    # -- operator sugar -----------------------------------------------------
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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _node(out, (x,), lambda g: (g * (out > 0),), "relu")


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, key) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _node(x.data[key], (x,), backward, "getitem")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        flat = g.reshape(-1, *src_shape[1:])
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index.reshape(-1), flat)
        return (full,)

    return _node(x.data[index], (x,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# -- reductions (64-bit accumulation) ---------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    src_shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).astype(x.dtype, copy=True),)

    return _node(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    src_shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src_shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, src_shape) / count).astype(x.dtype),)

    return _node(out, (x,), backward, "mean")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        grads = [(g2 @ wd.T).reshape(x.shape), xd.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0, dtype=np.float64).astype(bias.dtype))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "dense")


# -- convolution & pooling ----------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, pad: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """NHWC patches as an (N·oh·ow) × (kh·kw·C) matrix."""
    n, h, w, c = x.shape
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, oh, ow, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)
    return view.reshape(n * oh * ow, kh * kw * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, layout: str = "NCHW") -> Tensor:
    """Cross-correlation with F×C×kh×kw kernels.

    ``layout="NCHW"`` takes and returns N×C×H×W arrays. ``layout="NHWC"`` takes
    and returns N×H×W×C and skips the layout transposes; the model uses it.
    """
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"unknown layout {layout!r}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: incompatible shapes input={x.shape} kernels={weight.shape}")
    if layout == "NCHW":
        n, c, h, w = x.shape
        xd = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    else:
        n, h, w, c = x.shape
        xd = np.ascontiguousarray(x.data)
    f, kc, kh, kw = weight.shape
    if kc != c:
        raise ValueError(f"conv2d: incompatible shapes input={x.shape} kernels={weight.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    cols = _im2col(xd, kh, kw, padding, stride, oh, ow)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, f))
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, f)
    if layout == "NCHW":
        out = out.transpose(0, 3, 1, 2)

    def backward(g):
        if layout == "NCHW":
            g = g.transpose(0, 2, 3, 1)
        g = np.ascontiguousarray(g)
        g2 = g.reshape(-1, f)
        dw = np.ascontiguousarray((cols.T @ g2).reshape(kh, kw, c, f).transpose(3, 2, 0, 1))
        db = g2.sum(axis=0, dtype=np.float64).astype(bias.dtype) if bias is not None else None
        tail = (db,) if bias is not None else ()
        if not x.requires_grad:
            return (None, dw) + tail
        if stride == 1 and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
            # input gradient = full correlation of g with the flipped kernels
            gcols = _im2col(g, kh, kw, kh - 1 - padding, 1, h, w)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
            dx = (gcols @ wflip).reshape(n, h, w, c)
        else:
            dcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, c)
            dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, i, j]
            dx = dxp[:, padding:padding + h, padding:padding + w]
        if layout == "NCHW":
            dx = dx.transpose(0, 3, 1, 2)
        return (np.ascontiguousarray(dx), dw) + tail

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2, layout: str = "NCHW") -> Tensor:
    """2×2 stride-2 max pooling; ties route the gradient to the first index (row-major)."""
    if size != 2:
        raise ValueError("only 2x2 pooling is supported")
    if layout not in ("NCHW", "NHWC"):
        raise ValueError(f"unknown layout {layout!r}")
    xd = x.data.transpose(0, 2, 3, 1) if layout == "NCHW" else x.data
    h, w = xd.shape[1], xd.shape[2]
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d: spatial shape {(h, w)} not divisible by 2")
    out, arg = _k.maxpool2_fwd(np.ascontiguousarray(xd))
    if layout == "NCHW":
        out = out.transpose(0, 3, 1, 2)

    def backward(g):
        if layout == "NCHW":
            g = g.transpose(0, 2, 3, 1)
        dx = _k.maxpool2_bwd(np.ascontiguousarray(g), arg)
        if layout == "NCHW":
            dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        return (dx,)

    return _node(out, (x,), backward, "max_pool2d")


# -- losses ---------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(prob: Tensor, labels, reduction: str = "mean", pos_weight: float = 1.0) -> Tensor:
    """Binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != prob.shape:
        raise ValueError(f"bce_loss: probabilities {prob.shape} vs labels {y.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    p64 = prob.data.astype(np.float64)
    clipped = (p64 < BCE_EPS) | (p64 > 1 - BCE_EPS)
    p = np.clip(p64, BCE_EPS, 1 - BCE_EPS)
    w = np.where(y > 0.5, pos_weight, 1.0)
    terms = -w * (y * np.log(p) + (1 - y) * np.log1p(-p))
    scale = 1.0 / max(y.size, 1) if reduction == "mean" else 1.0
    value = np.asarray(terms.sum() * scale, dtype=prob.dtype)

    def backward(g):
        dp = w * (-(y / p) + (1 - y) / (1 - p)) * scale
        dp = np.where(clipped, 0.0, dp)
        return ((float(g) * dp).astype(prob.dtype),)

    return _node(value, (prob,), backward, "bce_loss")


# -- recurrent --------------------------------------------------------------------

def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over a B×T×I input and return all hidden states B×T×H.

    Gate layout along the 4H axis is (input, forget, cell, output). With
    ``reverse=True`` the sequence is consumed from the last step to the first
    and ``out[:, t]`` is still the state aligned with input position ``t``.
    Zero initial hidden and cell states. Backward is hand-derived BPTT.
    """
    b, t_len, i_dim = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (i_dim, 4 * hid) or w_hh.shape != (hid, 4 * hid) or bias.shape != (4 * hid,):
        raise ValueError(
            f"lstm_sequence: input {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}")
    dtype = x.dtype
    xw = (x.data.reshape(-1, i_dim) @ w_ih.data + bias.data).reshape(b, t_len, 4 * hid)
    whh = w_hh.data
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)

    hs = np.zeros((b, t_len, hid), dtype=dtype)
    cs = np.zeros((b, t_len, hid), dtype=dtype)
    gates = np.zeros((b, t_len, 4 * hid), dtype=dtype)
    h = np.zeros((b, hid), dtype=dtype)
    c = np.zeros((b, hid), dtype=dtype)
    for t in steps:
        z = xw[:, t] + h @ whh
        ifo = _stable_sigmoid(z[:, np.r_[0:2 * hid, 3 * hid:4 * hid]])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        i_g, f_g, o_g = ifo[:, :hid], ifo[:, hid:2 * hid], ifo[:, 2 * hid:]
        c = f_g * c + i_g * g
        h = o_g * np.tanh(c)
        gates[:, t, :hid] = i_g
        gates[:, t, hid:2 * hid] = f_g
        gates[:, t, 2 * hid:3 * hid] = g
        gates[:, t, 3 * hid:] = o_g
        hs[:, t] = h
        cs[:, t] = c

    def backward(gout):
        dxw = np.zeros_like(xw)
        dwhh = np.zeros_like(whh)
        dh_next = np.zeros((b, hid), dtype=dtype)
        dc_next = np.zeros((b, hid), dtype=dtype)
        order = list(steps)
        for k in range(t_len - 1, -1, -1):
            t = order[k]
            prev = order[k - 1] if k > 0 else None
            h_prev = hs[:, prev] if prev is not None else np.zeros((b, hid), dtype=dtype)
            c_prev = cs[:, prev] if prev is not None else np.zeros((b, hid), dtype=dtype)
            gt = gates[:, t]
            i_g, f_g, g, o_g = gt[:, :hid], gt[:, hid:2 * hid], gt[:, 2 * hid:3 * hid], gt[:, 3 * hid:]
            tc = np.tanh(cs[:, t])
            dh = gout[:, t] + dh_next
            do = dh * tc
            dc = dh * o_g * (1 - tc * tc) + dc_next
            dz = dxw[:, t]
            dz[:, :hid] = dc * g * i_g * (1 - i_g)
            dz[:, hid:2 * hid] = dc * c_prev * f_g * (1 - f_g)
            dz[:, 2 * hid:3 * hid] = dc * i_g * (1 - g * g)
            dz[:, 3 * hid:] = do * o_g * (1 - o_g)
            dc_next = dc * f_g
            dwhh += h_prev.T @ dz
            dh_next = dz @ whh.T
        dxw2 = dxw.reshape(-1, 4 * hid)
        dx = (dxw2 @ w_ih.data.T).reshape(x.shape)
        dwih = x.data.reshape(-1, i_dim).T @ dxw2
        db = dxw2.sum(axis=0, dtype=np.float64).astype(bias.dtype)
        return dx, dwih, dwhh, db

    return _node(hs, (x, w_ih, w_hh, bias), backward, "lstm_sequence")
