"""Minimal reverse-mode automatic differentiation on top of numpy.

Every operation takes and returns :class:`Tensor` objects.  While gradient
recording is enabled, each result remembers its parents and a closure that
maps the output gradient to parent gradients.  :meth:`Tensor.backward` visits
the recorded nodes in exact reverse creation order, so a node's gradient is
complete before it is pushed to its inputs.

Training runs in 32-bit floats; gradient checks switch to 64-bit with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_dtype = np.dtype(np.float32)
_grad_enabled = True
_seq = itertools.count()


def get_default_dtype() -> np.dtype:
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    _dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_seq)
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        self.grad = np.asarray(grad, dtype=self.data.dtype) if self.grad is None else self.grad + grad
        for node in nodes:
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # intermediate gradients are not needed once propagated
            node.grad = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    # ties route the gradient to ``a``
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


# -- reductions and shape manipulation -----------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        if _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward)


def _needs_add_at(idx) -> bool:
    # fancy indexing may repeat entries; basic slicing cannot
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tensors, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- layers --------------------------------------------------------------------

def dense(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [n] or [batch, n]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense: input width {x.shape[-1]} does not match weight {weight.shape}")
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    out = xd @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense: bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g[None, :] if squeeze else g
        gx = g2 @ weight.data
        grads = [gx[0] if squeeze else gx, g2.T @ xd]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out[0] if squeeze else out, parents, backward)


def conv2d(x, kernels, bias=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is [C_in, H, W] or [B, C_in, H, W]; ``kernels`` is [C_out, C_in, k, k].
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d: bad ranks {x.shape} / {kernels.shape}")
    B, C, H, W = xd.shape
    O, Ck, k, k2 = kernels.shape
    if Ck != C or k != k2:
        raise ValueError(f"conv2d: input channels {C} vs kernels {kernels.shape}")
    if H < k or W < k:
        raise ValueError(f"conv2d: input {H}x{W} smaller than kernel {k}x{k}")
    s = stride
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    # channel-major im2col: cols[c, i, j, b, ho, wo] = x[b, c, s*ho + i, s*wo + j]
    xt = xd.transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    cols = cols.reshape(C * k * k, B * Ho * Wo)
    wmat = kernels.data.reshape(O, -1)
    out = wmat @ cols
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gk = (g2 @ cols.T).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, k, k, B, Ho, Wo)
            gxt = np.zeros((C, B, H, W), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            gx = gx[0] if squeeze else np.ascontiguousarray(gx)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    out = np.ascontiguousarray(out)
    return _make(out[0] if squeeze else out, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def lstm_cell(x, h, c, weight, bias) -> tuple[Tensor, Tensor]:
    """One LSTM step over the concatenated input ``[x, h]``.

    ``weight`` is [4H, n + H] with gate blocks ordered i, f, g, o.
    Returns ``(h_next, c_next)``.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    weight, bias = as_tensor(weight), as_tensor(bias)
    H = h.shape[-1]
    if weight.shape != (4 * H, x.shape[-1] + H) or bias.shape != (4 * H,) or c.shape != h.shape:
        raise ValueError(f"lstm_cell: shapes x={x.shape} h={h.shape} c={c.shape} "
                         f"W={weight.shape} b={bias.shape} do not conform")
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    hd = h.data[None] if squeeze else h.data
    cd = c.data[None] if squeeze else c.data
    n = xd.shape[1]
    xh = np.concatenate([xd, hd], axis=1)
    z = xh @ weight.data.T + bias.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    gg = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_next = f * cd + i * gg
    tc = np.tanh(c_next)
    h_next = o * tc
    both = np.concatenate([h_next, c_next], axis=1)

    def backward(g):
        g2 = g[None] if squeeze else g
        gh, gc = g2[:, :H], g2[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * cd * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        dxh = dz @ weight.data
        dx, dh = dxh[:, :n], dxh[:, n:]
        dcprev = dc * f
        if squeeze:
            dx, dh, dcprev = dx[0], dh[0], dcprev[0]
        return dx, dh, dcprev, dz.T @ xh, dz.sum(axis=0)

    out = _make(both[0] if squeeze else both, (x, h, c, weight, bias), backward)
    return out[..., :H], out[..., H:]


# -- gradient checking ---------------------------------------------------------

def grad_check(function: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``function(*inputs)`` must return a scalar tensor.  The relative error of a
    coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = function(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(function(*inputs).data)
                flat[j] = orig - eps
                fm = float(function(*inputs).data)
                flat[j] = orig
                num = (fp - fm) / (2.0 * eps)
                denom = max(abs(num), abs(aflat[j]), 1e-8)
                worst = max(worst, abs(num - aflat[j]) / denom)
    return worst
