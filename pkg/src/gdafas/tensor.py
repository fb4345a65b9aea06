"""Reverse-mode automatic differentiation over float64 numpy arrays.

A single module-level tape records every operation whose result needs a
gradient. ``backward`` on a scalar walks that tape once in reverse, deposits
gradients on recorded tensors that have ``requires_grad`` set, and clears the
tape. Tensors are value-semantic: every op allocates a fresh output and taped
arrays are never mutated in place.

Gradients flow *through* tensors regardless of their ``requires_grad`` flag;
the flag only controls whether a gradient is accumulated on that tensor. A
frozen weight therefore still passes gradient back to the op's other inputs.
"""

import contextlib
import itertools

import numpy as np

_LOG_FLOOR = 1e-12
_DIV_FLOOR = 1e-12

_tape = []
_grad_enabled = True
_uid_counter = itertools.count()


class Tensor:
    """Array wrapper carrying an identity for the tape and an optional grad."""

    __slots__ = ("data", "requires_grad", "grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.uid = next(_uid_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of this value with no tape history and no grad requirement."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; outputs never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_size() -> int:
    return len(_tape)


def clear_tape():
    _tape.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, fn):
    """Tape the op if grad mode is on and any input participates."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append(_Node(out, inputs, fn))
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Accumulate gradients of a scalar into every taped requires_grad tensor.

    The tape is consumed: it is cleared before returning, also on error.
    """
    if loss.data.size != 1:
        clear_tape()
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        clear_tape()
        raise ValueError("loss is detached from the tape")
    try:
        grads = {loss.uid: np.ones_like(loss.data)}
        seen = {loss.uid: loss}
        for node in reversed(_tape):
            gout = grads.pop(node.out.uid, None)
            if gout is None:
                continue
            for t, g in zip(node.inputs, node.fn(gout)):
                if g is None:
                    continue
                if t.uid in grads:
                    grads[t.uid] = grads[t.uid] + g
                else:
                    grads[t.uid] = g
                seen[t.uid] = t
        for uid, t in seen.items():
            if t.requires_grad and uid in grads:
                if t.grad is None:
                    t.grad = grads[uid]
                else:
                    t.grad = t.grad + grads[uid]
    finally:
        clear_tape()


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape),
            unbroadcast(g * a.data, b.shape),
        ),
    )


def _safe_denominator(d: np.ndarray) -> np.ndarray:
    # sign-preserving floor keeps x/0 finite; gradient wrt d is zero there
    return np.where(np.abs(d) < _DIV_FLOOR, np.copysign(_DIV_FLOOR, d), d)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    safe = _safe_denominator(b.data)
    out = Tensor(a.data / safe)

    def fn(g):
        ga = unbroadcast(g / safe, a.shape)
        gb_full = np.where(
            np.abs(b.data) < _DIV_FLOOR, 0.0, -g * a.data / (safe * safe)
        )
        return ga, unbroadcast(gb_full, b.shape)

    return _record(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * a.data * g,))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    """Natural log with the argument floored at 1e-12.

    In the floored region the forward value is constant, so the gradient
    there is zero; this matches a finite-difference probe on either side.
    """
    a = as_tensor(a)
    clamped = np.maximum(a.data, _LOG_FLOOR)
    out = Tensor(np.log(clamped))
    fn = lambda g: (np.where(a.data >= _LOG_FLOOR, g / clamped, 0.0),)
    return _record(out, (a,), fn)


def sqrt(a) -> Tensor:
    """Square root of max(x, 0); gradient is zero at and below zero."""
    a = as_tensor(a)
    out = Tensor(np.sqrt(np.maximum(a.data, 0.0)))

    def fn(g):
        pos = a.data > 0.0
        denom = np.where(pos, out.data, 1.0)
        return (np.where(pos, 0.5 * g / denom, 0.0),)

    return _record(out, (a,), fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # the two-branch form never exponentiates a positive argument
    ex = np.exp(-np.abs(a.data))
    out = Tensor(np.where(a.data >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def tsum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes_n = _normalize_axes(axes, a.ndim)
    out = Tensor(a.data.sum(axis=axes_n, keepdims=keepdims))

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_n)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), fn)


def tmean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes_n = _normalize_axes(axes, a.ndim)
    count = 1
    for ax in axes_n:
        count *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axes_n, keepdims=keepdims))

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_n)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),))


def narrow(a, idx) -> Tensor:
    """Basic (non-fancy) indexing; every selected element appears once."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def fn(g):
        gx = np.zeros(a.shape)
        gx[idx] = g
        return (gx,)

    return _record(out, (a,), fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), fn)


def pad2d(a, padding: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a [..., H, W] tensor."""
    a = as_tensor(a)
    if padding == 0:
        out = Tensor(a.data.copy())
        return _record(out, (a,), lambda g: (g,))
    widths = [(0, 0)] * (a.ndim - 2) + [(padding, padding)] * 2
    out = Tensor(np.pad(a.data, widths))
    sl = (Ellipsis, slice(padding, -padding), slice(padding, -padding))
    return _record(out, (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# linear algebra and spatial ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.matmul(a.data, b.data))

    def fn(g):
        # lift 1-D operands to matrices, differentiate, then squeeze back
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gm = g
        if a.ndim == 1 and b.ndim == 1:
            gm = g.reshape(1, 1)
        elif a.ndim == 1:
            gm = np.expand_dims(g, -2)
        elif b.ndim == 1:
            gm = np.expand_dims(g, -1)
        ga = np.matmul(gm, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gm)
        if a.ndim == 1:
            ga = ga.sum(axis=tuple(range(ga.ndim - 2)))[0]
        else:
            ga = unbroadcast(ga, a.shape)
        if b.ndim == 1:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))[:, 0]
        else:
            gb = unbroadcast(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] filters."""
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw = weight.shape[2], weight.shape[3]
    xp = np.pad(x.data, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,Cin,Ho,Wo,kh,kw]
    out_data = np.einsum("bcijuv,ocuv->boij", win, weight.data, optimize=True)
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[None, :, None, None]
    out = Tensor(out_data)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gw = np.einsum("bcijuv,boij->ocuv", win, g, optimize=True)
        gcol = np.einsum("boij,ocuv->bcijuv", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        ho, wo = g.shape[2], g.shape[3]
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += gcol[
                    :, :, :, :, u, v
                ]
        gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record(out, inputs, fn)


def _pool_windows(data: np.ndarray, kernel: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(data, (kernel, kernel),
                                                   axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [B,C,Ho,Wo,k,k]


def avg_pool2d(x, kernel: int, stride: int = None) -> Tensor:
    """Average pooling; trailing cells that do not fit a window are dropped."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    win = _pool_windows(x.data, kernel, stride)
    out = Tensor(win.mean(axis=(-2, -1)))
    ho, wo = out.shape[2], out.shape[3]

    def fn(g):
        gx = np.zeros(x.shape)
        share = g / (kernel * kernel)
        for u in range(kernel):
            for v in range(kernel):
                gx[:, :, u : u + ho * stride : stride,
                   v : v + wo * stride : stride] += share
        return (gx,)

    return _record(out, (x,), fn)


def max_pool2d(x, kernel: int, stride: int = None) -> Tensor:
    """Max pooling; the gradient routes to each window's (first) argmax."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    win = _pool_windows(x.data, kernel, stride)
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def fn(g):
        gx = np.zeros(x.shape)
        for u in range(kernel):
            for v in range(kernel):
                hit = g * (idx == u * kernel + v)
                gx[:, :, u : u + ho * stride : stride,
                   v : v + wo * stride : stride] += hit
        return (gx,)

    return _record(out, (x,), fn)


def pool2d(kind: str, x, kernel: int, stride: int = None) -> Tensor:
    if kind == "avg":
        return avg_pool2d(x, kernel, stride)
    if kind == "max":
        return max_pool2d(x, kernel, stride)
    raise ValueError(f"unknown pooling kind: {kind!r}")


def upsample_nearest(x, factor: int) -> Tensor:
    """Repeat each pixel of a [B,C,H,W] tensor into a factor x factor block."""
    x = as_tensor(x)
    out = Tensor(x.data.repeat(factor, axis=2).repeat(factor, axis=3))

    def fn(g):
        b, c, h, w = x.shape
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record(out, (x,), fn)


# ---------------------------------------------------------------------------
# composed helpers


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along one axis, shifted by the (constant) row max for stability."""
    x = as_tensor(x)
    shift = sub(x, x.data.max(axis=axis, keepdims=True))
    e = exp(shift)
    return div(e, tsum(e, axes=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = sub(x, x.data.max(axis=axis, keepdims=True))
    lse = log(tsum(exp(shift), axes=axis, keepdims=True))
    return sub(shift, lse)


def finite_difference(f, arrays, h: float = 1e-6):
    """Central-difference gradients of scalar f(list of arrays) per array."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            probe = [a.copy() for a in arrays]
            probe[k].reshape(-1)[i] += h
            hi = f(probe)
            probe[k].reshape(-1)[i] -= 2.0 * h
            lo = f(probe)
            flat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads
