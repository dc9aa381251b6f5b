"""Minimal reverse-mode autodiff engine over numpy arrays.

Only the operations the saliency network needs are provided. Every
differentiable op records a closure mapping the output adjoint to input
adjoints; :func:`backward` replays those closures in reverse creation
order, so each recorded op is visited exactly once.

Conventions used throughout:

* images are NCHW, convolution kernels are OIKK (out, in, k, k);
  transposed-convolution kernels are IOKK, i.e. the same array layout as
  the forward convolution whose adjoint they compute;
* padding is zero padding;
* bilinear resizing samples at half-pixel centres (``align_corners=False``);
* max pooling routes the gradient to the first row-major argmax.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_default_dtype = np.float32
_grad_enabled = True
_checked = False
_counter = itertools.count()


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Reject NaN/Inf at every op boundary inside the block."""
    global _checked
    prev = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = prev


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._seq = -1
        self._op = "leaf"
        if _checked:
            _check_finite(arr, "leaf")

    # shape helpers -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # operators -------------------------------------------------------------
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
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out._seq = -1
    out._op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        out._seq = next(_counter)
    if _checked:
        _check_finite(data, op)
    return out


def _tape(loss: Tensor) -> list:
    """Recorded ops reachable from ``loss``, latest first."""
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes = [t for t in seen.values() if t._backward is not None]
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``inputs`` that the loss does not depend on receive a
    zero gradient. Gradients accumulate across calls until reset.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if inputs is not None:
        for t in inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    grads = {id(loss): seed}
    for node in _tape(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


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
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    """Logistic function, clipped so the result is strictly inside (0, 1)."""
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_POINTWISE = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise(a, fn: str) -> Tensor:
    try:
        return _POINTWISE[fn](a)
    except KeyError:
        raise ValueError(f"unknown pointwise function {fn!r}; expected one of {sorted(_POINTWISE)}") from None


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat extent mismatch: {ref} vs {t.shape} on axis {axis}")
    if len(ts) == 1:
        return ts[0]
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """y = x W + b for x of shape (N, in) and W of shape (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# convolutions


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, c, k, k, ho, wo),
                      (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
                      writeable=False)


def _scatter_windows(dcols: np.ndarray, out_shape: tuple, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_windows`; dcols is laid out (C, K, K, N, Ho, Wo)."""
    n, c, hp, wp = out_shape
    buf = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    _, k, _, _, ho, wo = dcols.shape
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            buf[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
    return buf.transpose(1, 0, 2, 3)


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input and OIKK kernel, zero padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be positive, got stride={stride}, dilation={dilation}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ci}")
    if k != k2:
        raise ValueError(f"conv2d expects square kernels, got {k}x{k2}")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} with padding {padding} too small for "
                         f"kernel {k} at dilation {dilation}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # im2col as a contiguous (C*K*K, N*Ho*Wo) matrix, reused by both gradients
    cols = np.ascontiguousarray(_windows(xp, k, stride, dilation, ho, wo).transpose(1, 2, 3, 0, 4, 5))
    cols = cols.reshape(c * k * k, n * ho * wo)
    wd = kernel.data
    w2 = wd.reshape(o, c * k * k)
    out = (w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + as_tensor(bias).data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = _scatter_windows(dcols, xp.shape, stride, dilation)
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        if kernel.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if bias is not None:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    return _make(out, parents, bw if bias is not None else (lambda g: bw(g)[:2]), "conv2d")


def conv2d_transpose(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; kernel is (C_in, C_out, K, K).

    Output extent per axis is ``(H - 1) * stride - 2 * padding + K``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d_transpose expects NCHW input and IOKK kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    ci, co, k, _ = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d_transpose channel mismatch: input has {c} channels, kernel expects {ci}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d_transpose: padding {padding} removes the whole output")
    xd, wd = x.data, kernel.data
    dcols = np.tensordot(wd, xd, axes=([0], [1]))
    full = _scatter_windows(dcols, (n, co, hf, wf), stride, 1)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + as_tensor(bias).data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _windows(gp, k, stride, 1, h, w)
        gx = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(xd, cols, axes=([0, 2, 3], [0, 4, 5])) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    return _make(out, parents, bw if bias is not None else (lambda g: bw(g)[:2]), "conv2d_transpose")


def max_pool2d(x, size: int, stride: int | None = None) -> Tensor:
    """Max over size x size windows; ties route the gradient to the first argmax."""
    x = as_tensor(x)
    stride = size if stride is None else stride
    if size < 1 or stride < 1:
        raise ValueError(f"pool size and stride must be positive, got size={size}, stride={stride}")
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ValueError(f"max_pool2d window {size} larger than input {h}x{w}")
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    xd = x.data
    sn, sc, sh, sw = xd.strides
    win = as_strided(xd, (n, c, ho, wo, size, size), (sn, sc, sh * stride, sw * stride, sh, sw),
                     writeable=False).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(xd)
        for idx in range(size * size):
            i, j = divmod(idx, size)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == idx)
        return (gx,)

    return _make(out, (x,), bw, "max_pool2d")


def unfold(x, window: int) -> Tensor:
    """Zero-padded square neighbourhoods: (N, C, H, W) -> (N, C, window**2, H, W).

    Support index ``i * window + j`` holds the value at offset
    ``(i - window // 2, j - window // 2)`` from each location.
    """
    x = as_tensor(x)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"unfold window must be a positive odd integer, got {window}")
    n, c, h, w = x.shape
    r = window // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    out = _windows(xp, window, 1, 1, h, w).reshape(n, c, window * window, h, w)

    def bw(g):
        dcols = g.reshape(n, c, window, window, h, w).transpose(1, 2, 3, 0, 4, 5)
        gxp = _scatter_windows(dcols, xp.shape, 1, 1)
        return (np.ascontiguousarray(gxp[:, :, r:r + h, r:r + w]),)

    return _make(out, (x,), bw, "unfold")


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """(out_size, in_size) interpolation matrix, half-pixel centres.

    Output sample ``o`` reads source coordinate ``(o + 0.5) * in/out - 0.5``,
    clamped to ``[0, in - 1]``, and blends its two integer neighbours.
    """
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), in_size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(dtype)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    my = bilinear_matrix(h, out_h, x.dtype)
    mx = bilinear_matrix(w, out_w, x.dtype)
    out = my @ x.data @ mx.T
    return _make(out, (x,), lambda g: (my.T @ g @ mx,), "bilinear_resize")
