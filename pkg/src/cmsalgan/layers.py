"""Composite layers: residual blocks, bidirectional row/column LSTM scans and
softmax attention pooling.

Parameters live in a flat ``dict[str, Tensor]``; each layer reads the
entries under a name prefix, e.g. ``p[prefix + "conv1.w"]``.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make

Params = dict


def _he(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(T.get_default_dtype())


def _zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=T.get_default_dtype())


def init_conv(p: Params, name: str, rng, cin: int, cout: int, k: int, gain: float = 1.0,
              bias: bool = True, zero: bool = False) -> None:
    shape = (cout, cin, k, k)
    p[name + ".w"] = _zeros(shape) if zero else _he(rng, shape, cin * k * k, gain)
    if bias:
        p[name + ".b"] = _zeros((cout,))


def init_deconv(p: Params, name: str, rng, cin: int, cout: int, k: int) -> None:
    # each output pixel receives exactly one tap when k == stride
    p[name + ".w"] = _he(rng, (cin, cout, k, k), cin)
    p[name + ".b"] = _zeros((cout,))


def init_linear(p: Params, name: str, rng, fin: int, fout: int) -> None:
    p[name + ".w"] = (rng.standard_normal((fin, fout)) / np.sqrt(fin)).astype(T.get_default_dtype())
    p[name + ".b"] = _zeros((fout,))


def conv(p: Params, name: str, x: Tensor, stride: int = 1, padding: int | None = None,
         dilation: int = 1) -> Tensor:
    w = p[name + ".w"]
    k = w.shape[-1]
    if padding is None:
        padding = dilation * (k - 1) // 2
    return T.conv2d(x, w, p.get(name + ".b"), stride=stride, padding=padding, dilation=dilation)


# ---------------------------------------------------------------------------
# residual blocks


def init_residual_block(p: Params, prefix: str, rng, cin: int, cout: int, stride: int = 1,
                        kind: str = "basic", zero_branch: bool = False) -> None:
    """Basic (two 3x3) or bottleneck (1x1, 3x3, 1x1) residual block weights."""
    if kind == "basic":
        init_conv(p, prefix + "conv1", rng, cin, cout, 3)
        init_conv(p, prefix + "conv2", rng, cout, cout, 3, gain=0.5, zero=zero_branch)
    elif kind == "bottleneck":
        mid = max(cout // 4, 1)
        init_conv(p, prefix + "conv1", rng, cin, mid, 1)
        init_conv(p, prefix + "conv2", rng, mid, mid, 3)
        init_conv(p, prefix + "conv3", rng, mid, cout, 1, gain=0.5, zero=zero_branch)
    else:
        raise ValueError(f"unknown residual block kind {kind!r}")
    if cin != cout or stride != 1:
        init_conv(p, prefix + "short", rng, cin, cout, 1, bias=False)


def residual_block(p: Params, prefix: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """relu(F(x) + shortcut(x)); dilation applies to the 3x3 convolutions."""
    cin = x.shape[1]
    w1 = p[prefix + "conv1.w"]
    if w1.shape[1] != cin:
        raise ValueError(f"residual block {prefix!r} expects {w1.shape[1]} input channels, got {cin}")
    if prefix + "conv3.w" in p:
        y = T.relu(conv(p, prefix + "conv1", x))
        y = T.relu(conv(p, prefix + "conv2", y, stride=stride, dilation=dilation))
        y = conv(p, prefix + "conv3", y)
    else:
        y = T.relu(conv(p, prefix + "conv1", x, stride=stride, dilation=dilation))
        y = conv(p, prefix + "conv2", y, dilation=dilation)
    if prefix + "short.w" in p:
        s = T.conv2d(x, p[prefix + "short.w"], stride=stride)
    else:
        s = x
    return T.relu(y + s)


# ---------------------------------------------------------------------------
# recurrent scanning


def init_lstm(p: Params, prefix: str, rng, cin: int, hidden: int, zero: bool = False) -> None:
    dt = T.get_default_dtype()
    if zero:
        p[prefix + "wx"] = np.zeros((cin, 4 * hidden), dt)
        p[prefix + "wh"] = np.zeros((hidden, 4 * hidden), dt)
    else:
        p[prefix + "wx"] = (rng.standard_normal((cin, 4 * hidden)) / np.sqrt(cin)).astype(dt)
        p[prefix + "wh"] = (rng.standard_normal((hidden, 4 * hidden)) / np.sqrt(hidden)).astype(dt)
    p[prefix + "b"] = np.zeros((4 * hidden,), dt)


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_sweep(x, wx, wh, b, reverse: bool = False) -> Tensor:
    """Run one LSTM over sequences x of shape (B, T, C); returns (B, T, hidden).

    Gate layout along the 4*hidden axis is input, forget, candidate, output:
    ``c_t = f*c_{t-1} + i*g``, ``h_t = o*tanh(c_t)``, zero initial states.
    With ``reverse`` the sequence is consumed from the last step backwards
    and each hidden state is written back at its own position.
    """
    x, wx, wh, b = (T.as_tensor(t) for t in (x, wx, wh, b))
    xd, wxd, whd, bd = x.data, wx.data, wh.data, b.data
    nb, nt, _ = xd.shape
    hid = whd.shape[0]
    order = range(nt - 1, -1, -1) if reverse else range(nt)
    zx = xd @ wxd + bd
    dt = np.result_type(xd, wxd)
    hs = np.zeros((nb, nt, hid), dt)
    cs = np.zeros((nb, nt, hid), dt)
    gates = np.zeros((nb, nt, 4 * hid), dt)
    h = np.zeros((nb, hid), dt)
    c = np.zeros((nb, hid), dt)
    for t in order:
        z = zx[:, t] + h @ whd
        i = _sig(z[:, :hid])
        f = _sig(z[:, hid:2 * hid])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        o = _sig(z[:, 3 * hid:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        cs[:, t] = c
        hs[:, t] = h

    steps = list(order)

    def bw(gout):
        dz = np.zeros_like(gates)
        hprev = np.zeros_like(hs)
        dh_next = np.zeros((nb, hid), dt)
        dc_next = np.zeros((nb, hid), dt)
        for n in range(len(steps) - 1, -1, -1):
            t = steps[n]
            c_prev = cs[:, steps[n - 1]] if n else 0.0
            if n:
                hprev[:, t] = hs[:, steps[n - 1]]
            i, f, g, o = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t])
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz[:, t] = np.concatenate([dc * g * i * (1.0 - i),
                                       dc * c_prev * f * (1.0 - f),
                                       dc * i * (1.0 - g * g),
                                       dh * tc * o * (1.0 - o)], axis=1)
            dc_next = dc * f
            dh_next = dz[:, t] @ whd.T
        gx = dz @ wxd.T
        gwx = np.tensordot(xd, dz, axes=([0, 1], [0, 1]))
        gwh = np.tensordot(hprev, dz, axes=([0, 1], [0, 1]))
        return gx, gwx, gwh, dz.sum(axis=(0, 1))

    return _make(hs, (x, wx, wh, b), bw, "lstm_sweep")


def init_directional_scan(p: Params, prefix: str, rng, cin: int, hidden: int, zero: bool = False) -> None:
    init_lstm(p, prefix + "lr.", rng, cin, hidden, zero)
    init_lstm(p, prefix + "rl.", rng, cin, hidden, zero)
    init_lstm(p, prefix + "tb.", rng, 2 * hidden, hidden, zero)
    init_lstm(p, prefix + "bt.", rng, 2 * hidden, hidden, zero)


def _sweep(p, prefix, seq, reverse):
    return lstm_sweep(seq, p[prefix + "wx"], p[prefix + "wh"], p[prefix + "b"], reverse)


def directional_scan(p: Params, prefix: str, x: Tensor) -> Tensor:
    """Bidirectional LSTM over rows, then over columns of the row result.

    (N, C, H, W) -> (N, 2*hidden, H, W).
    """
    n, c, h, w = x.shape
    rows = x.transpose(0, 2, 3, 1).reshape(n * h, w, c)
    rows = T.concat([_sweep(p, prefix + "lr.", rows, False), _sweep(p, prefix + "rl.", rows, True)], axis=2)
    c2 = rows.shape[2]
    cols = rows.reshape(n, h, w, c2).transpose(0, 2, 1, 3).reshape(n * w, h, c2)
    cols = T.concat([_sweep(p, prefix + "tb.", cols, False), _sweep(p, prefix + "bt.", cols, True)], axis=2)
    return cols.reshape(n, w, h, c2).transpose(0, 3, 2, 1)


# ---------------------------------------------------------------------------
# attention


def attention_logits(p: Params, name: str, context: Tensor) -> Tensor:
    """1x1 convolution producing K attention logits per location."""
    return conv(p, name, context)


def attention_weights(logits: Tensor) -> Tensor:
    return T.softmax(logits, axis=1)


def attention_pool(features: Tensor, logits: Tensor, mode: str = "global", window: int = 7) -> Tensor:
    """Attended feature at every location: sum_i softmax(logits)_i * f_i.

    ``global``: the support is every location of the map, K = H*W, with
    support index ``h * W + w``. ``local``: the support is the zero-padded
    ``window x window`` neighbourhood, K = window**2 (see :func:`tensor.unfold`).
    """
    n, c, h, w = features.shape
    k = logits.shape[1]
    if logits.shape[0] != n or logits.shape[2:] != (h, w):
        raise ValueError(f"logits {logits.shape} do not match features {features.shape}")
    alpha = attention_weights(logits)
    if mode == "global":
        if k != h * w:
            raise ValueError(f"global attention needs K = H*W = {h * w}, got {k}")
        out = T.matmul(features.reshape(n, c, h * w), alpha.reshape(n, k, h * w))
        return out.reshape(n, c, h, w)
    if mode == "local":
        if k != window * window:
            raise ValueError(f"local attention needs K = window**2 = {window * window}, got {k}")
        patches = T.unfold(features, window)
        return (patches * alpha.reshape(n, 1, k, h, w)).sum(axis=2)
    raise ValueError(f"unknown attention mode {mode!r}")
