"""Differentiable primitives.

Images use NCHW layout. Dense weights are stored ``(out, in)``, convolution
weights ``(out, in, k, k)`` and transposed-convolution weights ``(in, out, k, k)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _check(cond: bool, op: str, a, b) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcastable(a: tuple, b: tuple) -> bool:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        return False
    return True


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(_broadcastable(a.shape, b.shape), "add", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check(_broadcastable(a.shape, b.shape), "mul", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), back, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


SIGMOID_CLIP = 30.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.clip(z, -SIGMOID_CLIP, SIGMOID_CLIP)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; logits beyond +-30 are clipped so outputs stay inside (0, 1)."""
    s = _sigmoid(x.data)
    inside = np.abs(x.data) <= SIGMOID_CLIP
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s) * inside,), "sigmoid")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


# ----------------------------------------------------------------------- dense


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T (+ bias)`` for ``x`` of shape (batch, in)."""
    _check(x.data.ndim == 2 and weight.data.ndim == 2 and x.shape[1] == weight.shape[1], "dense", x.shape, weight.shape)
    out = x.data @ weight.data.T
    y = make_result(out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data), "dense")
    return y if bias is None else add_bias(y, bias)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D NCHW input) bias."""
    if x.data.ndim == 2:
        _check(bias.shape == (x.shape[1],), "add_bias", x.shape, bias.shape)
        return make_result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")
    _check(x.data.ndim == 4 and bias.shape == (x.shape[1],), "add_bias", x.shape, bias.shape)
    out = x.data + bias.data[None, :, None, None]
    return make_result(out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding."""
    _check(x.data.ndim == 4 and weight.data.ndim == 4 and x.shape[1] == weight.shape[1], "conv2d", x.shape, weight.shape)
    k = weight.shape[2]
    _check(weight.shape[3] == k, "conv2d", x.shape, weight.shape)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    _check(xp.shape[2] >= k and xp.shape[3] >= k, "conv2d", x.shape, weight.shape)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, Cin, Ho, Wo, k, k
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    ho, wo = out.shape[2:]

    def back(g):
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho, j : j + wo] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j])
        dx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3]]
        return dx, dw

    y = make_result(np.ascontiguousarray(out), (x, weight), back, "conv2d")
    return y if bias is None else add_bias(y, bias)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; output side is ``(in - 1) * stride - 2 * padding + k``."""
    _check(x.data.ndim == 4 and weight.data.ndim == 4 and x.shape[1] == weight.shape[0], "conv_transpose2d", x.shape, weight.shape)
    b, _, h, w = x.shape
    cout, k = weight.shape[1], weight.shape[2]
    s, p = stride, padding
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    _check(hf - 2 * p > 0 and wf - 2 * p > 0, "conv_transpose2d", x.shape, weight.shape)
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # B, H, W, Cout, k, k
    full = np.zeros((b, cout, hf, wf))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + s * (h - 1) + 1 : s, j : j + s * (w - 1) + 1 : s] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, p : hf - p, p : wf - p]

    def back(g):
        gfull = np.zeros((b, cout, hf, wf))
        gfull[:, :, p : hf - p, p : wf - p] = g
        dcols = np.empty_like(cols)
        for i in range(k):
            for j in range(k):
                dcols[..., i, j] = gfull[:, :, i : i + s * (h - 1) + 1 : s, j : j + s * (w - 1) + 1 : s].transpose(0, 2, 3, 1)
        dx = np.tensordot(dcols, weight.data, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(x.data, dcols, axes=([0, 2, 3], [0, 1, 2]))
        return dx, dw

    y = make_result(np.ascontiguousarray(out), (x, weight), back, "conv_transpose2d")
    return y if bias is None else add_bias(y, bias)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial sides must be divisible by ``size``."""
    b, c, h, w = x.shape
    _check(h % size == 0 and w % size == 0, "max_pool2d", x.shape, (size, size))
    ho, wo = h // size, w // size
    blocks = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gb,)

    return make_result(out, (x,), back, "max_pool2d")


# ---------------------------------------------------------------------- losses


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, (x,), back, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    _check(logits.data.ndim == 2 and labels.shape == (logits.shape[0],), "softmax_cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsum
    probs = np.exp(z - logsum[:, None])

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return make_result(np.asarray(-logp.mean()), (logits,), back, "softmax_cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _check(pred.shape == target.shape, "mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        d = diff * (2.0 * float(g) / n)
        return d, -d

    return make_result(np.asarray(np.mean(diff * diff)), (pred, target), back, "mse")
