"""Differentiable primitives.

Every op computes its value eagerly with numpy or the compiled kernels and,
when an input requires gradients under an active tape, records a
vector-Jacobian product for the backward pass.
"""
from __future__ import annotations

import numpy as np

from . import backend
from .core import Tensor, make


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data + b.data
    return make("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data - b.data
    return make("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make("mul", out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n) or batched (B, m, k) @ (B, k, n)."""
    a, b = _t(a), _t(b)
    out = backend.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = backend.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = backend.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return make("matmul", out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x of shape (..., in) and weight (out, in)."""
    x, weight = _t(x), _t(weight)
    lead = x.shape[:-1]
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = backend.matmul(x2, weight.data.T)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[0])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = backend.matmul(g2, weight.data).reshape(x.shape) if x.requires_grad else None
        gw = backend.matmul(g2.T, x2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make("linear", out, inputs, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make("permute", out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return make("getitem", out, (x,), vjp)


def concat(xs, axis: int = 0) -> Tensor:
    xs = tuple(_t(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make("concat", out, xs, vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (biased variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    x2 = x.data.reshape(-1, d)
    y, mu, rstd = backend.layer_norm_forward(x2, gamma.data, beta.data, eps)

    def vjp(g):
        g2 = g.reshape(-1, d)
        gx = backend.layer_norm_backward(g2, x2, gamma.data, mu, rstd).reshape(x.shape) if x.requires_grad else None
        gg = gb = None
        if gamma.requires_grad:
            xhat = (x2 - mu[:, None]) * rstd[:, None]
            gg = (g2 * xhat).sum(axis=0)
        if beta.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gg, gb

    return make("layer_norm", y.reshape(x.shape), (x, gamma, beta), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    n = x.shape[-1]
    y = backend.softmax(x.data.reshape(-1, n)).reshape(x.shape)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make("softmax", y, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    """Log-probabilities over the last axis, computed in log space."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return make("log_softmax", y, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) via erf."""
    y, dy = backend.gelu(x.data, with_grad=x.requires_grad)
    return make("gelu", y, (x,), lambda g: (g * dy,))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution, x (B, C, H, W), weight (O, C, k, k), via im2col."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = backend.matmul(cols, wmat.T)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = backend.matmul(g2, wmat).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = backend.matmul(g2.T, cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make("conv2d", out, inputs, vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int = 1) -> Tensor:
    """Per-channel stride-1 convolution, x (B, C, H, W), weight (C, 1, k, k)."""
    B, C, H, W = x.shape
    k = weight.shape[-1]
    if weight.shape != (C, 1, k, k):
        raise ValueError(f"depthwise_conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    w = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + Ho, j:j + Wo] * w[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + Ho, j:j + Wo] += g * w[None, :, i, j, None, None]
            gx = np.ascontiguousarray(dxp[:, :, padding:padding + H, padding:padding + W])
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = (g * xp[:, :, i:i + Ho, j:j + Wo]).sum(axis=(0, 2, 3))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make("depthwise_conv2d", out, inputs, vjp)
