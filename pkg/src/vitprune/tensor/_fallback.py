"""Pure-numpy versions of the compiled kernels (same signatures).

Results agree with the compiled kernels to rounding; they are not bit-equal
because BLAS picks its own summation order.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT_2PI = 0.3989422804014327


def matmul(a, b, nthreads=1):
    return np.matmul(a, b)


def layer_norm_forward(x, g, b, eps, nthreads=1):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    rstd = rstd.astype(x.dtype, copy=False)
    y = xc * rstd[:, None] * g + b
    return y, mean, rstd


def layer_norm_backward(gy, x, g, mean, rstd, nthreads=1):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = gy * g
    s1 = dxhat.mean(axis=1, keepdims=True)
    s2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (dxhat - s1 - xhat * s2)


def softmax(x, nthreads=1):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gelu(x, with_grad=False, nthreads=1):
    cdf = 0.5 * (1.0 + erf(x * np.sqrt(0.5)))
    y = x * cdf
    dy = None
    if with_grad:
        dy = cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return y.astype(x.dtype, copy=False), None if dy is None else dy.astype(x.dtype, copy=False)
