"""Kernel backend selection.

The compiled extension is used when importable; ``VITPRUNE_BACKEND=python``
forces the numpy fallback and ``VITPRUNE_BACKEND=compiled`` makes a missing
extension an import error.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

_requested = os.environ.get("VITPRUNE_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(f"VITPRUNE_BACKEND must be auto, compiled or python, got {_requested!r}")

_compiled = None
if _requested != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _requested == "compiled":
            raise

_impl = _compiled if _compiled is not None else _fallback
_threads = 1


def name() -> str:
    return "compiled" if _impl is _compiled else "python"


def available() -> list[str]:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def use(backend: str) -> None:
    """Switch kernels at runtime ('compiled' or 'python')."""
    global _impl
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _compiled
    elif backend == "python":
        _impl = _fallback
    else:
        raise ValueError(f"unknown backend {backend!r}")


def set_num_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_num_threads() -> int:
    return _threads


def _c(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D or batched 3-D product with a fixed per-element summation order."""
    if a.shape[-1] != b.shape[-2] or a.ndim != b.ndim or a.ndim not in (2, 3) or (
        a.ndim == 3 and a.shape[0] != b.shape[0]
    ):
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim == 2:
        return _impl.matmul(_c(a)[None], _c(b)[None], _threads)[0]
    return _impl.matmul(_c(a), _c(b), _threads)


def layer_norm_forward(x2d, gamma, beta, eps):
    return _impl.layer_norm_forward(_c(x2d), _c(gamma), _c(beta), float(eps), _threads)


def layer_norm_backward(g2d, x2d, gamma, mean, rstd):
    return _impl.layer_norm_backward(_c(g2d), _c(x2d), _c(gamma), mean, rstd, _threads)


def softmax(x2d):
    return _impl.softmax(_c(x2d), _threads)


def gelu(x, with_grad=False):
    return _impl.gelu(_c(x), with_grad, _threads)
