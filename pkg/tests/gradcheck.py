"""Central finite-difference gradient checks against the tape."""
from __future__ import annotations

import numpy as np

from vitprune.tensor import Tape, Tensor


def numeric_grad(f, arrays, i, h=1e-6):
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        up = [a.copy() for a in base]
        dn = [a.copy() for a in base]
        up[i][idx] += h
        dn[i][idx] -= h
        g[idx] = (f(*[Tensor(a) for a in up]).item() - f(*[Tensor(a) for a in dn]).item()) / (2 * h)
    return g


def analytic_grads(f, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(*ts)
    grads = tape.backward(loss)
    return [grads[t] for t in ts]


def max_rel_err(f, arrays, h=1e-6):
    """Largest relative error over all inputs; denominators floored at 1."""
    worst = 0.0
    an = analytic_grads(f, arrays)
    for i, a in enumerate(an):
        num = numeric_grad(f, arrays, i, h)
        err = np.abs(a - num) / np.maximum(1.0, np.abs(num))
        worst = max(worst, float(err.max()))
    return worst
