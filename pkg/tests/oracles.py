"""Independent straight-line reference implementations used by the tests.

Nothing here imports the package's model, tensor, components or edits code.
Models are plain dicts of numpy arrays keyed by the checkpoint tensor names,
and a network is described as an explicit list of residual sublayers so that
block and hybrid removals are simply list deletions.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

EPS = 1e-6


# -- primitives -------------------------------------------------------------

def layer_norm(x, g, b, eps=EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def dense(x, w, b):
    return x @ w.T + b


def conv(x, w, b, stride, pad):
    """Direct loop convolution, x (C, H, W), w (O, C, k, k)."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.empty((O, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            win = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, i, j] = np.tensordot(w, win, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


def depthwise(x, w, b):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.empty_like(x)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[c, i, j] = np.sum(xp[c, i:i + 3, j:j + 3] * w[c, 0]) + b[c]
    return out


# -- plain ViT for one image ----------------------------------------------------

def patches(img, P):
    C, H, W = img.shape
    rows = []
    for i in range(H // P):
        for j in range(W // P):
            rows.append(img[:, i * P:(i + 1) * P, j * P:(j + 1) * P].reshape(-1))
    return np.array(rows)


def attention(w, k, x, heads, zero=(), sr=None):
    """One attention sublayer; channels in ``zero`` have their q/k/v outputs set to 0."""
    p = f"blocks.{k}.attn."
    h = layer_norm(x, w[f"blocks.{k}.norm1.weight"], w[f"blocks.{k}.norm1.bias"])
    kv = h if sr is None else sr(h)
    q = dense(h, w[p + "q.weight"], w[p + "q.bias"])
    kk = dense(kv, w[p + "k.weight"], w[p + "k.bias"])
    v = dense(kv, w[p + "v.weight"], w[p + "v.bias"])
    for j in zero:
        q[:, j] = kk[:, j] = v[:, j] = 0.0
    A = q.shape[1]
    dh = A // heads
    out = np.zeros_like(q)
    for hd in range(heads):
        s = slice(hd * dh, (hd + 1) * dh)
        att = softmax(q[:, s] @ kk[:, s].T / math.sqrt(dh))
        out[:, s] = att @ v[:, s]
    return x + dense(out, w[p + "proj.weight"], w[p + "proj.bias"])


def mlp(w, k, x, dw=None):
    p = f"blocks.{k}."
    h = dense(layer_norm(x, w[p + "norm2.weight"], w[p + "norm2.bias"]), w[p + "mlp.fc1.weight"], w[p + "mlp.fc1.bias"])
    if dw is not None:
        h = dw(h)
    return x + dense(gelu(h), w[p + "mlp.fc2.weight"], w[p + "mlp.fc2.bias"])


def vit_sublayers(depth):
    return [(kind, k) for k in range(depth) for kind in ("attn", "ffn")]


def vit_logits(w, img, P, heads, sublayers, zero=None):
    """Logits of one image; ``heads`` maps block -> head count, ``zero`` block -> masked channels."""
    zero = zero or {}
    x = dense(patches(img, P), w["patch_embed.weight"], w["patch_embed.bias"])
    x = np.vstack([w["cls_token"], x]) + w["pos_embed"]
    for kind, k in sublayers:
        x = attention(w, k, x, heads[k], zero.get(k, ())) if kind == "attn" else mlp(w, k, x)
    x = layer_norm(x, w["norm.weight"], w["norm.bias"])
    return dense(x[0], w["head.weight"], w["head.bias"])


def vit_batch(w, images, P, heads, sublayers, zero=None):
    return np.array([vit_logits(w, im, P, heads, sublayers, zero) for im in images])


# -- staged (PVT-style) model for one image --------------------------------------

def staged_logits(w, img, stages):
    """``stages`` is a list of dicts: blocks (global ids), heads, sr, kernel, stride."""
    g = img
    for s, st in enumerate(stages):
        g = conv(g, w[f"stages.{s}.patch_embed.weight"], w[f"stages.{s}.patch_embed.bias"], st["stride"],
                 st["kernel"] // 2)
        D, H, W = g.shape
        x = layer_norm(g.reshape(D, -1).T, w[f"stages.{s}.patch_norm.weight"], w[f"stages.{s}.patch_norm.bias"])
        for k in st["blocks"]:
            p = f"blocks.{k}.attn."

            def sr(h, k=k, p=p, H=H, W=W):
                y = conv(h.T.reshape(-1, H, W), w[p + "sr.weight"], w[p + "sr.bias"], st["sr"], 0)
                return layer_norm(y.reshape(y.shape[0], -1).T, w[p + "sr_norm.weight"], w[p + "sr_norm.bias"])

            def dw(h, k=k, H=H, W=W):
                y = depthwise(h.T.reshape(-1, H, W), w[f"blocks.{k}.mlp.dwconv.weight"], w[f"blocks.{k}.mlp.dwconv.bias"])
                return y.reshape(y.shape[0], -1).T

            x = attention(w, k, x, st["heads"], (), sr if st["sr"] > 1 else None)
            x = mlp(w, k, x, dw)
        x = layer_norm(x, w[f"stages.{s}.norm.weight"], w[f"stages.{s}.norm.bias"])
        g = x.T.reshape(-1, H, W)
    return dense(x.mean(axis=0), w["head.weight"], w["head.bias"])


# -- hand-sliced channel removals (vanilla) --------------------------------------

def drop_shortcut(w, depth, j):
    """Remove embedding channel ``j`` everywhere it appears."""
    w = dict(w)
    cut = lambda name, ax: w.__setitem__(name, np.delete(w[name], j, axis=ax))  # noqa: E731
    cut("patch_embed.weight", 0)
    cut("patch_embed.bias", 0)
    cut("cls_token", 1)
    cut("pos_embed", 1)
    for k in range(depth):
        p = f"blocks.{k}."
        for n in ("norm1.weight", "norm1.bias", "norm2.weight", "norm2.bias", "attn.proj.bias", "mlp.fc2.bias"):
            cut(p + n, 0)
        for n in ("attn.q.weight", "attn.k.weight", "attn.v.weight", "mlp.fc1.weight"):
            cut(p + n, 1)
        cut(p + "attn.proj.weight", 0)
        cut(p + "mlp.fc2.weight", 0)
    cut("norm.weight", 0)
    cut("norm.bias", 0)
    cut("head.weight", 1)
    return w


def drop_hidden(w, k, j):
    """Remove FFN hidden channel ``j`` of block ``k``."""
    w = dict(w)
    p = f"blocks.{k}.mlp."
    w[p + "fc1.weight"] = np.delete(w[p + "fc1.weight"], j, axis=0)
    w[p + "fc1.bias"] = np.delete(w[p + "fc1.bias"], j)
    w[p + "fc2.weight"] = np.delete(w[p + "fc2.weight"], j, axis=1)
    return w


def zero_hidden(w, k, js):
    w = dict(w)
    p = f"blocks.{k}.mlp."
    for name in ("fc1.weight", "fc1.bias"):
        a = w[p + name].copy()
        a[list(js)] = 0.0
        w[p + name] = a
    a = w[p + "fc2.weight"].copy()
    a[:, list(js)] = 0.0
    w[p + "fc2.weight"] = a
    return w


def zero_qkv_rows(w, k, js):
    w = dict(w)
    for n in ("q", "k", "v"):
        for leaf in ("weight", "bias"):
            name = f"blocks.{k}.attn.{n}.{leaf}"
            a = w[name].copy()
            a[list(js)] = 0.0
            w[name] = a
    return w


def zero_shortcut(w, depth, j):
    """Zero (not remove) every parameter slice that writes embedding channel ``j``."""
    w = {n: a.copy() for n, a in w.items()}
    w["patch_embed.weight"][j] = 0.0
    w["patch_embed.bias"][j] = 0.0
    w["cls_token"][:, j] = 0.0
    w["pos_embed"][:, j] = 0.0
    for k in range(depth):
        p = f"blocks.{k}."
        w[p + "attn.proj.weight"][j] = 0.0
        w[p + "attn.proj.bias"][j] = 0.0
        w[p + "mlp.fc2.weight"][j] = 0.0
        w[p + "mlp.fc2.bias"][j] = 0.0
    return w


# -- brute-force importance --------------------------------------------------------

def kl_sum(ref_logits, logits):
    lq, lp = log_softmax(ref_logits), log_softmax(logits)
    return float(np.sum(np.exp(lq) * (lq - lp)))


def brute_force_table(w, images, P, depth, heads, dim, hidden):
    """Every channel and block-candidate score, rebuilding each perturbed model from scratch."""
    hmap = {k: heads for k in range(depth)}
    full = vit_sublayers(depth)
    ref = vit_batch(w, images, P, hmap, full)
    ch, blocks = {}, {}
    for j in range(dim):
        ch[(1, "net", j)] = kl_sum(ref, vit_batch(drop_shortcut(w, depth, j), images, P, hmap, full))
    for k in range(depth):
        for j in range(dim):
            ch[(2, f"block{k}", j)] = kl_sum(ref, vit_batch(w, images, P, hmap, full, {k: (j,)}))
        for j in range(hidden):
            ch[(3, f"block{k}", j)] = kl_sum(ref, vit_batch(drop_hidden(w, k, j), images, P, hmap, full))
    for k in range(depth):
        subl = [s for s in full if s[1] != k]
        blocks[f"block:{k}"] = kl_sum(ref, vit_batch(w, images, P, hmap, subl))
    for k in range(depth - 1):
        subl = [s for s in full if s not in (("ffn", k), ("attn", k + 1))]
        blocks[f"hybrid:{k}"] = kl_sum(ref, vit_batch(w, images, P, hmap, subl))
    return ch, blocks


# -- head-strategy enumeration -----------------------------------------------------

def enumerate_head_keep(scores, h_b, d_t, h_t, strategy):
    """Survivors by exhaustive search over every drop set of the admissible shape.

    Within each group the drop set is the unique combination in which every
    dropped channel ranks strictly below every kept one, ranking by score
    and, among equal scores, treating the higher index as less important.
    """
    from itertools import combinations

    scores = list(scores)
    d_b = len(scores)
    removed = d_b - d_t
    if strategy == 2:
        size, n = d_b, removed
    elif strategy == 1:
        size, n = d_b // h_t, removed // h_t
    else:
        size, n = d_b // h_b, removed // h_b
    rank = lambda i: (scores[i], -i)  # noqa: E731
    dropped = set()
    for start in range(0, d_b, size):
        grp = range(start, start + size)
        hits = [set(c) for c in combinations(grp, n)
                if all(rank(i) < rank(j) for i in c for j in grp if j not in c)]
        assert len(hits) == 1
        dropped |= hits[0]
    return [i for i in range(d_b) if i not in dropped]
