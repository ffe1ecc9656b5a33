"""Vision transformer forward pass (plain and staged variants).

Weights live in a flat ``name -> array`` mapping whose keys and shapes are
fixed by :func:`vitprune.arch.shape_table`. Forward functions accept either
raw arrays or :class:`~vitprune.tensor.Tensor` leaves, so the same code
serves inference, scoring and training under a tape.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .arch import STAGED, VANILLA, ArchSpec, shape_table
from .tensor import Tensor


@dataclass(frozen=True)
class Model:
    """An architecture plus its weights. Arrays are treated as read-only."""

    spec: ArchSpec
    weights: Mapping[str, np.ndarray]

    def params(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(w, requires_grad=requires_grad, name=n) for n, w in self.weights.items()}

    @property
    def num_params(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def fingerprint(self) -> str:
        return fingerprint(self.spec, self.weights)


def fingerprint(spec: ArchSpec, weights: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over the canonical spec, the tensor table and the little-endian tensor bytes."""
    h = hashlib.sha256()
    h.update(spec.canonical_json().encode())
    for name in shape_table(spec):
        w = weights[name]
        h.update(f"\n{name}:{w.dtype.str}:{','.join(map(str, w.shape))}".encode())
        h.update(np.ascontiguousarray(w, dtype=w.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_model(spec: ArchSpec, seed: int = 0, std: float = 0.02, dtype=np.float64) -> Model:
    """Truncated-normal weights (2-sigma cut), zero biases, unit LayerNorm scales."""
    from .arch import spec_issues

    issues = spec_issues(spec)
    if issues:
        raise ValueError("invalid spec: " + "; ".join(f"{i.where}: {i.message}" for i in issues))
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in shape_table(spec).items():
        *path, leaf = name.split(".")
        if any("norm" in part for part in path):
            arr = np.ones(shape) if leaf == "weight" else np.zeros(shape)
        elif leaf == "bias":
            arr = np.zeros(shape)
        else:
            arr = trunc_normal(rng, shape, std)
        weights[name] = arr.astype(dtype)
    return Model(spec, weights)


# -- helpers ---------------------------------------------------------------

def _p(params: Mapping, name: str) -> Tensor:
    v = params[name]
    return v if isinstance(v, Tensor) else Tensor(v)


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ValueError(f"expected image (C,H,W) or batch (B,C,H,W), got shape {arr.shape}")
    return arr, False


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*P*P), patches in raster order, each flattened (C, P, P)."""
    B, C, H, W = images.shape
    g = images.reshape(B, C, H // patch, patch, W // patch, patch)
    return np.ascontiguousarray(g.transpose(0, 2, 4, 1, 3, 5)).reshape(B, (H // patch) * (W // patch), C * patch * patch)


# -- building blocks -------------------------------------------------------

def embed(spec: ArchSpec, params: Mapping, images) -> Tensor:
    """Patch projection, class token and position embedding: (B, N+1, D)."""
    if spec.variant != VANILLA:
        raise ValueError("embed() is the plain-ViT embedding; staged models use stage_entry()")
    imgs, single = _as_batch(images)
    C, (H, W) = spec.in_channels, spec.image_size
    if imgs.shape[1:] != (C, H, W):
        raise ValueError(f"image shape {imgs.shape[1:]} does not match spec {(C, H, W)}")
    w = _p(params, "patch_embed.weight")
    patches = Tensor(extract_patches(imgs.astype(w.dtype, copy=False), spec.patch_size))
    x = T.linear(patches, w, _p(params, "patch_embed.bias"))
    B, D = imgs.shape[0], w.shape[0]
    cls = _p(params, "cls_token")
    cls_b = T.add(T.reshape(cls, (1, 1, D)), Tensor(np.zeros((B, 1, D), dtype=w.dtype)))
    x = T.add(T.concat([cls_b, x], axis=1), _p(params, "pos_embed"))
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


def mhsa(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; q (B, Tq, A), k/v (B, Tk, A)."""
    B, Tq, A = q.shape
    Tk = k.shape[1]
    dh = A // heads
    qh = T.reshape(T.permute(T.reshape(q, (B, Tq, heads, dh)), (0, 2, 1, 3)), (B * heads, Tq, dh))
    kh = T.reshape(T.permute(T.reshape(k, (B, Tk, heads, dh)), (0, 2, 3, 1)), (B * heads, dh, Tk))
    vh = T.reshape(T.permute(T.reshape(v, (B, Tk, heads, dh)), (0, 2, 1, 3)), (B * heads, Tk, dh))
    att = T.softmax(T.mul(T.matmul(qh, kh), 1.0 / math.sqrt(dh)))
    o = T.matmul(att, vh)
    return T.reshape(T.permute(T.reshape(o, (B, heads, Tq, dh)), (0, 2, 1, 3)), (B, Tq, A))


def _tokens_to_grid(x: Tensor, hw: tuple[int, int]) -> Tensor:
    B, N, C = x.shape
    return T.reshape(T.permute(x, (0, 2, 1)), (B, C, hw[0], hw[1]))


def _grid_to_tokens(x: Tensor) -> Tensor:
    B, C, h, w = x.shape
    return T.permute(T.reshape(x, (B, C, h * w)), (0, 2, 1))


def attention_block(spec: ArchSpec, params: Mapping, x: Tensor, k: int, head_mask=None) -> Tensor:
    """x + FC_proj(MHSA(Q, K, V)); ``head_mask`` zeroes Q/K/V channels before the head reshape."""
    b = spec.blocks[k]
    p = f"blocks.{k}."
    eps = spec.eps
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    h = T.layer_norm(x, _p(params, p + "norm1.weight"), _p(params, p + "norm1.bias"), eps)
    q = T.linear(h, _p(params, p + "attn.q.weight"), _p(params, p + "attn.q.bias"))
    kv_in = h
    if spec.variant == STAGED:
        s = spec.stage_of(k)
        r = spec.stages[s].sr_ratio
        if r > 1:
            g = _tokens_to_grid(h, spec.grids[s])
            g = T.conv2d(g, _p(params, p + "attn.sr.weight"), _p(params, p + "attn.sr.bias"), stride=r)
            kv_in = T.layer_norm(_grid_to_tokens(g), _p(params, p + "attn.sr_norm.weight"),
                                 _p(params, p + "attn.sr_norm.bias"), eps)
    kk = T.linear(kv_in, _p(params, p + "attn.k.weight"), _p(params, p + "attn.k.bias"))
    vv = T.linear(kv_in, _p(params, p + "attn.v.weight"), _p(params, p + "attn.v.bias"))
    if head_mask is not None:
        m = np.asarray(head_mask, dtype=q.dtype)
        if m.shape != (b.attn_dim,):
            raise ValueError(f"head_mask length {m.shape} does not match attention dim {b.attn_dim} of block {k}")
        q, kk, vv = T.mul(q, m), T.mul(kk, m), T.mul(vv, m)
    o = mhsa(q, kk, vv, b.num_heads)
    out = T.add(x, T.linear(o, _p(params, p + "attn.proj.weight"), _p(params, p + "attn.proj.bias")))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def ffn_block(spec: ArchSpec, params: Mapping, x: Tensor, k: int) -> Tensor:
    """x + FC2(GELU(FC1(LN(x)))), with a depthwise 3x3 conv after FC1 in staged models."""
    p = f"blocks.{k}."
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    h = T.layer_norm(x, _p(params, p + "norm2.weight"), _p(params, p + "norm2.bias"), spec.eps)
    h = T.linear(h, _p(params, p + "mlp.fc1.weight"), _p(params, p + "mlp.fc1.bias"))
    if spec.variant == STAGED:
        g = _tokens_to_grid(h, spec.grids[spec.stage_of(k)])
        g = T.depthwise_conv2d(g, _p(params, p + "mlp.dwconv.weight"), _p(params, p + "mlp.dwconv.bias"), padding=1)
        h = _grid_to_tokens(g)
    h = T.gelu(h)
    out = T.add(x, T.linear(h, _p(params, p + "mlp.fc2.weight"), _p(params, p + "mlp.fc2.bias")))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def block(spec: ArchSpec, params: Mapping, x: Tensor, k: int, head_mask=None) -> Tensor:
    b = spec.blocks[k]
    if b.attn:
        x = attention_block(spec, params, x, k, head_mask)
    if b.ffn:
        x = ffn_block(spec, params, x, k)
    return x


def stage_entry(spec: ArchSpec, params: Mapping, s: int, prev) -> Tensor:
    """Tokens entering stage ``s`` (overlapping patch embedding + LN for staged models)."""
    if spec.variant == VANILLA:
        return embed(spec, params, prev)
    if s == 0:
        imgs, _ = _as_batch(prev)
        w = _p(params, "stages.0.patch_embed.weight")
        g = Tensor(imgs.astype(w.dtype, copy=False))
    else:
        g = _tokens_to_grid(prev, spec.grids[s - 1])
    st = spec.stages[s]
    g = T.conv2d(g, _p(params, f"stages.{s}.patch_embed.weight"), _p(params, f"stages.{s}.patch_embed.bias"),
                 stride=st.patch_stride, padding=st.patch_kernel // 2)
    return T.layer_norm(_grid_to_tokens(g), _p(params, f"stages.{s}.patch_norm.weight"),
                        _p(params, f"stages.{s}.patch_norm.bias"), spec.eps)


def stage_exit(spec: ArchSpec, params: Mapping, s: int, x: Tensor) -> Tensor:
    name = "norm" if spec.variant == VANILLA else f"stages.{s}.norm"
    return T.layer_norm(x, _p(params, name + ".weight"), _p(params, name + ".bias"), spec.eps)


@dataclass
class ForwardOutput:
    logits: Tensor
    feature: Tensor  # penultimate: class token (plain) or pooled tokens (staged), pre-classifier
    tokens: Tensor  # final normalized tokens, (B, T, D)
    patch_tokens: Tensor  # tokens without the class token (all tokens for staged models)


def encode(
    spec: ArchSpec,
    params: Mapping,
    images=None,
    *,
    head_masks: Mapping[int, np.ndarray] | None = None,
    resume: tuple[int, int, Tensor] | None = None,
    capture: Callable[[int, Tensor], None] | None = None,
) -> Tensor:
    """Run stages and blocks; returns the final normalized tokens (B, T, D).

    ``resume=(s, j, x)`` restarts inside stage ``s`` at its ``j``-th block
    with ``x`` as that block's input; ``j`` may equal the stage length, which
    goes straight to the stage's final norm. Earlier work is skipped.
    ``capture(k, x)`` sees the input of every block ``k`` that runs.
    """
    head_masks = head_masks or {}
    offs = spec.stage_offsets
    start_stage = resume[0] if resume is not None else 0
    x = None
    for s in range(start_stage, len(spec.stages)):
        if resume is not None and s == start_stage:
            _, j0, x = resume
            if not 0 <= j0 <= len(spec.stages[s].blocks):
                raise IndexError(f"resume position {j0} outside stage {s}")
        else:
            x, j0 = stage_entry(spec, params, s, images if s == 0 else x), 0
        for j in range(j0, len(spec.stages[s].blocks)):
            k = offs[s] + j
            if capture is not None:
                capture(k, x)
            x = block(spec, params, x, k, head_masks.get(k))
        x = stage_exit(spec, params, s, x)
    return x


def classify(spec: ArchSpec, params: Mapping, tokens: Tensor) -> ForwardOutput:
    if spec.variant == VANILLA:
        feat = T.getitem(tokens, (slice(None), 0))
        patch = T.getitem(tokens, (slice(None), slice(1, None)))
    else:
        feat = T.mean(tokens, axis=1)
        patch = tokens
    logits = T.linear(feat, _p(params, "head.weight"), _p(params, "head.bias"))
    return ForwardOutput(logits, feat, tokens, patch)


def forward(model_or_spec, params_or_images=None, images=None, *, head_masks=None) -> ForwardOutput:
    """Full forward pass.

    Call as ``forward(model, images)`` or ``forward(spec, params, images)``.
    A single (C, H, W) image yields logits of shape (K,); batches give (B, K).
    """
    if isinstance(model_or_spec, Model):
        spec, params, imgs = model_or_spec.spec, model_or_spec.weights, params_or_images
    else:
        spec, params, imgs = model_or_spec, params_or_images, images
    batch, single = _as_batch(imgs)
    tokens = encode(spec, params, batch, head_masks=head_masks)
    out = classify(spec, params, tokens)
    if single:
        out = ForwardOutput(*(T.reshape(t, t.shape[1:]) for t in (out.logits, out.feature, out.tokens, out.patch_tokens)))
    return out


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-only logits for a batch of images, evaluated in fixed chunks."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(forward(model, images[i:i + batch_size]).logits.data)
    return np.concatenate(outs, axis=0)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(images) == 0:
        raise ValueError("accuracy of an empty set")
    pred = predict_logits(model, images, batch_size).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())
