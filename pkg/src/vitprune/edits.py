"""Structural edits on (spec, weights) pairs.

Every edit returns a new spec and a new name -> array mapping. Arrays that
an edit does not touch are shared with the input mapping rather than copied,
so an edit doubles as a cheap perturbed view of a model during scoring.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Mapping

import numpy as np

from .arch import ATTN_PARTS, FFN_PARTS, ArchSpec, BlockSpec, pack_sublayers
from .components import ATTENTION, FFN, SHORTCUT, SPATIAL, ChannelGroup

Weights = Mapping[str, np.ndarray]


def check_keep(keep, size: int) -> np.ndarray:
    idx = np.asarray(keep, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ValueError("an edit may not remove every channel of a group")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("channel indices must be strictly increasing")
    if idx[0] < 0 or idx[-1] >= size:
        raise ValueError(f"channel index out of range for a group of size {size}")
    return idx


def _resized(spec: ArchSpec, group: ChannelGroup, n: int, num_heads: int | None) -> ArchSpec:
    c = group.component
    if c == SHORTCUT:
        return spec.with_stage(group.stage or 0, embed_dim=n)
    k = group.block
    if c == ATTENTION:
        return spec.with_block(k, attn_dim=n, num_heads=num_heads or spec.blocks[k].num_heads)
    if c == FFN:
        return spec.with_block(k, ffn_dim=n)
    if c == SPATIAL:
        return spec.with_block(k, sr_dim=n)
    raise ValueError(f"unknown component {c}")


def take_channels(spec: ArchSpec, weights: Weights, group: ChannelGroup, keep,
                  num_heads: int | None = None) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    """Keep only channels ``keep`` (sorted) of ``group``, cutting every coupled slice.

    ``num_heads`` sets the new head count when an attention group shrinks;
    by default it is unchanged.
    """
    idx = check_keep(keep, group.size)
    out = dict(weights)
    for name, ax in group.axes:
        out[name] = np.take(weights[name], idx, axis=ax)
    return _resized(spec, group, len(idx), num_heads), out


def drop_channels(spec: ArchSpec, weights: Weights, group: ChannelGroup, drop,
                  num_heads: int | None = None) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    drop = set(int(j) for j in drop)
    return take_channels(spec, weights, group, [j for j in range(group.size) if j not in drop], num_heads)


# -- block-level edits -----------------------------------------------------

def _rebuild(spec: ArchSpec, weights: Weights, layout) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    """Reassemble blocks from halves of old blocks.

    ``layout[s]`` lists (BlockSpec, attn source k or None, ffn source k or None)
    for the blocks of stage ``s``, in order.
    """
    non_block = {n: w for n, w in weights.items() if not n.startswith("blocks.")}
    out = dict(non_block)
    stages = []
    k_new = 0
    for s, entries in enumerate(layout):
        blocks = []
        for b, ka, kf in entries:
            for src, parts in ((ka, ATTN_PARTS), (kf, FFN_PARTS)):
                if src is None:
                    continue
                p_old = f"blocks.{src}."
                for n, w in weights.items():
                    if n.startswith(p_old) and n[len(p_old):].startswith(parts):
                        out[f"blocks.{k_new}.{n[len(p_old):]}"] = w
            blocks.append(b)
            k_new += 1
        stages.append(replace(spec.stages[s], blocks=tuple(blocks)))
    return replace(spec, stages=tuple(stages)), out


def _layout(spec: ArchSpec):
    return [[(b, k if b.attn else None, k if b.ffn else None)
             for k, s2, b in spec.iter_blocks() if s2 == s] for s in range(len(spec.stages))]


def canonicalize(spec: ArchSpec, weights: Weights) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    """Re-pack present halves so every block has both attention and FFN."""
    layout = []
    for s, st in enumerate(spec.stages):
        off = spec.stage_offsets[s]
        entries = []
        for ja, jf in pack_sublayers(st.blocks):
            a, f = st.blocks[ja], st.blocks[jf]
            b = BlockSpec(a.attn_dim, a.num_heads, f.ffn_dim, True, True, a.sr_dim)
            entries.append((b, off + ja, off + jf))
        layout.append(entries)
    return _rebuild(spec, weights, layout)


def _check_block(spec: ArchSpec, k: int) -> None:
    if not 0 <= k < spec.depth:
        raise IndexError(f"block index {k} out of range for depth {spec.depth}")


def remove_block(spec: ArchSpec, weights: Weights, k: int) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    """Delete block ``k`` (0-based) entirely; later blocks shift down by one."""
    _check_block(spec, k)
    layout = _layout(spec)
    s = spec.stage_of(k)
    del layout[s][k - spec.stage_offsets[s]]
    return _rebuild(spec, weights, layout)


def hybrid_flags(spec: ArchSpec, weights: Weights, k: int) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    """Flag form of a hybrid removal: clear FFN of ``k`` and attention of ``k+1``.

    The result is a legal but non-canonical model that still has L blocks.
    """
    _check_block(spec, k)
    if k + 1 >= spec.depth or spec.stage_of(k) != spec.stage_of(k + 1):
        raise IndexError(f"no hybrid candidate at block {k}: block {k + 1} is not in the same stage")
    if not (spec.blocks[k].ffn and spec.blocks[k + 1].attn):
        raise ValueError(f"hybrid at {k} needs the FFN of block {k} and attention of block {k + 1}")
    new = spec.with_block(k, ffn=False).with_block(k + 1, attn=False)
    drop = {n for n in weights if n.startswith(f"blocks.{k}.") and n[len(f"blocks.{k}."):].startswith(FFN_PARTS)}
    p = f"blocks.{k + 1}."
    drop |= {n for n in weights if n.startswith(p) and n[len(p):].startswith(ATTN_PARTS)}
    return new, {n: w for n, w in weights.items() if n not in drop}


def remove_hybrid(spec: ArchSpec, weights: Weights, k: int) -> tuple[ArchSpec, dict[str, np.ndarray]]:
    """Delete FFN of block ``k`` and attention of block ``k+1``, then canonicalize to L-1 blocks."""
    return canonicalize(*hybrid_flags(spec, weights, k))
