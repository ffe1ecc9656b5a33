"""Pruning operations on models, and the replayable recipes they produce.

All operations are pure: they return new models and never modify their
inputs. Ranking ties are always broken in favour of keeping (or, for block
candidates, removing) the lower index.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import edits
from .arch import ArchSpec, shape_table, spec_issues
from .components import ATTENTION, FFN, SHORTCUT, SPATIAL, component_map
from .errors import StaleArtifactError, ValidationError
from .importance import ImportanceTable, ProxySet, block_candidate_scores, parse_candidate
from .model import Model

RECIPE_MAGIC = "VITPRUNE-RECIPE"
RECIPE_VERSION = 1


def spec_fingerprint(spec: ArchSpec) -> str:
    return hashlib.sha256(spec.canonical_json().encode()).hexdigest()


# -- recipes ---------------------------------------------------------------

@dataclass(frozen=True)
class DropChannels:
    component: int
    scope: str
    indices: tuple[int, ...]

    def line(self) -> str:
        return f"DROP_CH {self.component} {self.scope} {','.join(map(str, self.indices))}"


@dataclass(frozen=True)
class MergeHeads:
    block: int
    factor: int

    def line(self) -> str:
        return f"MERGE_HEADS {self.block} {self.factor}"


@dataclass(frozen=True)
class DropBlock:
    block: int

    def line(self) -> str:
        return f"DROP_BLOCK {self.block}"


@dataclass(frozen=True)
class DropHybrid:
    block: int

    def line(self) -> str:
        return f"DROP_HYBRID {self.block}"


Edit = DropChannels | MergeHeads | DropBlock | DropHybrid


@dataclass
class PruneRecipe:
    source: str
    target: str = ""
    edits: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{RECIPE_MAGIC} {RECIPE_VERSION}", f"SOURCE {self.source}", f"TARGET {self.target}"]
        lines += [e.line() for e in self.edits]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PruneRecipe":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not lines or lines[0].split()[0] != RECIPE_MAGIC:
            raise ValueError("not a recipe file (missing magic line)")
        version = int(lines[0].split()[1])
        if version > RECIPE_VERSION:
            raise ValueError(f"recipe version {version} is newer than supported version {RECIPE_VERSION}")
        head = dict(ln.split(maxsplit=1) for ln in lines[1:3])
        if set(head) != {"SOURCE", "TARGET"}:
            raise ValueError("recipe needs SOURCE and TARGET header lines")
        recipe = cls(head["SOURCE"], head["TARGET"])
        for n, ln in enumerate(lines[3:], start=4):
            parts = ln.split()
            op, args = parts[0], parts[1:]
            try:
                if op == "DROP_CH":
                    idx = tuple(int(i) for i in args[2].split(",")) if len(args) > 2 else ()
                    recipe.edits.append(DropChannels(int(args[0]), args[1], idx))
                elif op == "MERGE_HEADS":
                    recipe.edits.append(MergeHeads(int(args[0]), int(args[1])))
                elif op == "DROP_BLOCK":
                    recipe.edits.append(DropBlock(int(args[0])))
                elif op == "DROP_HYBRID":
                    recipe.edits.append(DropHybrid(int(args[0])))
                else:
                    raise ValueError(f"unknown edit {op!r}")
            except (IndexError, ValueError) as e:
                raise ValueError(f"recipe line {n}: {ln!r}: {e}") from None
        return recipe

    def extend(self, other: "PruneRecipe") -> "PruneRecipe":
        if other.source != self.target:
            raise ValueError("recipes do not chain: second source differs from first target")
        return PruneRecipe(self.source, other.target, self.edits + other.edits)


def _apply_edit(spec: ArchSpec, weights: Mapping, e) -> tuple[ArchSpec, dict]:
    if isinstance(e, DropChannels):
        g = component_map(spec).get(e.component, e.scope)
        if list(e.indices) != sorted(set(e.indices)):
            raise ValueError(f"{e.line()}: indices must be strictly increasing")
        if e.indices and not (0 <= e.indices[0] and e.indices[-1] < g.size):
            raise ValueError(f"{e.line()}: index out of range for group of size {g.size}")
        return edits.drop_channels(spec, weights, g, e.indices)
    if isinstance(e, MergeHeads):
        h = spec.blocks[e.block].num_heads
        if e.factor < 1 or h % e.factor:
            raise ValueError(f"{e.line()}: {h} heads not divisible by {e.factor}")
        return spec.with_block(e.block, num_heads=h // e.factor), dict(weights)
    if isinstance(e, DropBlock):
        return edits.remove_block(spec, weights, e.block)
    if isinstance(e, DropHybrid):
        return edits.remove_hybrid(spec, weights, e.block)
    raise TypeError(f"unknown edit {e!r}")


def apply_recipe(model: Model, recipe: PruneRecipe, *, check_source: bool = True) -> Model:
    """Replay ``recipe`` on ``model``; the result is validated against the target fingerprint."""
    if check_source and recipe.source != spec_fingerprint(model.spec):
        raise StaleArtifactError("recipe source fingerprint does not match the model's architecture")
    spec, w = model.spec, dict(model.weights)
    for e in recipe.edits:
        spec, w = _apply_edit(spec, w, e)
    out = Model(spec, w)
    require_valid(out)
    if recipe.target and recipe.target != spec_fingerprint(spec):
        raise ValidationError("replayed architecture does not match the recipe target fingerprint")
    return out


# -- validation ------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    code: str
    where: str
    message: str

    def to_dict(self) -> dict:
        return {"code": self.code, "where": self.where, "message": self.message}


def validate(spec: ArchSpec, weights: Mapping[str, np.ndarray]) -> list[Diagnostic]:
    """Every structural problem with (spec, weights); an empty list means ok."""
    out = [Diagnostic(i.code, i.where, i.message) for i in spec_issues(spec)]
    if out:
        return out
    # coupled slices must agree on their extent before shapes are compared,
    # so a half-cut group is reported by name rather than as loose mismatches
    for g in component_map(spec):
        extents = {}
        for name, ax in g.axes:
            w = weights.get(name)
            if w is not None and w.ndim > ax:
                extents.setdefault(w.shape[ax], []).append(f"{name}[axis {ax}]")
        if len(extents) > 1:
            detail = "; ".join(f"{n}: {', '.join(v)}" for n, v in sorted(extents.items()))
            out.append(Diagnostic("coupling", f"component{g.component}:{g.scope}",
                                  f"coupled slices disagree on channel count ({detail})"))
    table = shape_table(spec)
    for name, shape in table.items():
        if name not in weights:
            out.append(Diagnostic("shape.missing", name, f"missing tensor, expected shape {shape}"))
        elif tuple(weights[name].shape) != shape:
            out.append(Diagnostic("shape.mismatch", name, f"shape {tuple(weights[name].shape)} != expected {shape}"))
    for name in weights:
        if name not in table:
            out.append(Diagnostic("shape.extra", name, "tensor not part of the architecture"))
    dtypes = {np.asarray(w).dtype for w in weights.values()}
    if len(dtypes) > 1:
        out.append(Diagnostic("dtype", "weights", f"mixed dtypes {sorted(map(str, dtypes))}"))
    for name, w in weights.items():
        if not np.all(np.isfinite(w)):
            out.append(Diagnostic("weights.nonfinite", name, "non-finite values"))
    return out


def require_valid(model: Model) -> Model:
    diags = validate(model.spec, model.weights)
    if diags:
        raise ValidationError(f"{len(diags)} validation problem(s), first: {diags[0].where}: {diags[0].message}", diags)
    return model


# -- channel ranking -------------------------------------------------------

def lowest(scores: np.ndarray, n_drop: int, offset: int = 0) -> list[int]:
    """Indices (plus ``offset``) of the ``n_drop`` lowest scores; among ties the higher index goes first."""
    scores = np.asarray(scores, dtype=float)
    idx = np.arange(len(scores))
    order = np.lexsort((-idx, scores))
    return sorted(int(i) + offset for i in order[:n_drop])


def head_keep(scores: np.ndarray, h_b: int, d_t: int, h_t: int, strategy: int = 1) -> list[int]:
    """Surviving attention channels when going from (D_b, h_b) to (d_t, h_t) heads.

    Strategy 1 merges runs of h_b/h_t consecutive heads and drops the lowest
    channels inside each merged head; strategy 2 drops the globally lowest
    channels; strategy 3 drops the same number from every original head.
    """
    scores = np.asarray(scores, dtype=float)
    d_b = len(scores)
    if h_b < 1 or d_b % h_b:
        raise ValueError(f"attention dim {d_b} not divisible by {h_b} heads")
    if h_t < 1 or h_b % h_t:
        raise ValueError(f"{h_b} heads cannot be merged into {h_t}")
    if not 1 <= d_t <= d_b or d_t % h_t:
        raise ValueError(f"target dim {d_t} must be in [1, {d_b}] and divisible by {h_t} heads")
    removed = d_b - d_t
    if strategy == 1:
        size = d_b // h_t
        n = removed // h_t
        drop = [i for g in range(h_t) for i in lowest(scores[g * size:(g + 1) * size], n, g * size)]
    elif strategy == 2:
        drop = lowest(scores, removed)
    elif strategy == 3:
        if removed % h_b:
            raise ValueError(f"strategy 3 removes equally per head: {removed} not divisible by {h_b}")
        size = d_b // h_b
        n = removed // h_b
        drop = [i for g in range(h_b) for i in lowest(scores[g * size:(g + 1) * size], n, g * size)]
    else:
        raise ValueError(f"unknown head strategy {strategy}")
    dropped = set(drop)
    return [i for i in range(d_b) if i not in dropped]


def prune_heads(model: Model, k: int, d_t: int, h_t: int, strategy: int, scores) -> tuple[Model, list]:
    """Shrink block ``k``'s attention to ``d_t`` channels in ``h_t`` heads.

    Merging consecutive heads needs no weight change: heads are contiguous
    channel runs, so merging only relabels the head count.
    """
    spec, w = model.spec, model.weights
    b = spec.blocks[k]
    keep = head_keep(scores, b.num_heads, d_t, h_t, strategy)
    if len(keep) == b.attn_dim and h_t == b.num_heads:
        return model, []
    g = component_map(spec).get(ATTENTION, f"block{k}")
    dropped = tuple(j for j in range(g.size) if j not in set(keep))
    factor = b.num_heads // h_t
    spec2, w2 = edits.take_channels(spec, w, g, keep, num_heads=h_t)
    ops = []
    drop = DropChannels(ATTENTION, g.scope, dropped)
    merge = MergeHeads(k, factor)
    if strategy == 2:
        ops = [drop] if dropped else []
        ops += [merge] if factor > 1 else []
    else:
        ops = [merge] if factor > 1 else []
        ops += [drop] if dropped else []
    return Model(spec2, w2), ops


@dataclass(frozen=True)
class ChannelTargets:
    """Absolute survivor counts; None leaves a component untouched.

    ``embed_dim`` may be a sequence (one entry per stage) for staged models.
    """

    embed_dim: int | Sequence[int] | None = None
    attn_dim: int | None = None
    heads: int | None = None
    ffn_dim: int | None = None
    sr_dim: int | None = None


def _n_drop(size: int, ratio: float | None, target: int | None, what: str) -> int:
    if target is not None:
        if not 1 <= target <= size:
            raise ValueError(f"{what}: target {target} must be between 1 and current size {size}")
        return size - target
    n = int(np.floor(ratio * size + 1e-9)) if ratio else 0
    if n >= size:
        raise ValueError(f"{what}: ratio {ratio} leaves no channels")
    return n


def prune_channels(model: Model, table: ImportanceTable, ratio: float | None = None,
                   targets: ChannelTargets | None = None, strategy: int = 1,
                   components: Sequence[int] = (SHORTCUT, ATTENTION, FFN, SPATIAL)) -> tuple[Model, PruneRecipe]:
    """Drop the lowest-scoring channels of every group independently.

    Give ``ratio`` (floor(ratio * size) channels per group) or ``targets``.
    Attention groups go through :func:`prune_heads`; in ratio mode the number
    removed is rounded down so the result still splits evenly into heads.
    """
    if (ratio is None) == (targets is None):
        raise ValueError("give exactly one of ratio or targets")
    if ratio is not None and not 0 <= ratio < 1:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    table.check_model(model)
    t = targets or ChannelTargets()
    spec = model.spec
    cur = model
    recipe = PruneRecipe(spec_fingerprint(spec))
    for g in component_map(spec):
        scores = table.group(g.component, g.scope)
        if len(scores) != g.size:
            raise StaleArtifactError(f"table has {len(scores)} scores for group ({g.component}, {g.scope}) of size {g.size}")
        if g.component not in components:
            continue
        if g.component == ATTENTION:
            b = spec.blocks[g.block]
            h_t = t.heads or b.num_heads
            if h_t < 1 or b.num_heads % h_t:
                raise ValueError(f"block {g.block}: {b.num_heads} heads cannot be merged into {h_t}")
            if targets is not None:
                d_t = t.attn_dim or b.attn_dim
            else:
                step = b.num_heads if strategy == 3 else h_t
                n = _n_drop(g.size, ratio, None, f"attention of block {g.block}")
                d_t = g.size - (n // step) * step
            cur, ops = prune_heads(cur, g.block, d_t, h_t, strategy, scores)
            recipe.edits.extend(ops)
            continue
        if g.component == SHORTCUT:
            tgt = t.embed_dim
            if isinstance(tgt, Sequence):
                tgt = tgt[g.stage or 0]
        else:
            tgt = {FFN: t.ffn_dim, SPATIAL: t.sr_dim}[g.component]
        n = _n_drop(g.size, ratio, tgt, f"component {g.component} {g.scope}") if (ratio is not None or tgt is not None) else 0
        if n == 0:
            continue
        drop = lowest(scores, n)
        spec2, w2 = edits.drop_channels(cur.spec, cur.weights, component_map(cur.spec).get(g.component, g.scope), drop)
        cur = Model(spec2, w2)
        recipe.edits.append(DropChannels(g.component, g.scope, tuple(drop)))
    require_valid(cur)
    recipe.target = spec_fingerprint(cur.spec)
    return cur, recipe


# -- blocks ----------------------------------------------------------------

def remove_block(model: Model, k: int) -> Model:
    return Model(*edits.remove_block(model.spec, model.weights, k))


def remove_hybrid(model: Model, k: int) -> Model:
    return Model(*edits.remove_hybrid(model.spec, model.weights, k))


def _remove(model: Model, cid: str) -> tuple[Model, object]:
    kind, k = parse_candidate(cid)
    if kind == "block":
        return remove_block(model, k), DropBlock(k)
    return remove_hybrid(model, k), DropHybrid(k)


@dataclass
class BlockStep:
    candidate: str
    score: float
    depth_after: int
    scores: dict


def progressive_block_prune(model: Model, proxy: ProxySet, target_depth: int,
                            on_step: Callable[[int, Model, BlockStep], Model | None] | None = None,
                            ) -> tuple[Model, PruneRecipe, list[BlockStep]]:
    """Remove one block candidate at a time, re-scoring after every removal.

    ``on_step(i, model, step)`` runs after each removal; returning a model
    (for example a fine-tuned one) replaces the current model.
    """
    if target_depth < 1:
        raise ValueError("target depth must be >= 1")
    if target_depth > model.spec.depth:
        raise ValueError(f"target depth {target_depth} exceeds current depth {model.spec.depth}")
    recipe = PruneRecipe(spec_fingerprint(model.spec))
    history: list[BlockStep] = []
    cur = model
    while cur.spec.depth > target_depth:
        table = block_candidate_scores(cur, proxy)
        cid = table.lowest_block_candidate()
        cur, edit = _remove(cur, cid)
        recipe.edits.append(edit)
        step = BlockStep(cid, table.block_scores[cid], cur.spec.depth, dict(table.block_scores))
        history.append(step)
        if on_step is not None:
            replaced = on_step(len(history) - 1, cur, step)
            if replaced is not None:
                cur = replaced
    require_valid(cur)
    recipe.target = spec_fingerprint(cur.spec)
    return cur, recipe, history


def _sublayers(cid: str) -> set[tuple[str, int]]:
    kind, k = parse_candidate(cid)
    return {("attn", k), ("ffn", k)} if kind == "block" else {("ffn", k), ("attn", k + 1)}


def one_shot_block_prune(model: Model, proxy: ProxySet | None, n_remove: int,
                         table: ImportanceTable | None = None) -> tuple[Model, PruneRecipe, list[str]]:
    """Score once, then remove the ``n_remove`` lowest candidates together.

    Candidates sharing a sublayer with an already chosen one are skipped.
    """
    if n_remove < 0 or n_remove >= model.spec.depth:
        raise ValueError(f"cannot remove {n_remove} of {model.spec.depth} blocks")
    if table is None:
        table = block_candidate_scores(model, proxy)
    else:
        table.check_model(model)
    order = sorted(table.block_scores, key=lambda c: (table.block_scores[c], parse_candidate(c)[0] != "block",
                                                     parse_candidate(c)[1]))
    chosen: list[str] = []
    used: set = set()
    for cid in order:
        if len(chosen) == n_remove:
            break
        if _sublayers(cid) & used:
            continue
        chosen.append(cid)
        used |= _sublayers(cid)
    if len(chosen) < n_remove:
        raise ValueError(f"only {len(chosen)} non-overlapping candidates available")
    recipe = PruneRecipe(spec_fingerprint(model.spec))
    cur = model
    # descending position keeps the remaining chosen indices valid
    for cid in sorted(chosen, key=lambda c: parse_candidate(c)[1], reverse=True):
        cur, edit = _remove(cur, cid)
        recipe.edits.append(edit)
    require_valid(cur)
    recipe.target = spec_fingerprint(cur.spec)
    return cur, recipe, chosen


__all__ = [
    "PruneRecipe", "DropChannels", "MergeHeads", "DropBlock", "DropHybrid", "apply_recipe",
    "Diagnostic", "validate", "require_valid", "lowest", "head_keep", "prune_heads", "ChannelTargets",
    "prune_channels", "remove_block", "remove_hybrid", "progressive_block_prune", "one_shot_block_prune",
    "BlockStep", "spec_fingerprint",
]
