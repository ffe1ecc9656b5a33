"""KL-divergence importance of channels and of whole/hybrid blocks.

A candidate's score is the sum over proxy images of KL(q || p), where q is
the intact model's output distribution and p that of the model with the
candidate removed (or, for attention channels, zero-masked). The intact
model is never modified; perturbed models are overlays from :mod:`edits`.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import log_softmax

from . import edits
from .arch import ArchSpec, is_canonical
from .components import SHORTCUT, ChannelGroup, component_map
from .errors import NumericError, StaleArtifactError
from .model import Model, classify, encode

DEFAULT_PROXY_SIZE = 200


@dataclass(frozen=True)
class ProxySet:
    """Scoring images, kept in sampled order together with their source indices."""

    images: np.ndarray
    indices: np.ndarray
    source: str = ""
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.indices)

    def by_index(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.indices, kind="stable")
        return self.images[order], self.indices[order]


def build_proxy(dataset, n: int = DEFAULT_PROXY_SIZE, seed: int = 0, source: str | None = None) -> ProxySet:
    """Uniform sample of ``n`` distinct images, reproducible from ``seed``."""
    images = getattr(dataset, "images", dataset)
    total = len(images)
    if not 1 <= n <= total:
        raise ValueError(f"proxy size {n} must be between 1 and the dataset size {total}")
    idx = np.random.default_rng(seed).choice(total, size=n, replace=False)
    if source is None:
        source = getattr(dataset, "name", "") or ""
    return ProxySet(np.ascontiguousarray(images[idx]), idx.astype(np.int64), source, seed)


def block_candidates(spec: ArchSpec) -> list[str]:
    """Whole blocks then hybrids (FFN of k + attention of k+1, same stage only)."""
    out = [f"block:{k}" for k in range(spec.depth)]
    out += [f"hybrid:{k}" for k in range(spec.depth - 1) if spec.stage_of(k) == spec.stage_of(k + 1)]
    return out


def parse_candidate(cid: str) -> tuple[str, int]:
    kind, _, k = cid.partition(":")
    if kind not in ("block", "hybrid") or not k.isdigit():
        raise ValueError(f"bad block candidate id {cid!r}")
    return kind, int(k)


@dataclass
class ImportanceTable:
    channel_scores: dict[tuple[int, str, int], float] = field(default_factory=dict)
    block_scores: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def group(self, component: int, scope: str) -> np.ndarray:
        vals = []
        j = 0
        while (component, scope, j) in self.channel_scores:
            vals.append(self.channel_scores[(component, scope, j)])
            j += 1
        if not vals:
            raise KeyError(f"no scores for group ({component}, {scope!r})")
        return np.array(vals)

    def check_model(self, model: Model) -> None:
        fp = self.meta.get("fingerprint")
        if fp != model.fingerprint():
            raise StaleArtifactError(f"importance table was computed for model {str(fp)[:12]}, not {model.fingerprint()[:12]}")

    def lowest_block_candidate(self) -> str:
        """Minimum score; ties prefer whole blocks over hybrids, then the lower index."""
        def key(cid):
            kind, k = parse_candidate(cid)
            return (self.block_scores[cid], kind != "block", k)
        return min(self.block_scores, key=key)


def kl_rows(log_q: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    """Per-row KL(q || p) from log-probabilities."""
    return np.sum(np.exp(log_q) * (log_q - log_p), axis=-1)


class Scorer:
    """Reference outputs and cached block inputs for one (model, proxy) pair.

    With ``cache=True`` per-block perturbations restart from the stored input
    of the affected block; the result is bit-identical to a full pass.
    """

    def __init__(self, model: Model, proxy: ProxySet, batch_size: int = 256, cache: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.model = model
        self.images, self.indices = proxy.by_index()
        self.images = self.images.astype(model.dtype, copy=False)
        self.cache = cache
        self.chunks = [slice(i, i + batch_size) for i in range(0, len(self.images), batch_size)]
        self.block_inputs: list[dict[int, object]] = []
        ref = []
        for sl in self.chunks:
            store: dict[int, object] = {}
            tokens = encode(model.spec, model.weights, self.images[sl],
                            capture=(lambda k, x, st=store: st.__setitem__(k, x)) if cache else None)
            self.block_inputs.append(store)
            ref.append(self._logits(model.spec, model.weights, tokens, sl))
        self.log_q = log_softmax(np.concatenate(ref), axis=-1)

    def _logits(self, spec, weights, tokens, sl) -> np.ndarray:
        z = classify(spec, weights, tokens).logits.data
        bad = ~np.isfinite(z).all(axis=-1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0]) + sl.start
            raise NumericError(f"non-finite logits for proxy sample {int(self.indices[i])}")
        return z

    def kl(self, spec: ArchSpec, weights: Mapping, resume_at: tuple[int, int] | None = None,
           head_masks: Mapping[int, np.ndarray] | None = None) -> float:
        """Summed KL of a perturbed model against the reference.

        ``resume_at=(s, j)`` with ``j`` a position in stage ``s`` of the
        perturbed spec whose input equals the intact model's input of block
        ``self.model.spec.stage_offsets[s] + j``.
        """
        out = []
        for c, sl in enumerate(self.chunks):
            if resume_at is not None and self.cache:
                s, j = resume_at
                k_orig = self.model.spec.stage_offsets[s] + j
                tokens = encode(spec, weights, None, head_masks=head_masks,
                                resume=(s, j, self.block_inputs[c][k_orig]))
            else:
                tokens = encode(spec, weights, self.images[sl], head_masks=head_masks)
            out.append(self._logits(spec, weights, tokens, sl))
        per_sample = kl_rows(self.log_q, log_softmax(np.concatenate(out), axis=-1))
        return max(float(np.sum(per_sample)), 0.0)

    # -- individual candidates -------------------------------------------

    def _pos(self, k: int) -> tuple[int, int]:
        spec = self.model.spec
        s = spec.stage_of(k)
        return s, k - spec.stage_offsets[s]

    def channel(self, group: ChannelGroup, j: int) -> float:
        spec, w = self.model.spec, self.model.weights
        group.slices(j)  # range check
        if group.mask_only:
            mask = np.ones(group.size)
            mask[j] = 0.0
            return self.kl(spec, w, self._pos(group.block), head_masks={group.block: mask})
        spec2, w2 = edits.drop_channels(spec, w, group, [j])
        if group.component == SHORTCUT:
            return self.kl(spec2, w2)
        return self.kl(spec2, w2, self._pos(group.block))

    def candidate(self, cid: str) -> float:
        kind, k = parse_candidate(cid)
        spec, w = self.model.spec, self.model.weights
        spec2, w2 = (edits.remove_block if kind == "block" else edits.remove_hybrid)(spec, w, k)
        return self.kl(spec2, w2, self._pos(k))


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _meta(model: Model, proxy: ProxySet) -> dict:
    return {
        "fingerprint": model.fingerprint(),
        "proxy_size": proxy.size,
        "proxy_seed": proxy.seed,
        "proxy_source": proxy.source,
        "log_base": "e",
    }


def score_all_channels(model: Model, proxy: ProxySet, *, cache: bool = True, workers: int = 1,
                       scorer: Scorer | None = None) -> ImportanceTable:
    sc = scorer or Scorer(model, proxy, cache=cache)
    keys = [(g, j) for g in component_map(model.spec) for j in range(g.size)]
    vals = _map(lambda gj: sc.channel(*gj), keys, workers)
    scores = {(g.component, g.scope, j): v for (g, j), v in zip(keys, vals)}
    return ImportanceTable(scores, {}, _meta(model, proxy))


def block_candidate_scores(model: Model, proxy: ProxySet, *, cache: bool = True, workers: int = 1,
                           scorer: Scorer | None = None) -> ImportanceTable:
    if not is_canonical(model.spec):
        raise ValueError("block candidates are defined on canonical models (every block has both halves)")
    sc = scorer or Scorer(model, proxy, cache=cache)
    cands = block_candidates(model.spec)
    vals = _map(sc.candidate, cands, workers)
    return ImportanceTable({}, dict(zip(cands, vals)), _meta(model, proxy))


def score_model(model: Model, proxy: ProxySet, *, channels: bool = True, blocks: bool = True,
                cache: bool = True, workers: int = 1) -> ImportanceTable:
    """Full importance table: every channel of every group and every block candidate."""
    sc = Scorer(model, proxy, cache=cache)
    table = ImportanceTable({}, {}, _meta(model, proxy))
    if channels:
        table.channel_scores = score_all_channels(model, proxy, workers=workers, scorer=sc).channel_scores
    if blocks and model.spec.depth >= 1:
        table.block_scores = block_candidate_scores(model, proxy, workers=workers, scorer=sc).block_scores
    return table


def channel_score(model: Model, proxy: ProxySet, group: ChannelGroup, j: int) -> float:
    """Score of one channel, without activation caching."""
    return Scorer(model, proxy, cache=False).channel(group, j)


__all__ = [
    "ProxySet", "build_proxy", "ImportanceTable", "Scorer", "score_all_channels",
    "block_candidate_scores", "score_model", "channel_score", "block_candidates",
    "parse_candidate", "kl_rows", "DEFAULT_PROXY_SIZE",
]
