"""Architecture descriptions for plain and staged vision transformers.

An :class:`ArchSpec` fully determines the shape of every learnable tensor.
Pruned models are still ArchSpecs: per-block widths (attention embedding,
FFN hidden, spatial-reduction embedding) are stored explicitly, as are the
per-block flags that record which residual halves are present.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Iterator

VANILLA = "vanilla"
STAGED = "staged"


@dataclass(frozen=True)
class BlockSpec:
    attn_dim: int
    num_heads: int
    ffn_dim: int
    attn: bool = True
    ffn: bool = True
    sr_dim: int = 0  # spatial-reduction width; 0 when the stage has no Conv_sr

    @property
    def head_dim(self) -> float:
        return self.attn_dim / self.num_heads


@dataclass(frozen=True)
class StageSpec:
    embed_dim: int
    blocks: tuple[BlockSpec, ...]
    sr_ratio: int = 1
    patch_kernel: int = 0
    patch_stride: int = 0


@dataclass(frozen=True)
class ArchSpec:
    variant: str
    image_size: tuple[int, int]
    in_channels: int
    num_classes: int
    stages: tuple[StageSpec, ...]
    patch_size: int = 0
    eps: float = 1e-6

    # -- constructors -----------------------------------------------------

    @classmethod
    def vit(
        cls,
        image_size: int | tuple[int, int] = 224,
        patch_size: int = 16,
        embed_dim: int = 768,
        depth: int = 12,
        num_heads: int = 12,
        mlp_ratio: float = 4.0,
        num_classes: int = 1000,
        in_channels: int = 3,
        eps: float = 1e-6,
    ) -> "ArchSpec":
        hw = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
        ffn = int(round(embed_dim * mlp_ratio))
        blocks = tuple(BlockSpec(embed_dim, num_heads, ffn) for _ in range(depth))
        return cls(VANILLA, hw, in_channels, num_classes, (StageSpec(embed_dim, blocks),), patch_size, eps)

    @classmethod
    def pvt(
        cls,
        image_size: int | tuple[int, int] = 224,
        embed_dims=(32, 64, 160, 256),
        depths=(2, 2, 2, 2),
        num_heads=(1, 2, 5, 8),
        mlp_ratios=(8, 8, 4, 4),
        sr_ratios=(8, 4, 2, 1),
        patch_kernels=(7, 3, 3, 3),
        patch_strides=(4, 2, 2, 2),
        num_classes: int = 1000,
        in_channels: int = 3,
        eps: float = 1e-6,
    ) -> "ArchSpec":
        hw = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
        stages = []
        for d, n, h, r, sr, pk, ps in zip(embed_dims, depths, num_heads, mlp_ratios, sr_ratios, patch_kernels, patch_strides):
            sr_dim = d if sr > 1 else 0
            blocks = tuple(BlockSpec(d, h, int(round(d * r)), sr_dim=sr_dim) for _ in range(n))
            stages.append(StageSpec(d, blocks, sr, pk, ps))
        return cls(STAGED, hw, in_channels, num_classes, tuple(stages), 0, eps)

    # -- derived quantities ---------------------------------------------

    @property
    def embed_dim(self) -> int:
        """Shortcut width (final stage width for the staged variant)."""
        return self.stages[-1].embed_dim

    @property
    def blocks(self) -> tuple[BlockSpec, ...]:
        return tuple(b for s in self.stages for b in s.blocks)

    @property
    def depth(self) -> int:
        return sum(len(s.blocks) for s in self.stages)

    @property
    def stage_offsets(self) -> tuple[int, ...]:
        offs, k = [], 0
        for s in self.stages:
            offs.append(k)
            k += len(s.blocks)
        return tuple(offs)

    def stage_of(self, k: int) -> int:
        for s, off in enumerate(self.stage_offsets):
            if off <= k < off + len(self.stages[s].blocks):
                return s
        raise IndexError(f"block {k} out of range for depth {self.depth}")

    @property
    def num_patches(self) -> int:
        if self.variant != VANILLA:
            h, w = self.grids[0]
            return h * w
        H, W = self.image_size
        return (H // self.patch_size) * (W // self.patch_size)

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1 if self.variant == VANILLA else self.num_patches

    @property
    def grids(self) -> tuple[tuple[int, int], ...]:
        """Token grid (h, w) of each stage."""
        if self.variant == VANILLA:
            P = self.patch_size
            return ((self.image_size[0] // P, self.image_size[1] // P),)
        out, (h, w) = [], self.image_size
        for s in self.stages:
            k, st = s.patch_kernel, s.patch_stride
            h = (h + 2 * (k // 2) - k) // st + 1
            w = (w + 2 * (k // 2) - k) // st + 1
            out.append((h, w))
        return tuple(out)

    def tokens_at(self, k: int) -> int:
        h, w = self.grids[self.stage_of(k)]
        return h * w + (1 if self.variant == VANILLA else 0)

    def iter_blocks(self) -> Iterator[tuple[int, int, BlockSpec]]:
        """Yield (global index, stage, block spec)."""
        k = 0
        for s, st in enumerate(self.stages):
            for b in st.blocks:
                yield k, s, b
                k += 1

    # -- editing ----------------------------------------------------------

    def with_block(self, k: int, **changes) -> "ArchSpec":
        s = self.stage_of(k)
        j = k - self.stage_offsets[s]
        st = self.stages[s]
        blocks = list(st.blocks)
        blocks[j] = replace(blocks[j], **changes)
        return self.with_stage(s, blocks=tuple(blocks))

    def with_stage(self, s: int, **changes) -> "ArchSpec":
        stages = list(self.stages)
        stages[s] = replace(stages[s], **changes)
        return replace(self, stages=tuple(stages))

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        stages = tuple(
            StageSpec(
                embed_dim=s["embed_dim"],
                blocks=tuple(BlockSpec(**b) for b in s["blocks"]),
                sr_ratio=s.get("sr_ratio", 1),
                patch_kernel=s.get("patch_kernel", 0),
                patch_stride=s.get("patch_stride", 0),
            )
            for s in d["stages"]
        )
        return cls(
            variant=d["variant"],
            image_size=tuple(d["image_size"]),
            in_channels=d["in_channels"],
            num_classes=d["num_classes"],
            stages=stages,
            patch_size=d.get("patch_size", 0),
            eps=d.get("eps", 1e-6),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class SpecIssue:
    code: str
    where: str
    message: str


def spec_issues(spec: ArchSpec) -> list[SpecIssue]:
    """Check every structural invariant of ``spec``; empty list means valid."""
    out: list[SpecIssue] = []

    def bad(code, where, msg):
        out.append(SpecIssue(code, where, msg))

    if spec.variant not in (VANILLA, STAGED):
        bad("spec.variant", "spec", f"unknown variant {spec.variant!r}")
        return out
    if not spec.stages:
        bad("spec.stages", "spec", "no stages")
        return out
    for name in ("in_channels", "num_classes"):
        if getattr(spec, name) < 1:
            bad("spec.extent", name, f"{name} must be >= 1")
    H, W = spec.image_size
    if spec.variant == VANILLA:
        if len(spec.stages) != 1:
            bad("spec.stages", "spec", "vanilla variant has exactly one stage")
        P = spec.patch_size
        if P < 1 or H % P or W % P:
            bad("spec.patch", "spec", f"image {H}x{W} not divisible by patch size {P}")
    else:
        for s, (st, (h, w)) in enumerate(zip(spec.stages, spec.grids)):
            if st.patch_kernel < 1 or st.patch_stride < 1:
                bad("spec.patch", f"stage{s}", "patch kernel and stride must be >= 1")
            if h < 1 or w < 1:
                bad("spec.patch", f"stage{s}", "stage grid collapsed to zero")
            elif st.sr_ratio > 1 and (h % st.sr_ratio or w % st.sr_ratio):
                bad("spec.sr", f"stage{s}", f"grid {h}x{w} not divisible by sr ratio {st.sr_ratio}")
        if spec.stages[-1].sr_ratio != 1:
            bad("spec.sr", f"stage{len(spec.stages) - 1}", "final stage has no spatial reduction")
    head_dims = set()
    for st_i, st in enumerate(spec.stages):
        if st.embed_dim < 1:
            bad("spec.extent", f"stage{st_i}", "embed_dim must be >= 1")
        for j, b in enumerate(st.blocks):
            where = f"block{spec.stage_offsets[st_i] + j}"
            if not (b.attn or b.ffn):
                bad("spec.flags", where, "block has neither attention nor FFN")
            if b.attn:
                if b.num_heads < 1 or b.attn_dim < 1 or b.attn_dim % b.num_heads:
                    bad("spec.heads", where, f"attention dim {b.attn_dim} not divisible by {b.num_heads} heads")
                else:
                    head_dims.add(b.attn_dim // b.num_heads)
                if st.sr_ratio > 1 and b.sr_dim < 1:
                    bad("spec.sr", where, "spatial-reduction width must be >= 1")
                if st.sr_ratio == 1 and b.sr_dim != 0:
                    bad("spec.sr", where, "sr_dim set on a block without spatial reduction")
            if b.ffn and b.ffn_dim < 1:
                bad("spec.extent", where, "ffn_dim must be >= 1")
    if len(head_dims) > 1:
        bad("spec.head_dim", "spec", f"per-head dims differ across blocks: {sorted(head_dims)}")
    for s, st in enumerate(spec.stages):
        try:
            pack_sublayers(st.blocks)
        except ValueError as e:
            bad("spec.flags", f"stage{s}", str(e))
    return out


def pack_sublayers(blocks) -> list[tuple[int, int]]:
    """Pair present halves into full blocks: [(attn source, ffn source), ...].

    The present sublayers, read in order, must alternate attention/FFN,
    starting with attention and ending with FFN. Whole-block removals and
    hybrid removals (FFN of k plus attention of k+1) both preserve this.
    """
    seq = []
    for j, b in enumerate(blocks):
        if b.attn:
            seq.append(("attn", j))
        if b.ffn:
            seq.append(("ffn", j))
    if len(seq) % 2:
        raise ValueError("illegal block flag pattern: unpaired half-block")
    pairs = []
    for i in range(0, len(seq), 2):
        (ka, ja), (kf, jf) = seq[i], seq[i + 1]
        if ka != "attn" or kf != "ffn":
            raise ValueError("illegal block flag pattern: halves do not alternate attention/FFN")
        pairs.append((ja, jf))
    return pairs


def is_canonical(spec: ArchSpec) -> bool:
    return all(b.attn and b.ffn for b in spec.blocks)


def shape_table(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor, in a fixed order."""
    t: dict[str, tuple[int, ...]] = {}
    K = spec.num_classes
    if spec.variant == VANILLA:
        D = spec.stages[0].embed_dim
        C, P = spec.in_channels, spec.patch_size
        t["patch_embed.weight"] = (D, C * P * P)
        t["patch_embed.bias"] = (D,)
        t["cls_token"] = (1, D)
        t["pos_embed"] = (spec.num_patches + 1, D)
        for k, _, b in spec.iter_blocks():
            _block_shapes(t, k, b, D, 1)
        t["norm.weight"] = (D,)
        t["norm.bias"] = (D,)
    else:
        prev = spec.in_channels
        for s, st in enumerate(spec.stages):
            D = st.embed_dim
            pk = st.patch_kernel
            t[f"stages.{s}.patch_embed.weight"] = (D, prev, pk, pk)
            t[f"stages.{s}.patch_embed.bias"] = (D,)
            t[f"stages.{s}.patch_norm.weight"] = (D,)
            t[f"stages.{s}.patch_norm.bias"] = (D,)
            for j, b in enumerate(st.blocks):
                _block_shapes(t, spec.stage_offsets[s] + j, b, D, st.sr_ratio, staged=True)
            t[f"stages.{s}.norm.weight"] = (D,)
            t[f"stages.{s}.norm.bias"] = (D,)
            prev = D
    t["head.weight"] = (K, spec.embed_dim)
    t["head.bias"] = (K,)
    return t


def _block_shapes(t, k, b: BlockSpec, D: int, sr: int, staged: bool = False) -> None:
    p = f"blocks.{k}."
    if b.attn:
        A = b.attn_dim
        t[p + "norm1.weight"] = (D,)
        t[p + "norm1.bias"] = (D,)
        t[p + "attn.q.weight"] = (A, D)
        t[p + "attn.q.bias"] = (A,)
        kv_in = D
        if sr > 1:
            S = b.sr_dim
            t[p + "attn.sr.weight"] = (S, D, sr, sr)
            t[p + "attn.sr.bias"] = (S,)
            t[p + "attn.sr_norm.weight"] = (S,)
            t[p + "attn.sr_norm.bias"] = (S,)
            kv_in = S
        for n in ("k", "v"):
            t[p + f"attn.{n}.weight"] = (A, kv_in)
            t[p + f"attn.{n}.bias"] = (A,)
        t[p + "attn.proj.weight"] = (D, A)
        t[p + "attn.proj.bias"] = (D,)
    if b.ffn:
        F = b.ffn_dim
        t[p + "norm2.weight"] = (D,)
        t[p + "norm2.bias"] = (D,)
        t[p + "mlp.fc1.weight"] = (F, D)
        t[p + "mlp.fc1.bias"] = (F,)
        if staged:
            t[p + "mlp.dwconv.weight"] = (F, 1, 3, 3)
            t[p + "mlp.dwconv.bias"] = (F,)
        t[p + "mlp.fc2.weight"] = (D, F)
        t[p + "mlp.fc2.bias"] = (D,)


ATTN_PARTS = ("norm1.", "attn.")
FFN_PARTS = ("norm2.", "mlp.")


def block_tensor_names(names, k: int, half: str | None = None) -> list[str]:
    """Names belonging to block ``k`` (optionally only its 'attn' or 'ffn' half)."""
    p = f"blocks.{k}."
    parts = {"attn": ATTN_PARTS, "ffn": FFN_PARTS, None: ATTN_PARTS + FFN_PARTS}[half]
    return [n for n in names if n.startswith(p) and n[len(p):].startswith(parts)]


__all__ = [
    "ArchSpec", "BlockSpec", "StageSpec", "SpecIssue", "VANILLA", "STAGED",
    "spec_issues", "pack_sublayers", "is_canonical", "shape_table", "block_tensor_names",
]
