"""Analytic parameter and multiply-accumulate counts.

MACs count every matrix product, the two attention products (QK^T and AV)
and every convolution, for one image at the spec's resolution. LayerNorm,
softmax, GELU, residual additions and bias additions are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .arch import STAGED, VANILLA, ArchSpec, shape_table


@dataclass
class CostReport:
    params: int
    macs: int
    breakdown: dict[str, tuple[int, int]] = field(default_factory=dict)  # module -> (params, macs)
    image_size: tuple[int, int] = (0, 0)

    def rows(self) -> list[tuple[str, int, int]]:
        return [(name, p, m) for name, (p, m) in self.breakdown.items()]


def _module_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "blocks":
        sub = parts[2]
        return f"blocks.{parts[1]}.{'attn' if sub in ('norm1', 'attn') else 'mlp'}"
    if parts[0] == "stages":
        return f"stages.{parts[1]}.{'norm' if parts[2] == 'norm' else 'patch_embed'}"
    if name in ("cls_token", "pos_embed", "patch_embed.weight", "patch_embed.bias"):
        return "embed"
    return parts[0]


def cost_report(spec: ArchSpec, image_size: int | tuple[int, int] | None = None) -> CostReport:
    """Exact parameter count and per-module MACs.

    ``image_size`` defaults to the spec's own resolution and must equal it;
    the position embedding ties a plain ViT to one token count.
    """
    if image_size is not None:
        hw = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
        if hw != tuple(spec.image_size):
            raise ValueError(f"cost is defined at the spec resolution {spec.image_size}, got {hw}")
    params: dict[str, int] = {}
    for name, shape in shape_table(spec).items():
        n = 1
        for d in shape:
            n *= d
        mod = _module_of(name)
        params[mod] = params.get(mod, 0) + n
    macs: dict[str, int] = {}
    if spec.variant == VANILLA:
        D = spec.stages[0].embed_dim
        C, P = spec.in_channels, spec.patch_size
        N = spec.num_patches
        macs["embed"] = N * D * C * P * P
    else:
        prev = spec.in_channels
        for s, (st, (h, w)) in enumerate(zip(spec.stages, spec.grids)):
            macs[f"stages.{s}.patch_embed"] = h * w * st.embed_dim * prev * st.patch_kernel ** 2
            prev = st.embed_dim
    for k, s, b in spec.iter_blocks():
        st = spec.stages[s]
        D = st.embed_dim
        T = spec.tokens_at(k)
        if b.attn:
            A = b.attn_dim
            if spec.variant == STAGED and st.sr_ratio > 1:
                Tk = T // st.sr_ratio ** 2
                kv_in = b.sr_dim
                m = Tk * b.sr_dim * D * st.sr_ratio ** 2
            else:
                Tk, kv_in, m = T, D, 0
            m += T * D * A + 2 * Tk * kv_in * A  # q, k, v
            m += 2 * T * Tk * A  # scores and weighted values
            m += T * A * D  # output projection
            macs[f"blocks.{k}.attn"] = m
        if b.ffn:
            F = b.ffn_dim
            m = 2 * T * D * F
            if spec.variant == STAGED:
                m += T * F * 9
            macs[f"blocks.{k}.mlp"] = m
    macs["head"] = spec.embed_dim * spec.num_classes
    names = list(params) + [m for m in macs if m not in params]
    breakdown = {n: (params.get(n, 0), macs.get(n, 0)) for n in names}
    return CostReport(sum(params.values()), sum(macs.values()), breakdown, tuple(spec.image_size))


def deit_spec(size: str) -> ArchSpec:
    """DeiT-Tiny/Small/Base shapes at 224x224 with 1000 classes."""
    dims = {"tiny": (192, 3), "small": (384, 6), "base": (768, 12)}
    d, h = dims[size.lower()]
    return ArchSpec.vit(image_size=224, patch_size=16, embed_dim=d, depth=12, num_heads=h, mlp_ratio=4, num_classes=1000)
