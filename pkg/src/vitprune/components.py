"""Channel groups whose weight slices must be cut together.

Component ids:
  1  shortcut chain (network-wide in plain ViTs, per stage in staged models)
  2  attention embedding inside one block (scored by masking)
  3  FFN hidden layer inside one block
  4  spatial-reduction embedding inside one block (staged models only)

Channel ``j`` of a group is index ``j`` along every (tensor, axis) the group
lists, so a group's slice list is just its (tensor, axis) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

from .arch import STAGED, VANILLA, ArchSpec, shape_table

SHORTCUT, ATTENTION, FFN, SPATIAL = 1, 2, 3, 4


@dataclass(frozen=True)
class ChannelGroup:
    component: int
    scope: str  # "net", "stage<s>" or "block<k>"
    size: int
    axes: tuple[tuple[str, int], ...]
    mask_only: bool = False

    @property
    def key(self) -> tuple[int, str]:
        return (self.component, self.scope)

    @property
    def block(self) -> int | None:
        return int(self.scope[5:]) if self.scope.startswith("block") else None

    @property
    def stage(self) -> int | None:
        return int(self.scope[5:]) if self.scope.startswith("stage") else None

    def slices(self, j: int) -> list[tuple[str, int, int]]:
        """Exact (tensor, axis, index) coordinates cut with channel ``j``."""
        if not 0 <= j < self.size:
            raise IndexError(f"channel {j} out of range for group {self.key} of size {self.size}")
        return [(name, ax, j) for name, ax in self.axes]


@dataclass(frozen=True)
class ComponentMap:
    groups: tuple[ChannelGroup, ...]

    def __iter__(self):
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def get(self, component: int, scope: str) -> ChannelGroup:
        for g in self.groups:
            if g.component == component and g.scope == scope:
                return g
        raise KeyError(f"no channel group ({component}, {scope!r})")

    def channel_keys(self) -> list[tuple[int, str, int]]:
        return [(g.component, g.scope, j) for g in self.groups for j in range(g.size)]


def _block_shortcut_axes(k: int, b, sr: int) -> list[tuple[str, int]]:
    p = f"blocks.{k}."
    ax = []
    if b.attn:
        ax += [(p + "norm1.weight", 0), (p + "norm1.bias", 0), (p + "attn.q.weight", 1)]
        if sr > 1:
            ax.append((p + "attn.sr.weight", 1))
        else:
            ax += [(p + "attn.k.weight", 1), (p + "attn.v.weight", 1)]
        ax += [(p + "attn.proj.weight", 0), (p + "attn.proj.bias", 0)]
    if b.ffn:
        ax += [(p + "norm2.weight", 0), (p + "norm2.bias", 0), (p + "mlp.fc1.weight", 1),
               (p + "mlp.fc2.weight", 0), (p + "mlp.fc2.bias", 0)]
    return ax


def _block_groups(spec: ArchSpec, k: int, b, sr: int) -> list[ChannelGroup]:
    p = f"blocks.{k}."
    scope = f"block{k}"
    out = []
    if b.attn:
        ax = []
        for n in ("q", "k", "v"):
            ax += [(p + f"attn.{n}.weight", 0), (p + f"attn.{n}.bias", 0)]
        ax.append((p + "attn.proj.weight", 1))
        out.append(ChannelGroup(ATTENTION, scope, b.attn_dim, tuple(ax), mask_only=True))
    if b.ffn:
        ax = [(p + "mlp.fc1.weight", 0), (p + "mlp.fc1.bias", 0)]
        if spec.variant == STAGED:
            ax += [(p + "mlp.dwconv.weight", 0), (p + "mlp.dwconv.bias", 0)]
        ax.append((p + "mlp.fc2.weight", 1))
        out.append(ChannelGroup(FFN, scope, b.ffn_dim, tuple(ax)))
    if b.attn and sr > 1:
        ax = [(p + "attn.sr.weight", 0), (p + "attn.sr.bias", 0), (p + "attn.sr_norm.weight", 0),
              (p + "attn.sr_norm.bias", 0), (p + "attn.k.weight", 1), (p + "attn.v.weight", 1)]
        out.append(ChannelGroup(SPATIAL, scope, b.sr_dim, tuple(ax)))
    return out


def component_map(spec: ArchSpec) -> ComponentMap:
    """All prunable channel groups of ``spec``, in a fixed order."""
    groups: list[ChannelGroup] = []
    if spec.variant == VANILLA:
        D = spec.stages[0].embed_dim
        ax = [("patch_embed.weight", 0), ("patch_embed.bias", 0), ("cls_token", 1), ("pos_embed", 1)]
        for k, _, b in spec.iter_blocks():
            ax += _block_shortcut_axes(k, b, 1)
        ax += [("norm.weight", 0), ("norm.bias", 0), ("head.weight", 1)]
        groups.append(ChannelGroup(SHORTCUT, "net", D, tuple(ax)))
    else:
        n = len(spec.stages)
        for s, st in enumerate(spec.stages):
            ax = [(f"stages.{s}.patch_embed.weight", 0), (f"stages.{s}.patch_embed.bias", 0),
                  (f"stages.{s}.patch_norm.weight", 0), (f"stages.{s}.patch_norm.bias", 0)]
            for j, b in enumerate(st.blocks):
                ax += _block_shortcut_axes(spec.stage_offsets[s] + j, b, st.sr_ratio)
            ax += [(f"stages.{s}.norm.weight", 0), (f"stages.{s}.norm.bias", 0)]
            ax.append((f"stages.{s + 1}.patch_embed.weight", 1) if s + 1 < n else ("head.weight", 1))
            groups.append(ChannelGroup(SHORTCUT, f"stage{s}", st.embed_dim, tuple(ax)))
    for k, s, b in spec.iter_blocks():
        groups.extend(_block_groups(spec, k, b, spec.stages[s].sr_ratio))
    return ComponentMap(tuple(groups))


def untouched_axes(spec: ArchSpec) -> set[tuple[str, int]]:
    """Axes no channel group may cut (inputs, token counts, classes, kernel taps)."""
    table = shape_table(spec)
    covered = {a for g in component_map(spec) for a in g.axes}
    return {(n, ax) for n, shp in table.items() for ax in range(len(shp)) if (n, ax) not in covered}
