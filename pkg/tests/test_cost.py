import pytest

from vitprune.arch import ArchSpec
from vitprune.cost import cost_report, deit_spec
from vitprune.model import init_model


def vit_params(D, L, K=1000, P=16, C=3, N=196, r=4):
    """Closed-form ViT parameter count written out term by term."""
    embed = D * C * P * P + D + D + (N + 1) * D
    block = 4 * D + 3 * (D * D + D) + (D * D + D) + (r * D * D + r * D) + (r * D * D + D)
    return embed + L * block + 2 * D + K * D + K


def vit_macs(D, L, K=1000, P=16, C=3, N=196, r=4):
    T = N + 1
    block = 4 * T * D * D + 2 * T * T * D + 2 * r * T * D * D
    return N * D * C * P * P + L * block + D * K


@pytest.mark.parametrize("size,D,published", [("tiny", 192, 5.7e6), ("small", 384, 22.1e6), ("base", 768, 86.6e6)])
def test_deit_parameter_counts(size, D, published):
    rep = cost_report(deit_spec(size))
    assert rep.params == vit_params(D, 12)
    assert abs(rep.params - published) / published < 0.01
    assert rep.macs == vit_macs(D, 12)


def test_breakdown_sums_to_totals():
    rep = cost_report(deit_spec("tiny"))
    assert sum(p for _, p, _ in rep.rows()) == rep.params
    assert sum(m for _, _, m in rep.rows()) == rep.macs
    assert [r[0] for r in rep.rows()][:3] == ["embed", "blocks.0.attn", "blocks.0.mlp"]
    assert rep.image_size == (224, 224)


def test_params_match_initialized_model():
    for spec in (ArchSpec.vit(8, 4, 12, 3, 3, 2.0, 5),
                 ArchSpec.pvt(16, (4, 8), (1, 2), (1, 2), (2, 1), (2, 1), (3, 3), (4, 2), 4)):
        assert cost_report(spec).params == init_model(spec).num_params


def test_removed_sublayers_cost_nothing():
    spec = ArchSpec.vit(8, 4, 8, 2, 2, 2.0, 3)
    rep = cost_report(spec.with_block(1, ffn=False))
    assert "blocks.1.mlp" not in rep.breakdown
    assert rep.macs == cost_report(spec).macs - 2 * 5 * 8 * 16


def test_staged_attention_macs_include_reduction():
    spec = ArchSpec.pvt(16, (4,), (1,), (1,), (2,), (2,), (3,), (4,), 4)
    rep = cost_report(spec)
    T, D, Tk = 16, 4, 4
    # q, k, v, the sr conv (2x2 patches), scores and values, output projection
    expect = T * D * D + 2 * Tk * D * D + Tk * D * D * 4 + 2 * T * Tk * D + T * D * D
    assert rep.breakdown["blocks.0.attn"][1] == expect
    assert rep.breakdown["blocks.0.mlp"][1] == 2 * T * D * 8 + T * 8 * 9


def test_other_resolution_rejected():
    with pytest.raises(ValueError):
        cost_report(deit_spec("tiny"), 384)
    assert cost_report(deit_spec("tiny"), (224, 224)).params == cost_report(deit_spec("tiny")).params
