import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from psrp.attention import (
    CBAM,
    METHOD_OF,
    AttentionVariant,
    ChannelAttention,
    apply_attention,
    build_attention,
    cbam,
    channel_attention_ours,
    pool_across_channels,
    pool_global,
)
from psrp.errors import ConfigError, ShapeError

from fd import directional_check


def zero_params(m):
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    return m


def test_pool_global_hand_example():
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert pool_global(x, "avg").item() == 2.5
    assert pool_global(x, "max").item() == 4
    assert pool_global(x, "min").item() == 1


def test_pool_global_constant_and_errors():
    x = torch.full((1, 2, 3, 3), 1.5)
    for mode in ("avg", "max", "min"):
        assert torch.equal(pool_global(x, mode), torch.full((1, 2), 1.5))
    with pytest.raises(ShapeError):
        pool_global(torch.zeros(1, 2, 0, 3), "avg")
    with pytest.raises(ConfigError):
        pool_global(x, "median")


def test_pool_across_channels_hand_example():
    x = torch.cat([torch.ones(1, 1, 3, 3), torch.full((1, 1, 3, 3), 3.0)], dim=1)
    planes = pool_across_channels(x, {"min", "max", "avg"})
    assert torch.equal(planes[0, 0], torch.full((3, 3), 2.0))
    assert torch.equal(planes[0, 1], torch.full((3, 3), 3.0))
    assert torch.equal(planes[0, 2], torch.full((3, 3), 1.0))
    assert pool_across_channels(x, ["max", "avg"]).shape[1] == 2


def test_pool_across_channels_single_channel_and_errors():
    x = torch.randn(2, 1, 4, 5)
    planes = pool_across_channels(x, ("avg", "max", "min"))
    for i in range(3):
        assert torch.equal(planes[:, i : i + 1], x)
    with pytest.raises(ConfigError):
        pool_across_channels(x, ())


def test_variant_method_mapping():
    assert {v.value: m for v, m in METHOD_OF.items()} == {"none": "A", "cbam": "B", "cbam_min": "C", "channel_only": "OURS"}


def test_channel_attention_zero_mlp_halves():
    ca = zero_params(ChannelAttention(32, 16))
    x = torch.randn(2, 32, 5, 5)
    assert torch.equal(ca(x), 0.5 * x)


def test_channel_attention_constant_input_paths_agree():
    ca = ChannelAttention(32, 16)
    # dyadic values on a 4x4 grid keep the mean exact
    x = (torch.randn(1, 32, 1, 1) * 8).round().div(8).expand(1, 32, 4, 4)
    assert torch.equal(pool_global(x, "avg"), pool_global(x, "max"))
    assert torch.allclose(ca.mlp_avg(pool_global(x, "avg")), ca.mlp_max(pool_global(x, "max")))


def test_channel_attention_shared_switch():
    shared = ChannelAttention(32, 16, shared_mlp=True)
    split = ChannelAttention(32, 16, shared_mlp=False)
    assert shared.mlp_avg is shared.mlp_max
    assert sum(p.numel() for p in split.parameters()) == 2 * sum(p.numel() for p in shared.parameters())


def test_channel_mismatch_and_reduction_errors():
    with pytest.raises(ShapeError):
        ChannelAttention(32)(torch.zeros(1, 16, 4, 4))
    with pytest.raises(ShapeError):
        CBAM(32)(torch.zeros(1, 16, 4, 4))
    with pytest.raises(ConfigError):
        ChannelAttention(30, 16)
    with pytest.raises(ConfigError):
        CBAM(32, kernel_size=4)


def test_cbam_zero_params_quarter():
    x = torch.randn(2, 32, 6, 6)
    for min_pool in (False, True):
        m = zero_params(CBAM(32, min_pool=min_pool))
        assert torch.equal(m(x), 0.25 * x)


def test_cbam_plane_counts():
    assert CBAM(32, min_pool=False).spatial.in_channels == 2
    assert CBAM(32, min_pool=True).spatial.in_channels == 3


def test_cbam_spatially_constant_input_gives_constant_gate():
    m = CBAM(32)
    x = torch.randn(1, 32, 1, 1).expand(1, 32, 9, 9).contiguous()
    _, g_s = m.gates(x)
    # zero padding perturbs the border; the interior sees a constant field
    inner = g_s[..., 3:-3, 3:-3]
    assert torch.allclose(inner, inner.flatten()[0].expand_as(inner))
    m1 = CBAM(32, kernel_size=1)
    _, g1 = m1.gates(x)
    assert torch.allclose(g1, g1.flatten()[0].expand_as(g1))


def test_apply_attention_dispatch():
    x = torch.randn(1, 32, 4, 4)
    assert apply_attention(x, "none", None) is x
    ca = ChannelAttention(32)
    assert torch.equal(apply_attention(x, AttentionVariant.CHANNEL_ONLY, ca), channel_attention_ours(x, ca))
    cb = CBAM(32)
    assert torch.equal(apply_attention(x, "cbam", cb), cbam(x, cb, False))
    with pytest.raises(ConfigError):
        apply_attention(x, "channel_only", cb)
    with pytest.raises(ConfigError):
        apply_attention(x, "cbam_min", cb)
    with pytest.raises(ConfigError):
        apply_attention(x, "cbam", ca)
    with pytest.raises(ConfigError):
        apply_attention(x, "none", ca)


def test_cbam_min_differs_from_cbam_with_shared_params():
    torch.manual_seed(3)
    b = CBAM(32, min_pool=False)
    c = CBAM(32, min_pool=True)
    with torch.no_grad():
        c.mlp.load_state_dict(b.mlp.state_dict())
        c.spatial.weight[:, :2] = b.spatial.weight
        c.spatial.bias.copy_(b.spatial.bias)
        c.spatial.weight[:, 2].normal_(0, 0.1)
    x = torch.randn(1, 32, 8, 8)
    assert not torch.allclose(b(x), c(x))


@pytest.mark.parametrize("variant", [v.value for v in AttentionVariant])
def test_shape_preserved(variant):
    m = build_attention(variant, 32)
    x = torch.randn(3, 32, 7, 5)
    assert m(x).shape == x.shape


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_gating_bounds(n, h, w, seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 32, h, w, generator=gen, dtype=torch.float64) * 3
    ca = ChannelAttention(32).double()
    g = ca.gate(x)
    assert ((g > 0) & (g < 1)).all()
    assert (ca(x).abs() <= x.abs()).all()
    for min_pool in (False, True):
        m = CBAM(32, min_pool=min_pool).double()
        g_c, g_s = m.gates(x)
        assert ((g_c > 0) & (g_c < 1)).all() and ((g_s > 0) & (g_s < 1)).all()
        assert (m(x).abs() <= x.abs()).all()
    planes = pool_across_channels(x, ("avg", "max", "min"))
    assert (planes[:, 2] <= planes[:, 0]).all() and (planes[:, 0] <= planes[:, 1]).all()


@pytest.mark.parametrize("variant", ["cbam", "cbam_min", "channel_only"])
def test_gradient_matches_finite_differences(variant):
    m = build_attention(variant, 32).double()
    x = torch.randn(2, 32, 6, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 32, 6, 6, dtype=torch.float64)
    assert directional_check(lambda: (m(x) * w).sum(), [x, *m.parameters()]) < 1e-3
