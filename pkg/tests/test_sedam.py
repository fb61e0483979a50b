import pytest
import torch

from psrp.backbone import Pyramid
from psrp.config import SedamConfig
from psrp.errors import ConfigError, ShapeError
from psrp.layers import count_parameters
from psrp.model import init_weights
from psrp.sedam import SEDAM, decode, encode, sedam_apply

from fd import directional_check


def small(attention="channel_only", width=64, channels=32, fusion="add"):
    cfg = SedamConfig(width=width, attention=attention, fusion=fusion)
    return SEDAM(channels, cfg).double()


def test_encode_decode_shapes():
    m = SEDAM(256, SedamConfig())
    latent = encode(torch.randn(1, 256, 32, 32), m)
    assert latent.shape == (1, 640, 4, 4)
    assert decode(latent, m).shape == (1, 256, 32, 32)


def test_channel_schedule():
    m = SEDAM(256, SedamConfig())
    assert (m.encoder[0][0].in_channels, m.encoder[0][0].out_channels) == (256, 640)
    assert all(b[0].in_channels == 640 for b in m.encoder[1:])
    assert m.decoder[-1].proj.out_channels == 256
    assert len(m.encoder) == len(m.decoder) == 3


def test_zero_input_zero_latent():
    m = init_weights(small(), 0)
    assert torch.count_nonzero(m.encode(torch.zeros(1, 32, 16, 16, dtype=torch.float64))) == 0


def test_encode_shape_errors():
    m = small()
    with pytest.raises(ShapeError, match="divisible by 8"):
        m.encode(torch.zeros(1, 32, 20, 20, dtype=torch.float64))
    with pytest.raises(ShapeError):
        m.encode(torch.zeros(1, 16, 16, 16, dtype=torch.float64))
    with pytest.raises(ShapeError):
        m.decode(torch.zeros(1, 32, 2, 2, dtype=torch.float64))
    with pytest.raises(ConfigError):
        SedamConfig(width=100).validate()


def test_bilinear_preserves_constants():
    x = torch.full((1, 1, 3, 3), 0.7)
    y = torch.nn.functional.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    assert torch.allclose(y, torch.full((1, 1, 6, 6), 0.7), atol=0, rtol=1e-7)


def test_attention_variants_differ():
    torch.manual_seed(1)
    a = small("none")
    b = small("channel_only")
    state = {k: v for k, v in a.state_dict().items()}
    b.load_state_dict(state, strict=False)
    latent = torch.randn(1, 64, 2, 2, dtype=torch.float64)
    assert not torch.allclose(a.decode(latent), b.decode(latent))


def test_zero_weights_identity():
    m = small()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    levels = [torch.randn(2, 32, s, s, dtype=torch.float64) for s in (32, 16, 8, 4)]
    out = sedam_apply(Pyramid(levels), m)
    assert all(torch.equal(a, b) for a, b in zip(out.levels, levels))


def test_bypass_for_small_levels_at_128():
    m = init_weights(small(), 0)
    levels = [torch.randn(1, 32, s, s, dtype=torch.float64) for s in (32, 16, 8, 4)]
    out = m(Pyramid(levels))
    assert [tuple(x.shape) for x in out.levels] == [tuple(x.shape) for x in levels]
    assert out.levels[3] is levels[3]
    assert not torch.equal(out.levels[2], levels[2])


def test_level_error_names_level():
    m = small()
    with pytest.raises(ShapeError, match="level 1"):
        m(Pyramid([torch.zeros(1, 32, 16, 16, dtype=torch.float64), torch.zeros(1, 32, 12, 12, dtype=torch.float64)], (4, 8)))
    with pytest.raises(ShapeError, match="level 0"):
        m(Pyramid([torch.zeros(1, 8, 16, 16, dtype=torch.float64)], (4,)))


def test_concat_project_fusion():
    m = small(fusion="concat_project")
    assert m.fuse.in_channels == 64
    assert m.enhance(torch.randn(1, 32, 8, 8, dtype=torch.float64)).shape == (1, 32, 8, 8)


def test_parameter_count_independent_of_depth():
    m = small()
    n = count_parameters(m)
    for depth in (3, 4):
        levels = [torch.randn(1, 32, 8 * 2 ** (depth - i), 8 * 2 ** (depth - i), dtype=torch.float64) for i in range(depth)]
        m(Pyramid(levels, (4, 8, 16, 32)[:depth]))
        assert count_parameters(m) == n
    assert len(m.state_dict()) == len(small().state_dict())


def test_gradients_accumulate_across_levels():
    torch.manual_seed(2)
    m = small()
    levels = [torch.randn(1, 32, s, s, dtype=torch.float64) for s in (32, 16, 8)]
    m.zero_grad()
    sum(x.square().sum() for x in m(Pyramid(levels, (4, 8, 16))).levels).backward()
    joint = [p.grad.clone() for p in m.parameters()]
    per_level = [torch.zeros_like(p) for p in m.parameters()]
    for x in levels:
        m.zero_grad()
        m.enhance(x).square().sum().backward()
        for acc, p in zip(per_level, m.parameters()):
            acc += p.grad
    for a, b in zip(joint, per_level):
        torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-12)


def test_groupnorm_constant_group_is_zero():
    gn = torch.nn.GroupNorm(2, 64).double()
    x = torch.cat([torch.full((1, 32, 4, 4), 3.0), torch.full((1, 32, 4, 4), -1.0)], dim=1).double()
    assert torch.equal(gn(x), torch.zeros_like(x))


@pytest.mark.parametrize("attention", ["none", "cbam", "cbam_min", "channel_only"])
def test_gradient_through_encode_decode(attention):
    m = init_weights(small(attention), 0)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    x = torch.randn(1, 32, 16, 16, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 32, 16, 16, dtype=torch.float64)
    assert directional_check(lambda: (m.decode(m.encode(x)) * w).sum(), [x, *m.parameters()]) < 1e-3
