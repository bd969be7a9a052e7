import pytest
import torch
import torch.nn.functional as F
from torch import nn

from xview_seg.fusion import BottleneckFusion, MaskEmbed, downsample, inject_mask, upsample

torch.manual_seed(0)


def test_mask_embed_shapes():
    e = MaskEmbed(64)
    assert e(torch.ones(1, 70, 70)).shape == (1, 64, 35, 35)
    assert MaskEmbed(8)(torch.ones(1, 518, 518)).shape == (1, 8, 259, 259)
    with pytest.raises(ValueError):
        e(torch.ones(1, 70, 70), feature_hw=(36, 36))


def test_zero_mask_zero_bias_embeds_to_zero():
    e = MaskEmbed(16)
    nn.init.zeros_(e.down.bias)
    nn.init.zeros_(e.proj.bias)
    assert torch.count_nonzero(e(torch.zeros(2, 70, 70))) == 0


def test_inject_mask_is_elementwise_sum():
    f = torch.randn(2, 8, 35, 35)
    e = torch.randn(2, 8, 35, 35)
    assert torch.equal(inject_mask(f, torch.zeros_like(f)), f)
    assert torch.equal(inject_mask(torch.zeros_like(e), e), e)
    assert torch.equal(inject_mask(f, e), f + e)
    with pytest.raises(ValueError):
        inject_mask(f, e[:, :, :34])


def test_fusion_shapes_and_grid():
    m = BottleneckFusion(64, 1, 5)
    f_s, f_t = torch.randn(1, 64, 35, 35), torch.randn(1, 64, 35, 35)
    o_s, o_t = m(f_s, f_t, 7)
    assert o_s.shape == o_t.shape == (1, 64, 35, 35)
    assert downsample(torch.randn(1, 4, 259, 259), 7).shape[-2:] == (37, 37)
    with pytest.raises(ValueError):
        m(torch.randn(1, 64, 36, 36), torch.randn(1, 64, 36, 36), 7)


def _identity_fusion(c):
    m = BottleneckFusion(c, 1, 5)
    # value path = identity, output projection = identity, queries/keys zero
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.attn.v_proj.weight.copy_(torch.eye(c))
        m.attn.out_proj.weight.copy_(torch.eye(c))
        m.norm1.weight.fill_(1.0)
        m.norm2.weight.fill_(1.0)
    return m


def test_zero_value_path_reduces_to_resampling():
    """Attention that passes averages of normalised tokens and a zero FFN leave
    x + mean-of-LN(x); with a zero value path the output is pure down-up."""
    c = 8
    m = _identity_fusion(c)
    with torch.no_grad():
        m.attn.v_proj.weight.zero_()
    f_s, f_t = torch.randn(1, c, 35, 35), torch.randn(1, c, 35, 35)
    o_s, o_t = m(f_s, f_t, 7)
    torch.testing.assert_close(o_s, upsample(F.avg_pool2d(f_s, 7), (35, 35)), rtol=0, atol=1e-6)
    torch.testing.assert_close(o_t, upsample(F.avg_pool2d(f_t, 7), (35, 35)), rtol=0, atol=1e-6)


def test_token_layout_matches_map_layout():
    m = BottleneckFusion(16, 2, 5).double()
    f_s, f_t = torch.randn(2, 16, 35, 35, dtype=torch.float64), torch.randn(2, 16, 35, 35, dtype=torch.float64)
    o_s, o_t = m(f_s, f_t, 7)
    t_s, t_t = m.forward_tokens(f_s.flatten(2).transpose(1, 2), f_t.flatten(2).transpose(1, 2), (35, 35), 7)
    torch.testing.assert_close(t_s, o_s.flatten(2).transpose(1, 2), rtol=0, atol=1e-12)
    torch.testing.assert_close(t_t, o_t.flatten(2).transpose(1, 2), rtol=0, atol=1e-12)


def test_views_are_coupled():
    m = BottleneckFusion(16, 1, 5).double()
    f_s = torch.randn(1, 16, 35, 35, dtype=torch.float64)
    f_t = torch.randn(1, 16, 35, 35, dtype=torch.float64, requires_grad=True)
    o_s, _ = m(f_s, f_t, 7)
    (g,) = torch.autograd.grad(o_s.sum(), f_t)
    assert g.abs().max() > 1e-6
