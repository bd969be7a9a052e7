import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from xview_seg.core import RunConfig
from xview_seg.encoder import GroundTruthTracker, ToyEncoder
from xview_seg.head import SegmentationHead, run_head
from xview_seg.prediction import (
    DecoderBlock,
    EmptyMaskError,
    FourierEncoding,
    MaskPredictor,
    PromptEncoder,
    foreground_pixels,
    sample_point_features,
    sample_points,
)
from xview_seg.synthetic import ViewTransform, generate_pairs

# --------------------------------------------------------------- k-means points


def test_five_pixels_five_points():
    m = np.zeros((20, 20), np.uint8)
    coords = [(1, 2), (5, 5), (10, 3), (17, 17), (0, 19)]
    for x, y in coords:
        m[y, x] = 1
    pts = sample_points(m, 5, 0).points
    assert {tuple(p) for p in pts.astype(int)} == set(coords)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_single_cluster_is_pixel_nearest_the_mean(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((12, 12)) < 0.3).astype(np.uint8)
    if not m.any():
        m[3, 4] = 1
    pix = foreground_pixels(m).astype(float)
    d = ((pix - pix.mean(axis=0)) ** 2).sum(axis=1)
    best = pix[d == d.min()]
    got = sample_points(m, 1, seed).points[0]
    assert any((got == b).all() for b in best)


def test_full_scale_mask_gives_five_foreground_points():
    m = np.zeros((518, 518), np.uint8)
    m[100:300, 150:400] = 1
    ps = sample_points(m, 5, 3)
    assert len(ps) == 5
    assert all(m[int(y), int(x)] for x, y in ps.points)


def test_small_mask_pads_with_last_point():
    m = np.zeros((8, 8), np.uint8)
    m[2, 3] = m[5, 6] = 1
    ps = sample_points(m, 5, 0)
    assert len(ps) == 5
    assert ps.meta == {"requested": 5, "distinct": 2}
    assert (ps.points[2:] == ps.points[1]).all()


def test_empty_mask_raises():
    with pytest.raises(EmptyMaskError, match="empty source mask"):
        sample_points(np.zeros((5, 5), np.uint8), 3, 0)


def test_sampling_is_deterministic_and_layout_independent():
    rng = np.random.default_rng(9)
    m = (rng.random((30, 30)) < 0.2).astype(np.uint8)
    a = sample_points(m, 5, 11).points
    b = sample_points(np.asfortranarray(m), 5, 11).points
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, sample_points(m.astype(bool), 5, 11).points)


# --------------------------------------------------------------- point features


def test_point_features_constant_and_nodes():
    f = torch.full((1, 4, 35, 35), 3.25)
    pts = torch.tensor([[[10.0, 20.0], [0.0, 69.0]]])
    torch.testing.assert_close(sample_point_features(pts, f), torch.full((1, 2, 4), 3.25))
    f = torch.randn(1, 4, 35, 35, dtype=torch.float64)
    # feature cell (j, i) is centred on pixel (2i + 0.5, 2j + 0.5)
    node = torch.tensor([[[2 * 7 + 0.5, 2 * 3 + 0.5]]], dtype=torch.float64)
    torch.testing.assert_close(sample_point_features(node, f)[0, 0], f[0, :, 3, 7], rtol=0, atol=1e-12)


def test_point_feature_midpoint_is_average():
    f = torch.randn(1, 4, 35, 35, dtype=torch.float64)
    mid = torch.tensor([[[2 * 7.5 + 0.5, 2 * 3 + 0.5]]], dtype=torch.float64)
    want = (f[0, :, 3, 7] + f[0, :, 3, 8]) / 2
    torch.testing.assert_close(sample_point_features(mid, f)[0, 0], want, rtol=0, atol=1e-12)


# --------------------------------------------------------------- prompts & decoder


@pytest.mark.parametrize("k,n", [(5, 16), (1, 4), (9, 28)])
def test_query_length(k, n):
    cfg = RunConfig.toy(k_points=k)
    head = SegmentationHead(cfg)
    p = torch.rand(1, k, 2) * 69
    q = head.encode_prompts(p, p, torch.randn(1, 64, 35, 35), (70, 70), 1, torch.float32)
    assert q.shape == (1, n, 64)
    blk = head.decoder.blocks[0]
    q2, img = blk(q, q, torch.randn(1, 2450, 64), torch.randn(1, 2450, 64))
    assert q2.shape == q.shape and img.shape == (1, 2450, 64)


def test_prompt_cardinality_mismatch_raises():
    head = SegmentationHead(RunConfig.toy())
    with pytest.raises(ValueError):
        head.encode_prompts(torch.zeros(1, 5, 2), torch.zeros(1, 4, 2), torch.randn(1, 64, 35, 35), (70, 70), 1,
                            torch.float32)


def test_roles_differ_by_role_embeddings():
    enc = PromptEncoder(16, FourierEncoding(16))
    p = torch.rand(1, 3, 2) * 69
    e_s = enc(p, (70, 70), PromptEncoder.SOURCE)
    e_t = enc(p, (70, 70), PromptEncoder.TARGET)
    torch.testing.assert_close(e_t - e_s, (enc.role[1] - enc.role[0]).expand_as(e_s), rtol=0, atol=1e-6)


def test_zero_value_attention_leaves_residual_paths():
    blk = DecoderBlock(16, 1)
    with torch.no_grad():
        for a in (blk.self_attn, blk.p2i, blk.i2p):
            a.v_proj.weight.zero_()
            a.v_proj.bias.zero_()
            a.out_proj.bias.zero_()
    q, img = torch.randn(1, 4, 16), torch.randn(1, 50, 16)
    q2, img2 = blk(q, torch.randn_like(q), img, torch.randn_like(img))
    torch.testing.assert_close(q2, q + blk.mlp(blk.norm_mlp(q)))
    torch.testing.assert_close(img2, img)


def test_zero_mlp_output_gives_half_everywhere():
    head = SegmentationHead(RunConfig.toy())
    with torch.no_grad():
        head.decoder.predictor.mlp.fc2.weight.zero_()
        head.decoder.predictor.mlp.fc2.bias.zero_()
    out = head(torch.randn(1, 64, 35, 35), torch.randn(1, 64, 35, 35), torch.ones(1, 70, 70),
               torch.full((1, 5, 2), 30.0), torch.full((1, 5, 2), 30.0))
    assert torch.equal(out.initial, torch.full_like(out.initial, 0.5))


def test_constant_target_features_give_constant_mask():
    pred = MaskPredictor(8, 1)
    h_t = torch.randn(1, 1, 8).expand(1, 25, 8)
    z = pred(torch.randn(1, 1, 8), torch.zeros(1, 1, 8), h_t, torch.zeros(1, 25, 8))
    assert torch.allclose(z, z[:, :1].expand_as(z))


def test_mask_logits_match_loop_oracle():
    torch.manual_seed(3)
    pred = MaskPredictor(4, 1).double()
    o = torch.randn(1, 1, 4, dtype=torch.float64)
    h_t = torch.randn(1, 25, 4, dtype=torch.float64)
    with torch.no_grad():
        z = pred(o, torch.zeros_like(o), h_t, torch.zeros_like(h_t))[0]
    # independent recomputation: attention by hand, then MLP, then per-pixel dot products
    a = pred.attn
    torch.set_grad_enabled(False)
    qn = torch.nn.functional.layer_norm(o[0], (4,), pred.norm_q.weight, pred.norm_q.bias)
    kn = torch.nn.functional.layer_norm(h_t[0], (4,), pred.norm_k.weight, pred.norm_k.bias)
    qq = qn @ a.q_proj.weight.T + a.q_proj.bias
    kk = kn @ a.k_proj.weight.T + a.k_proj.bias
    vv = kn @ a.v_proj.weight.T + a.v_proj.bias
    w = torch.softmax(qq @ kk.T / 2.0, dim=-1)
    o_tilde = o[0] + (w @ vv) @ a.out_proj.weight.T + a.out_proj.bias
    hidden = torch.nn.functional.gelu(o_tilde @ pred.mlp.fc1.weight.T + pred.mlp.fc1.bias)
    wvec = (hidden @ pred.mlp.fc2.weight.T + pred.mlp.fc2.bias)[0]
    for n in range(25):
        want = sum(wvec[c].item() * h_t[0, n, c].item() for c in range(4))
        assert abs(z[n].item() - want) < 1e-6
    torch.set_grad_enabled(True)


# --------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def toy_pair():
    return generate_pairs(1, "medium", 0, 70)[0]


def test_run_head_full_resolution_and_range(toy_pair):
    cfg = RunConfig.toy()
    enc, head = ToyEncoder(cfg), SegmentationHead(cfg)
    m = run_head(enc, head, toy_pair.image_s, toy_pair.image_t, toy_pair.mask_s,
                 GroundTruthTracker(toy_pair.transform.apply))
    assert m.shape == (70, 70)
    assert ((m > 0) & (m < 1)).all()
    assert np.abs(m - 0.5).mean() < 0.1


def test_run_head_rejects_empty_source(toy_pair):
    cfg = RunConfig.toy()
    with pytest.raises(ValueError):
        run_head(ToyEncoder(cfg), SegmentationHead(cfg), toy_pair.image_s, toy_pair.image_t,
                 np.zeros((70, 70), np.uint8), GroundTruthTracker(lambda p: p))


def test_moving_target_points_changes_the_mask(toy_pair):
    cfg = RunConfig.toy(use_refinement=False)
    enc, head = ToyEncoder(cfg), SegmentationHead(cfg)
    a = run_head(enc, head, toy_pair.image_s, toy_pair.image_t, toy_pair.mask_s, GroundTruthTracker(lambda p: p))
    b = run_head(enc, head, toy_pair.image_s, toy_pair.image_t, toy_pair.mask_s,
                 GroundTruthTracker(ViewTransform.translation(30, 25).apply))
    assert np.abs(a - b).max() > 1e-4
