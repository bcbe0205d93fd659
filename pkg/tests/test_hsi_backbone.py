import pytest
import torch

from bcaf.bench import spectral_attention_flops
from bcaf.grouping import compute_grouping
from bcaf.hsi_backbone import (
    HSI_DEFAULT,
    HSIBackbone,
    SpatialPatchMerging3d,
    SpectralAttentionBlock,
    SpectralConv1d,
    SpectralConvBlock,
    SpectralPosEmbed,
    per_slice_spatial_attention,
)
from bcaf.rgb_backbone import BackboneConfig, PatchMerging, SwinBackbone, SwinBlock

from oracles import conv1d_oracle, fd_check, spectral_attention_oracle, swin_block_oracle

TINY = BackboneConfig(window_size=4, shift=2, embed_dim=16, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8))


def _swin(dim=6, heads=2, window=4, shift=2, seed=0):
    torch.manual_seed(seed)
    return SwinBlock(dim, heads, window, shift).double().eval()


def test_per_slice_k1_equals_window_attention():
    blk = _swin()
    x = torch.randn(1, 8, 8, 1, 6, dtype=torch.float64)
    assert torch.equal(per_slice_spatial_attention(blk, x)[..., 0, :], blk(x[..., 0, :]))


def test_per_slice_identical_slices():
    blk = _swin()
    s = torch.randn(1, 8, 8, 1, 6, dtype=torch.float64)
    out = per_slice_spatial_attention(blk, torch.cat([s, s, s], dim=3))
    assert torch.allclose(out[..., 0, :], out[..., 1, :], atol=0, rtol=0)


def test_per_slice_loop_oracle_and_no_leakage():
    blk = _swin()
    x = torch.randn(1, 8, 8, 3, 6, dtype=torch.float64)
    out = per_slice_spatial_attention(blk, x)
    for k in range(3):
        assert torch.allclose(out[0, :, :, k], swin_block_oracle(blk, x[0, :, :, k]), atol=1e-6, rtol=0)
    y = x.clone()
    y[..., 1, :] = 0
    out2 = per_slice_spatial_attention(blk, y)
    assert torch.equal(out2[..., 0, :], out[..., 0, :])
    assert torch.equal(out2[..., 2, :], out[..., 2, :])


def _spectral(dim=6, heads=2, seed=0):
    torch.manual_seed(seed)
    blk = SpectralAttentionBlock(dim, heads).double().eval()
    with torch.no_grad():
        for p in blk.parameters():
            p.normal_(0, 0.3)
    return blk


def test_spectral_identical_slices_uniform_weights():
    blk = _spectral()
    blk.attn.keep_weights = True
    s = torch.randn(1, 3, 3, 1, 6, dtype=torch.float64)
    pe = SpectralPosEmbed(2, 6).double()
    with torch.no_grad():
        pe.table.zero_()
    blk(pe(torch.cat([s, s], dim=3)))
    w = blk.attn.last_weights
    assert torch.allclose(w, torch.full_like(w, 0.5), atol=1e-12)


def test_spectral_loop_oracle():
    blk = _spectral()
    x = torch.randn(1, 2, 2, 5, 6, dtype=torch.float64)
    assert torch.allclose(blk(x)[0], spectral_attention_oracle(blk, x[0]), atol=1e-6, rtol=0)


def test_spectral_position_wise():
    blk = _spectral()
    x = torch.randn(1, 3, 4, 3, 6, dtype=torch.float64)
    perm = torch.randperm(12)
    flat = x.reshape(1, 12, 1, 3, 6)
    out = blk(flat)[:, perm]
    assert torch.allclose(blk(flat[:, perm]), out, atol=1e-12)


def test_spectral_rejects_k1():
    with pytest.raises(ValueError, match="HSI-1"):
        _spectral()(torch.randn(1, 2, 2, 1, 6, dtype=torch.float64))


def test_spectral_jacobian_sparsity_2x2():
    blk = _spectral()
    x = torch.randn(1, 2, 2, 3, 6, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda t: blk(t), x)
    # (out: 1,2,2,3,6, in: 1,2,2,3,6); locations never interact, slices at a location all do
    j = jac.abs().sum(dim=(0, 4, 5, 9))  # -> (2,2,3, 2,2,3)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                for d in range(2):
                    block = j[a, b, :, c, d, :]
                    if (a, b) == (c, d):
                        assert torch.all(block > 0)
                    else:
                        assert torch.all(block == 0)


def test_spatial_merging_3d():
    torch.manual_seed(0)
    m3 = SpatialPatchMerging3d(8).double()
    m2 = PatchMerging(8).double()
    m2.load_state_dict(m3.state_dict())
    x = torch.randn(2, 4, 4, 3, 8, dtype=torch.float64)
    out = m3(x)
    assert out.shape == (2, 2, 2, 3, 16)
    for k in range(3):
        assert torch.allclose(out[..., k, :], m2(x[..., k, :]), atol=1e-12)
    one = torch.randn(1, 4, 4, 1, 8, dtype=torch.float64)
    assert torch.allclose(m3(one)[..., 0, :], m2(one[..., 0, :]), atol=1e-12)
    assert torch.count_nonzero(m3(torch.zeros(1, 4, 4, 3, 8, dtype=torch.float64))) == 0


def test_conv1d_identity_kernel_zero_ffn():
    blk = SpectralConvBlock(6, 3).double()
    with torch.no_grad():
        blk.mix.conv.weight.zero_()
        blk.mix.conv.weight[:, :, 1] = torch.eye(6)
        blk.mix.conv.bias.zero_()
        blk.mlp.fc2.weight.zero_()
        blk.mlp.fc2.bias.zero_()
        blk.norm1.weight.fill_(1.0)
        blk.norm1.bias.zero_()
    # with an identity mixer the sublayer adds LN(x); check the mixer itself is the identity
    x = torch.randn(1, 2, 2, 4, 6, dtype=torch.float64)
    assert torch.allclose(blk.mix(x), x, atol=1e-12)
    assert torch.allclose(blk(x), x + blk.norm1(x), atol=1e-12)


def test_conv1d_zero_and_oracle():
    torch.manual_seed(0)
    conv = SpectralConv1d(5, 3).double()
    with torch.no_grad():
        conv.conv.bias.zero_()
    assert torch.count_nonzero(conv(torch.zeros(1, 2, 2, 4, 5, dtype=torch.float64))) == 0
    with torch.no_grad():
        conv.conv.bias.normal_()
    x = torch.randn(1, 2, 3, 4, 5, dtype=torch.float64)
    ref = conv1d_oracle(conv.conv.weight.detach(), conv.conv.bias.detach(), x)
    assert torch.allclose(conv(x), ref, atol=1e-12)
    conv5 = SpectralConv1d(5, 5).double()
    ref = conv1d_oracle(conv5.conv.weight.detach(), conv5.conv.bias.detach(), x)
    assert torch.allclose(conv5(x), ref, atol=1e-12)


def test_conv1d_even_kernel_error():
    with pytest.raises(ValueError, match="odd"):
        SpectralConv1d(4, 2)


@pytest.mark.parametrize("K", [1, 3, 5])
def test_k_preserved_all_stages(K):
    g = compute_grouping(30, K)
    net = HSIBackbone(g, TINY).eval()
    feats = net(torch.randn(2, 64, 64, 30))
    for i, f in enumerate(feats):
        assert f.shape == (2, 16 // 2 ** i, 16 // 2 ** i, K, 16 * 2 ** i)


def test_default_depths_and_paper_shapes():
    assert HSI_DEFAULT.depths == (3, 3, 9, 3)
    net = HSIBackbone(compute_grouping(224, 5), HSI_DEFAULT).eval()
    with torch.no_grad():
        # a 32x32 cube fits on CPU; the 256 case is the same network at 8x the grid
        feats = net(torch.randn(1, 32, 32, 224))
    assert [tuple(f.shape[1:]) for f in feats] == [(8, 8, 5, 96), (4, 4, 5, 192), (2, 2, 5, 384), (1, 1, 5, 768)]


def test_k1_path_matches_rgb_shapes_and_has_no_spectral_blocks():
    g = compute_grouping(205, 1)
    net = HSIBackbone(g, TINY).eval()
    assert net.pos_embed is None
    assert all(b.spectral is None for stage in net.stages for b in stage)
    hsi = net(torch.randn(1, 64, 64, 205))
    rgb = SwinBackbone(TINY).eval()(torch.randn(1, 64, 64, 3))
    assert [tuple(h.shape[1:3]) + (h.shape[-1],) for h in hsi] == [tuple(r.shape[1:]) for r in rgb]


def test_determinism_bitwise():
    g = compute_grouping(30, 3)
    cube = torch.randn(1, 32, 32, 30, generator=torch.Generator().manual_seed(0))
    outs = []
    for _ in range(2):
        torch.manual_seed(7)
        net = HSIBackbone(g, TINY).eval()
        outs.append(net(cube))
    assert all(torch.equal(a, b) for a, b in zip(*outs))


def test_spectral_flops_quadratic_in_k():
    dim, hw = 96, 64
    score = lambda k: spectral_attention_flops(8, 8, k, dim, 4.0) - hw * k * (2 * dim * 3 * dim + 2 * dim * dim + 16 * dim * dim)
    assert score(4) == 4 * score(2)
    assert spectral_attention_flops(16, 8, 3, dim, 4.0) == 2 * spectral_attention_flops(8, 8, 3, dim, 4.0)


def test_pos_embed_checks_slice_count():
    pe = SpectralPosEmbed(3, 4)
    with pytest.raises(ValueError):
        pe(torch.zeros(1, 2, 2, 2, 4))
    x = torch.zeros(1, 2, 2, 3, 4)
    out = pe(x)
    assert torch.equal(out[0, 0, 0], out[0, 1, 1])


def test_full_path_gradient_k3():
    torch.manual_seed(0)
    cfg = BackboneConfig(window_size=2, shift=1, embed_dim=4, depths=(1, 1, 1, 1), heads=(1, 1, 2, 2),
                         droppath_max=0.0)
    net = HSIBackbone(compute_grouping(6, 3), cfg).double().eval()
    cube = torch.randn(1, 32, 32, 6, dtype=torch.float64)
    params = [net.patch_embed.proj.weight, net.pos_embed.table, net.stages[0][0].spectral.attn.qkv.weight,
              net.stages[2][0].spatial.attn.qkv.weight]
    proj = [torch.randn(f.shape, dtype=torch.float64) for f in net(cube)]
    err = fd_check(lambda: sum((f * w).sum() for f, w in zip(net(cube), proj)), params, samples=6)
    assert err < 1e-4


def test_load_from_rgb_state_maps_spatial_blocks():
    rgb = SwinBackbone(TINY)
    hsi = HSIBackbone(compute_grouping(30, 3), TINY)
    report = hsi.load_from_rgb_state(rgb.state_dict())
    assert torch.equal(hsi.stages[0][0].spatial.attn.qkv.weight, rgb.stages[0][0].attn.qkv.weight)
    assert any(n.startswith("patch_embed") for n in report["skipped"])
