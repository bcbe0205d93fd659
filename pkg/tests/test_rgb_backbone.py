import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bcaf.bench import swin_block_flops
from bcaf.rgb_backbone import BackboneConfig, PatchMerging, SwinBackbone, SwinBlock, shifted_window_mask

from oracles import fd_check, patch_merge_oracle, swin_attention_oracle, swin_block_oracle

torch.set_default_dtype(torch.float32)


def _block(dim=6, heads=2, window=7, shift=0, seed=0):
    torch.manual_seed(seed)
    blk = SwinBlock(dim, heads, window, shift).double().eval()
    with torch.no_grad():
        blk.attn.relative_position_bias_table.normal_()
        for ln in (blk.norm1, blk.norm2):
            ln.weight.uniform_(0.5, 1.5)
            ln.bias.normal_(0, 0.1)
    return blk


def test_single_window_equals_full_attention():
    blk = _block(window=7, shift=0)
    x = torch.randn(1, 7, 7, 6, dtype=torch.float64)
    ref = swin_block_oracle(blk, x[0])
    assert torch.allclose(blk(x)[0], ref, atol=1e-6, rtol=0)


def test_unshifted_14x14_equals_block_diagonal_attention():
    blk = _block(window=7, shift=0)
    x = torch.randn(1, 14, 14, 6, dtype=torch.float64)
    assert torch.allclose(blk(x)[0], swin_block_oracle(blk, x[0]), atol=1e-6, rtol=0)


def test_shifted_14x14_equals_masked_dense_attention():
    blk = _block(window=7, shift=3)
    x = torch.randn(2, 14, 14, 6, dtype=torch.float64)
    out = blk(x)
    for b in range(2):
        assert torch.allclose(out[b], swin_block_oracle(blk, x[b]), atol=1e-6, rtol=0)


def test_shift_mask_blocks_all_cross_region_weight():
    blk = _block(window=7, shift=3)
    blk.attn.keep_weights = True
    x = torch.randn(1, 14, 14, 6, dtype=torch.float64)
    blk.attend(blk.norm1(x))
    w = blk.attn.last_weights  # (nW, heads, 49, 49)
    mask = shifted_window_mask(14, 14, 7, 7, 3, 3)
    blocked = torch.isinf(mask)[:, None].expand_as(w)
    assert blocked.any()
    assert w[blocked].max() < 1e-12
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_constant_input_identity_value_zero_ffn_gives_constant():
    blk = _block(dim=6, heads=2, window=4, shift=2)
    with torch.no_grad():
        c = 6
        blk.attn.qkv.weight.zero_()
        blk.attn.qkv.weight[2 * c:].copy_(torch.eye(c))
        blk.attn.qkv.bias.zero_()
        blk.attn.proj.weight.copy_(torch.eye(c))
        blk.attn.proj.bias.zero_()
        blk.mlp.fc2.weight.zero_()
        blk.mlp.fc2.bias.zero_()
    x = torch.ones(1, 8, 8, 6, dtype=torch.float64) * torch.arange(6, dtype=torch.float64)
    out = blk(x)
    assert torch.allclose(out, out[:, :1, :1].expand_as(out), atol=1e-12)


def test_small_grid_clamps_window_and_disables_shift():
    blk = _block(window=7, shift=3)
    x = torch.randn(1, 4, 4, 6, dtype=torch.float64)
    # one 4x4 window covering everything, no shift
    assert torch.allclose(blk(x)[0], swin_block_oracle(blk, x[0]), atol=1e-6, rtol=0)


def test_padding_path_preserves_shape():
    blk = _block(window=4, shift=2)
    x = torch.randn(2, 6, 10, 6, dtype=torch.float64)
    assert blk(x).shape == x.shape


def test_heads_must_divide_dim():
    with pytest.raises(ValueError, match="config error"):
        SwinBlock(6, 4, 7, 0)
    with pytest.raises(ValueError):
        BackboneConfig(embed_dim=10, heads=(3, 6, 12, 24))


def test_patch_merging_zero_and_oracle():
    torch.manual_seed(0)
    pm = PatchMerging(4).double()
    assert torch.count_nonzero(pm(torch.zeros(1, 2, 2, 4, dtype=torch.float64))) == 0
    x = torch.randn(1, 2, 2, 4, dtype=torch.float64)
    out = pm(x)
    assert out.shape == (1, 1, 1, 8)
    assert torch.allclose(out[0], patch_merge_oracle(pm, x[0]), atol=1e-12)
    x = torch.randn(1, 6, 4, 4, dtype=torch.float64)
    assert torch.allclose(pm(x)[0], patch_merge_oracle(pm, x[0]), atol=1e-12)
    with pytest.raises(ValueError):
        pm(torch.zeros(1, 3, 2, 4))


def test_patch_merging_channel_permutation():
    torch.manual_seed(1)
    pm = PatchMerging(3).double()
    with torch.no_grad():
        pm.norm.weight.uniform_(0.5, 1.5)
        pm.norm.bias.normal_()
    x = torch.randn(1, 2, 2, 3, dtype=torch.float64)
    perm = torch.tensor([2, 0, 1])
    full = torch.cat([perm + 3 * i for i in range(4)])
    pm2 = PatchMerging(3).double()
    with torch.no_grad():
        pm2.reduction.weight.copy_(pm.reduction.weight[:, full])
        pm2.norm.weight.copy_(pm.norm.weight[full])
        pm2.norm.bias.copy_(pm.norm.bias[full])
    assert torch.allclose(pm(x), pm2(x[..., perm]), atol=1e-12)


TINY = BackboneConfig(window_size=4, shift=2, embed_dim=16, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8))


@pytest.mark.parametrize("size", [64, 96])
def test_tiny_stage_shapes(size):
    net = SwinBackbone(TINY).eval()
    feats = net(torch.randn(1, size, size, 3))
    for i, f in enumerate(feats):
        assert f.shape == (1, size // (4 * 2 ** i), size // (4 * 2 ** i), 16 * 2 ** i)


def test_default_config_and_shapes_256():
    cfg = BackboneConfig()
    assert (cfg.patch_size, cfg.window_size, cfg.shift) == (4, 7, 3)
    assert cfg.depths == (2, 2, 6, 2) and cfg.heads == (3, 6, 12, 24)
    assert cfg.dims == (96, 192, 384, 768)
    net = SwinBackbone(cfg).eval()
    with torch.no_grad():
        feats = net(torch.randn(1, 256, 256, 3))
    assert [tuple(f.shape[1:]) for f in feats] == [(64, 64, 96), (32, 32, 192), (16, 16, 384), (8, 8, 768)]


def test_224_grids_and_doubling():
    net = SwinBackbone(TINY).eval()
    with torch.no_grad():
        a = net(torch.randn(1, 224, 224, 3))
        b = net(torch.randn(1, 448, 448, 3))
    assert [f.shape[1] for f in a] == [56, 28, 14, 7]
    assert [f.shape[1] for f in b] == [2 * f.shape[1] for f in a]


def test_non_divisible_input_error():
    with pytest.raises(ValueError, match="pad by"):
        SwinBackbone(TINY)(torch.randn(1, 60, 64, 3))


def test_droppath_schedule_linear():
    cfg = BackboneConfig()
    flat = [r for stage in cfg.droppath_rates() for r in stage]
    assert len(flat) == 12 and flat[0] == 0 and abs(flat[-1] - 0.3) < 1e-7
    steps = [b - a for a, b in zip(flat, flat[1:])]
    assert max(steps) - min(steps) < 1e-6


def test_droppath_off_in_eval():
    net = SwinBackbone(BackboneConfig(window_size=4, shift=2, embed_dim=8, depths=(2, 2, 2, 2),
                                      heads=(1, 1, 2, 2), droppath_max=0.9)).eval()
    x = torch.randn(2, 32, 32, 3)
    assert all(torch.equal(a, b) for a, b in zip(net(x), net(x)))


def test_gradient_two_block_single_stage():
    torch.manual_seed(0)
    blocks = torch.nn.Sequential(SwinBlock(4, 2, 4, 0), SwinBlock(4, 2, 4, 2)).double()
    x = torch.randn(1, 32, 32, 4, dtype=torch.float64, requires_grad=True)
    params = [x, blocks[0].attn.qkv.weight, blocks[1].attn.relative_position_bias_table, blocks[1].mlp.fc1.weight]
    err = fd_check(lambda: (blocks(x) ** 2).sum(), params, samples=6)
    assert err < 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4))
def test_window_attention_flops_linear_in_tokens(n):
    cfg = BackboneConfig(window_size=7)
    one = swin_block_flops(7, 7, 96, cfg, 0)
    assert swin_block_flops(7 * n, 7, 96, cfg, 0) == n * one
    assert swin_block_flops(7 * n, 7 * n, 96, cfg, 3) == n * n * one


def test_attention_sublayer_oracle_shifted_non_square():
    blk = _block(dim=4, heads=1, window=4, shift=2)
    x = torch.randn(1, 8, 12, 4, dtype=torch.float64)
    ref = swin_attention_oracle(blk, x[0])
    assert torch.allclose(blk.attend(blk.norm1(x))[0], ref, atol=1e-6, rtol=0)
