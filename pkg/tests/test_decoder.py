import numpy as np
import pytest
import torch
import torch.nn.functional as F

from bcaf.decoder import ChannelAdapters, DecoderConfig, UNetDecoder, resize_logits
from bcaf.fusion import FusionPlan
from bcaf.grouping import compute_grouping
from bcaf.models import BCAFModel, HSISegModel, RGBSegModel
from bcaf.rgb_backbone import BackboneConfig

from oracles import bilinear_half_pixel, fd_check

D = torch.float64
DIMS = (8, 16, 32, 64)
TINY = BackboneConfig(window_size=4, shift=2, embed_dim=8, depths=(1, 1, 1, 1), heads=(1, 2, 2, 4))


def _stages(size=16, b=1, dims=DIMS, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(b, size // 2 ** i, size // 2 ** i, c, generator=g, dtype=D) for i, c in enumerate(dims)]


def _decoder(n=3, widths=(24, 12, 6), seed=0):
    torch.manual_seed(seed)
    dec = UNetDecoder(DIMS, DecoderConfig(num_classes=n, widths=widths)).double().eval()
    with torch.no_grad():
        for m in dec.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.normal_(0, 0.1)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.normal_(1, 0.1)
                m.bias.normal_(0, 0.1)
    return dec


def test_config_validation():
    assert DecoderConfig().widths == (256, 128, 64)
    assert DecoderConfig(num_classes=1).out_channels == 2
    with pytest.raises(ValueError):
        DecoderConfig(widths=(64, 128, 256))
    with pytest.raises(ValueError):
        DecoderConfig(widths=(64, 32))


def test_adapters_zero_and_identity():
    ad = ChannelAdapters((4, 4), (4, 4)).double()
    with torch.no_grad():
        for c in ad.convs:
            c.bias.zero_()
    zero = [torch.zeros(1, 2, 2, 4, dtype=D)] * 2
    assert all(torch.count_nonzero(o) == 0 for o in ad(zero))
    with torch.no_grad():
        for c in ad.convs:
            c.weight.copy_(torch.eye(4)[:, :, None, None])
    x = [torch.randn(1, 3, 3, 4, dtype=D) for _ in range(2)]
    for o, f in zip(ad(x), x):
        assert torch.equal(o, f.permute(0, 3, 1, 2))


def test_adapters_match_matmul_oracle():
    ad = ChannelAdapters(DIMS, (6, 12, 24, 24)).double()
    feats = _stages()
    for conv, f, o in zip(ad.convs, feats, ad(feats)):
        w = conv.weight[:, :, 0, 0]
        ref = torch.einsum("bhwc,oc->bohw", f, w) + conv.bias[None, :, None, None]
        assert torch.allclose(o, ref, atol=1e-12)


def test_adapters_stage_count_error():
    with pytest.raises(ValueError, match="stage maps"):
        ChannelAdapters(DIMS, (6, 12, 24, 24))(_stages()[:3])


def test_logit_shapes_quarter_resolution():
    # encoder at 1/4: a 256 input gives a 64x64 first stage
    dec = UNetDecoder(DIMS, DecoderConfig(num_classes=5, widths=(16, 8, 4))).eval()
    feats = [f.float() for f in _stages(size=64)]
    assert dec(feats).shape == (1, 6, 64, 64)
    dec1 = UNetDecoder(DIMS, DecoderConfig(num_classes=1, widths=(16, 8, 4))).eval()
    assert dec1(feats).shape[1] == 2


def test_skip_resolution_mismatch():
    dec = _decoder()
    feats = _stages()
    feats[1] = torch.randn(1, 6, 6, 16, dtype=D)
    with pytest.raises(ValueError, match="skip resolution"):
        dec(feats)


def _conv_bn_relu_ref(seq, x):
    conv, bn = seq[0], seq[1]
    y = F.conv2d(x, conv.weight, None, padding=1)
    y = (y - bn.running_mean[None, :, None, None]) / torch.sqrt(bn.running_var[None, :, None, None] + bn.eps)
    return torch.clamp(y * bn.weight[None, :, None, None] + bn.bias[None, :, None, None], min=0)


def _transpose2x2_ref(up, x):
    # each input pixel scatters a 2x2 tile: out[o, 2i+a, 2j+b] = sum_c x[c,i,j] W[c,o,a,b]
    b, c, h, w = x.shape
    tile = torch.einsum("bcij,coxy->boixjy", x, up.weight)
    return tile.reshape(b, up.weight.shape[1], 2 * h, 2 * w) + up.bias[None, :, None, None]


def test_decode_step_by_step_oracle():
    dec = _decoder()
    feats = _stages()
    aligned = [torch.einsum("bhwc,oc->bohw", f, c.weight[:, :, 0, 0]) + c.bias[None, :, None, None]
               for f, c in zip(feats, dec.adapters.convs)]
    x = aligned[3]
    for blk, skip in zip(dec.blocks, (aligned[2], aligned[1], aligned[0])):
        x = torch.cat([_transpose2x2_ref(blk.up, x), skip], dim=1)
        x = _conv_bn_relu_ref(blk.refine[1], _conv_bn_relu_ref(blk.refine[0], x))
    cls = dec.classifier
    ref = torch.einsum("bchw,oc->bohw", x, cls.weight[:, :, 0, 0]) + cls.bias[None, :, None, None]
    assert torch.allclose(dec(feats), ref, atol=1e-9)


def test_resize_identity_and_constant():
    x = torch.randn(1, 3, 5, 7)
    assert resize_logits(x, (5, 7)) is x
    c = torch.full((1, 2, 4, 4), 3.25)
    assert torch.allclose(resize_logits(c, (13, 9)), torch.full((1, 2, 13, 9), 3.25))


def test_resize_2x2_to_4x4_half_pixel_oracle():
    img = np.array([[1.0, 2.0], [3.0, 5.0]])
    out = resize_logits(torch.tensor(img)[None, None], (4, 4))[0, 0].numpy()
    assert np.allclose(out, bilinear_half_pixel(img, 4, 4), atol=1e-12)
    # hand values: row 0 is [1, 1.25, 1.75, 2]
    assert np.allclose(out[0], [1.0, 1.25, 1.75, 2.0])
    assert np.isclose(out[1, 1], 0.5625 * 1 + 0.1875 * 2 + 0.1875 * 3 + 0.0625 * 5)


def test_resize_random_matches_oracle():
    img = np.random.default_rng(0).normal(size=(5, 3))
    out = resize_logits(torch.tensor(img)[None, None], (8, 11))[0, 0].numpy()
    assert np.allclose(out, bilinear_half_pixel(img, 8, 11), atol=1e-12)


def test_resize_argmax_permutation_equivariant():
    logits = torch.randn(2, 5, 6, 6, dtype=D)
    perm = torch.randperm(5)
    a = resize_logits(logits, (17, 13)).argmax(1)
    b = resize_logits(logits[:, perm], (17, 13)).argmax(1)
    assert torch.equal(perm[b], a)


def test_decoder_parameter_count_shared_across_modalities():
    n = 4
    dec = DecoderConfig(num_classes=n, widths=(32, 16, 8))
    g = compute_grouping(30, 3)
    models = [RGBSegModel(n, TINY, dec), HSISegModel(n, g, TINY, dec),
              BCAFModel(n, g, 2, TINY, TINY, dec, FusionPlan((1, 2, 3, 4)))]
    counts = {sum(p.numel() for p in m.decoder.parameters()) for m in models}
    assert len(counts) == 1


def test_decode_gradient():
    dec = UNetDecoder((4, 4, 6, 6), DecoderConfig(num_classes=2, widths=(6, 4, 3))).double()
    dec.train()  # BatchNorm batch statistics are part of the graph
    feats = [t.requires_grad_(True) for t in _stages(size=8, b=2, dims=(4, 4, 6, 6))]
    w = torch.randn(2, 3, 8, 8, dtype=D, generator=torch.Generator().manual_seed(3))
    params = feats + [dec.adapters.convs[0].weight, dec.blocks[0].up.weight, dec.blocks[2].refine[1][0].weight,
                      dec.classifier.weight]
    assert fd_check(lambda: (dec(feats) * w).sum(), params) < 1e-4
