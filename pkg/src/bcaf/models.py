"""Segmentation models: RGB-only, HSI-only, BCAF fusion and the logit-fusion baseline.

Every model takes channels-last inputs ``rgb (B, H_f, W_f, 3)`` and
``hsi (B, H_c, W_c, S)`` (the unused one may be ``None``) and returns raw
channels-first logits ``(B, N+1, h, w)`` at 1/4 of its primary grid.

Each model carries ``provenance``: a map from parameter-name prefix to one of
``head``, ``backbone_pretrained`` or ``backbone_random``; it drives the
per-group learning rates during training.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .decoder import DecoderConfig, UNetDecoder, resize_logits
from .fusion import BCAFStage, FusionPlan, make_reducer
from .grouping import SpectralGrouping
from .hsi_backbone import HSI_DEFAULT, HSIBackbone
from .rgb_backbone import BackboneConfig, SwinBackbone
from .training.checkpoint import load_matching

TAGS = ("head", "backbone_pretrained", "backbone_random")
MODALITIES = ("rgb", "hsi", "fusion", "logit_fusion")


class SegModel(nn.Module):
    modality = ""

    def __init__(self):
        super().__init__()
        self.provenance: dict[str, str] = {}

    def tag_of(self, name: str) -> Optional[str]:
        """Tag of the longest provenance prefix matching ``name``."""
        best, tag = -1, None
        for prefix, t in self.provenance.items():
            if (name == prefix or name.startswith(prefix + ".") or prefix == "") and len(prefix) > best:
                best, tag = len(prefix), t
        return tag

    def param_tags(self) -> dict[str, Optional[str]]:
        return {n: self.tag_of(n) for n, _ in self.named_parameters()}

    def logits_at(self, rgb, hsi, size) -> torch.Tensor:
        """Logits bilinearly resized to the label grid ``size``."""
        return resize_logits(self(rgb, hsi), size)


class RGBSegModel(SegModel):
    modality = "rgb"

    def __init__(self, num_classes: int, cfg: BackboneConfig = BackboneConfig(),
                 decoder: Optional[DecoderConfig] = None):
        super().__init__()
        decoder = decoder or DecoderConfig(num_classes=num_classes, dropout=0.0)
        self.backbone = SwinBackbone(cfg)
        self.decoder = UNetDecoder(cfg.dims, decoder)
        self.provenance = {"backbone": "backbone_random", "decoder": "head"}

    def forward(self, rgb: torch.Tensor, hsi: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.decoder(self.backbone(rgb))


class HSISegModel(SegModel):
    """HSI encoder; each stage is collapsed over slices by its own reducer before decoding."""

    modality = "hsi"

    def __init__(self, num_classes: int, grouping: SpectralGrouping, cfg: BackboneConfig = HSI_DEFAULT,
                 decoder: Optional[DecoderConfig] = None, reducer: str = "se",
                 sharing_mode: str = "shared", spectral_mode: str = "attention", spectral_kernel: int = 3):
        super().__init__()
        decoder = decoder or DecoderConfig(num_classes=num_classes, dropout=0.1)
        self.backbone = HSIBackbone(grouping, cfg, sharing_mode, spectral_mode, spectral_kernel)
        self.reducers = nn.ModuleList([make_reducer(reducer, d, grouping.K) for d in cfg.dims])
        self.decoder = UNetDecoder(cfg.dims, decoder)
        self.provenance = {"backbone": "backbone_random", "reducers": "backbone_random", "decoder": "head"}

    def forward(self, rgb: Optional[torch.Tensor], hsi: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(hsi)
        return self.decoder([red(f) for red, f in zip(self.reducers, feats)])


class BCAFModel(SegModel):
    """Two encoders interleaved stage by stage with cross-modal fusion blocks.

    Active stages feed the fused map to the decoder and pass the
    cross-attention-updated features on to the next stage of each encoder.
    Inactive stages hand the decoder the normalised RGB features.
    """

    modality = "fusion"

    def __init__(self, num_classes: int, grouping: SpectralGrouping, r: int,
                 rgb_cfg: BackboneConfig = BackboneConfig(), hsi_cfg: BackboneConfig = HSI_DEFAULT,
                 decoder: Optional[DecoderConfig] = None, plan: FusionPlan = FusionPlan(),
                 reducer: str = "se", sharing_mode: str = "shared", spectral_mode: str = "attention",
                 spectral_kernel: int = 3):
        super().__init__()
        if rgb_cfg.dims != hsi_cfg.dims or rgb_cfg.patch_size != hsi_cfg.patch_size:
            raise ValueError(f"encoder widths differ: RGB {rgb_cfg.dims} vs HSI {hsi_cfg.dims}")
        if max(plan.active_stages) > rgb_cfg.num_stages:
            raise ValueError(f"fusion stage {max(plan.active_stages)} exceeds the encoder depth")
        decoder = decoder or DecoderConfig(num_classes=num_classes, dropout=0.1)
        self.r, self.plan = int(r), plan
        self.rgb = SwinBackbone(rgb_cfg)
        self.hsi = HSIBackbone(grouping, hsi_cfg, sharing_mode, spectral_mode, spectral_kernel)
        self.fusion = nn.ModuleDict({
            str(s): BCAFStage(rgb_cfg.dims[s - 1], rgb_cfg.heads[s - 1], grouping.K, plan.direction,
                              reducer, rgb_cfg.mlp_ratio)
            for s in plan.active_stages
        })
        self.decoder = UNetDecoder(rgb_cfg.dims, decoder)
        self.provenance = {"rgb": "backbone_random", "hsi": "backbone_random",
                           "fusion": "backbone_random", "decoder": "head"}

    def forward(self, rgb: torch.Tensor, hsi: torch.Tensor, return_stages: bool = False):
        if rgb.shape[1] != self.r * hsi.shape[1] or rgb.shape[2] != self.r * hsi.shape[2]:
            raise ValueError(
                f"RGB {tuple(rgb.shape[1:3])} and HSI {tuple(hsi.shape[1:3])} grids "
                f"are not related by ratio {self.r}"
            )
        last = max(self.plan.active_stages)
        x, y = self.rgb.embed(rgb), self.hsi.embed(hsi)
        feats = []
        for i in range(self.rgb.cfg.num_stages):
            x = self.rgb.run_stage(i, x)
            if i < last:
                y = self.hsi.run_stage(i, y)
            stage = self.fusion[str(i + 1)] if str(i + 1) in self.fusion else None
            if stage is not None:
                fused, x, y = stage(x, y, self.r)
                feats.append(fused)
            else:
                feats.append(self.rgb.stage_output(i, x))
        logits = self.decoder(feats)
        return (logits, feats) if return_stages else logits

    def init_from_unimodal(self, rgb_state: dict, hsi_state: dict) -> dict:
        """Phase-2 initialisation from unimodal model state dicts.

        Encoders come from the unimodal models, the decoder body (up blocks and
        classifier) from the RGB model. Adapters and fusion blocks stay random.
        """
        report = {
            "rgb": load_matching(self.rgb, rgb_state, prefix="backbone."),
            "hsi": load_matching(self.hsi, hsi_state, prefix="backbone."),
            "decoder": load_matching(self.decoder.blocks, rgb_state, prefix="decoder.blocks."),
            "classifier": load_matching(self.decoder.classifier, rgb_state, prefix="decoder.classifier."),
        }
        self.provenance = {"rgb": "backbone_pretrained", "hsi": "backbone_pretrained",
                           "fusion": "backbone_random", "decoder": "head",
                           "decoder.adapters": "backbone_random"}
        return report


def _check_class_counts(a: SegModel, b: SegModel) -> int:
    na, nb = a.decoder.cfg.out_channels, b.decoder.cfg.out_channels
    if na != nb:
        raise ValueError(f"class-count mismatch between unimodal models: {na - 1} vs {nb - 1}")
    return na


class LogitFusionModel(SegModel):
    """Late fusion: concatenate both models' logits and mix them with a 1x1 convolution.

    HSI logits are bilinearly resized to the RGB logit grid first. The mixer
    starts as ``[I, 0]`` so the initial prediction equals the RGB model's.
    """

    modality = "logit_fusion"

    def __init__(self, rgb_model: RGBSegModel, hsi_model: HSISegModel):
        super().__init__()
        n = _check_class_counts(rgb_model, hsi_model)
        self.rgb_model, self.hsi_model = rgb_model, hsi_model
        self.mix = nn.Conv2d(2 * n, n, 1)
        with torch.no_grad():
            self.mix.weight.zero_()
            self.mix.weight[:, :n, 0, 0] = torch.eye(n)
            self.mix.bias.zero_()
        self.provenance = {"rgb_model": "backbone_pretrained", "hsi_model": "backbone_pretrained",
                           "rgb_model.decoder": "head", "hsi_model.decoder": "head",
                           "hsi_model.reducers": "head", "mix": "head"}

    @property
    def decoder(self):
        return self.rgb_model.decoder

    def forward(self, rgb: torch.Tensor, hsi: torch.Tensor) -> torch.Tensor:
        lr = self.rgb_model(rgb, None)
        lh = resize_logits(self.hsi_model(None, hsi), lr.shape[-2:])
        return self.mix(torch.cat([lr, lh], dim=1))
