"""Run configuration: JSON schema, consistency checks, config hash and model construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import jsonschema

from .decoder import DecoderConfig
from .fusion import FusionPlan
from .grouping import SHARING_MODES, compute_grouping
from .hsi_backbone import HSI_DEFAULT, SPECTRAL_MODES
from .models import MODALITIES, BCAFModel, HSISegModel, LogitFusionModel, RGBSegModel
from .rgb_backbone import BackboneConfig
from .training.schedule import TrainConfig

# Desk-scale encoder: same topology as the default, much narrower and shallower.
TINY_BACKBONE = BackboneConfig(window_size=4, shift=2, embed_dim=16, depths=(1, 1, 2, 1),
                               heads=(1, 2, 4, 8), droppath_max=0.1)
TINY_DECODER_WIDTHS = (64, 32, 16)
BACKBONE_PRESETS = {"tiny": TINY_BACKBONE, "swin_tiny": BackboneConfig(), "hsi_default": HSI_DEFAULT}

_backbone_schema = {
    "oneOf": [
        {"type": "string", "enum": sorted(BACKBONE_PRESETS)},
        {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patch_size": {"type": "integer", "minimum": 1},
                "window_size": {"type": "integer", "minimum": 1},
                "shift": {"type": "integer", "minimum": 0},
                "embed_dim": {"type": "integer", "minimum": 1},
                "depths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "heads": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                "droppath_max": {"type": "number", "minimum": 0, "maximum": 1},
                "qkv_bias": {"type": "boolean"},
            },
        },
    ]
}

_train_props = {
    "lr_head": {"type": "number", "minimum": 0},
    "lr_backbone_pretrained": {"type": "number", "minimum": 0},
    "lr_backbone_random": {"type": "number", "minimum": 0},
    "lr_scale": {"type": "number", "minimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "warmup_epochs": {"type": "integer", "minimum": 0},
    "poly_power": {"type": "number", "exclusiveMinimum": 0},
    "micro_batch": {"type": "integer", "minimum": 1},
    "accum_steps": {"type": "integer", "minimum": 1},
    "epochs": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
    "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "mixed_precision": {"type": "boolean"},
    "median_freq_weights": {"type": "boolean"},
    "augment": {"type": "boolean"},
    "freeze": {"type": "boolean"},
    "eval_every": {"type": "integer", "minimum": 1},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["modality"],
    "properties": {
        "modality": {"enum": list(MODALITIES)},
        "num_classes": {"type": ["integer", "null"], "minimum": 1},
        "bands": {"type": ["integer", "null"], "minimum": 1},
        "k_slices": {"type": "integer", "minimum": 1},
        "ratio": {"type": "integer", "minimum": 1},
        "rgb_res": {"type": ["integer", "null"], "minimum": 1},
        "hsi_res": {"type": ["integer", "null"], "minimum": 1},
        "rgb_backbone": _backbone_schema,
        "hsi_backbone": _backbone_schema,
        "decoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                "dropout": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            },
        },
        "fusion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stages": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 4},
                           "minItems": 1, "uniqueItems": True},
                "direction": {"enum": ["bidirectional", "f2c", "c2f", "fine_to_coarse", "coarse_to_fine"]},
            },
        },
        "reducer": {"enum": ["se", "weighted"]},
        "sharing_mode": {"enum": list(SHARING_MODES)},
        "spectral_mode": {"enum": list(SPECTRAL_MODES)},
        "spectral_kernel": {"type": "integer", "minimum": 1},
        "train": {"type": "object", "additionalProperties": False, "properties": _train_props},
        "init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"rgb": {"type": "string"}, "hsi": {"type": "string"}},
        },
        "data_root": {"type": ["string", "null"]},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out": {"type": ["string", "null"]},
        "device": {"type": "string"},
    },
}

DEFAULTS: dict[str, Any] = {
    "num_classes": None,
    "bands": None,
    "k_slices": 3,
    "ratio": 1,
    "rgb_res": None,
    "hsi_res": None,
    "rgb_backbone": "swin_tiny",
    "hsi_backbone": "hsi_default",
    "decoder": {},
    "fusion": {"stages": [1, 2, 3, 4], "direction": "bidirectional"},
    "reducer": "se",
    "sharing_mode": "shared",
    "spectral_mode": "attention",
    "spectral_kernel": 3,
    "train": {},
    "init": {},
    "data_root": None,
    "seeds": [0],
    "out": None,
    "device": "cpu",
}

# fields with no effect on results
_UNHASHED = ("out", "device")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``"field: message"`` strings."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


def _backbone(v) -> BackboneConfig:
    return BACKBONE_PRESETS[v] if isinstance(v, str) else BackboneConfig.from_json(v)


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.raw[key]

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def modality(self) -> str:
        return self.raw["modality"]

    @property
    def rgb_backbone(self) -> BackboneConfig:
        return _backbone(self.raw["rgb_backbone"])

    @property
    def hsi_backbone(self) -> BackboneConfig:
        return _backbone(self.raw["hsi_backbone"])

    @property
    def plan(self) -> FusionPlan:
        return FusionPlan.from_json(self.raw["fusion"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig.from_json(self.raw["train"])

    def decoder(self, num_classes: int) -> DecoderConfig:
        d = self.raw["decoder"]
        dropout = d.get("dropout")
        if dropout is None:
            dropout = 0.0 if self.modality == "rgb" else 0.1
        return DecoderConfig(num_classes=num_classes, widths=tuple(d.get("widths", (256, 128, 64))), dropout=dropout)

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)

    def config_hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, **kw) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k] = {**raw[k], **v}
            else:
                raw[k] = v
        return parse_config(raw)


def config_hash(raw: dict) -> str:
    body = {k: v for k, v in raw.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _fill_defaults(raw: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    out.update(copy.deepcopy(raw))
    out["train"] = {**TrainConfig().to_json(), **out.get("train", {})}
    out["fusion"] = {**DEFAULTS["fusion"], **out.get("fusion", {})}
    return out


def parse_config(raw: dict) -> RunConfig:
    """Validate against :data:`SCHEMA`, fill defaults and run cross-field checks."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        raise ConfigError([f"{'.'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors])
    full = _fill_defaults(raw)
    problems = []
    cfg = RunConfig(full)
    parsed = {}
    for key in ("train", "rgb_backbone", "hsi_backbone", "plan"):
        try:
            parsed[key] = getattr(cfg, key)
        except (ValueError, TypeError) as e:
            problems.append(f"{'fusion' if key == 'plan' else key}: {e}")
    if problems:
        raise ConfigError(problems)
    rgb_bb, hsi_bb = parsed["rgb_backbone"], parsed["hsi_backbone"]
    m = full["modality"]
    if full["k_slices"] == 1 and full["spectral_mode"] != "attention":
        problems.append("spectral_mode: K=1 has no spectral blocks; spectral options are not allowed")
    if full["bands"] is not None and full["k_slices"] > full["bands"]:
        problems.append(f"k_slices: more slices ({full['k_slices']}) than bands ({full['bands']})")
    if m in ("fusion", "logit_fusion"):
        if full["rgb_res"] is not None and full["hsi_res"] is not None and \
                full["rgb_res"] != full["ratio"] * full["hsi_res"]:
            problems.append(f"ratio: rgb_res {full['rgb_res']} != ratio {full['ratio']} x hsi_res {full['hsi_res']}")
        if m == "fusion" and (rgb_bb.dims != hsi_bb.dims or rgb_bb.heads != hsi_bb.heads):
            problems.append("hsi_backbone: fusion needs equal RGB/HSI stage widths and heads")
    for key, bb in (("rgb_res", rgb_bb), ("hsi_res", hsi_bb)):
        res = full[key]
        if res is not None and res % bb.reduction:
            problems.append(f"{key}: {res} is not divisible by the encoder reduction {bb.reduction}")
    if m == "logit_fusion" and set(full["init"]) not in (set(), {"rgb", "hsi"}):
        problems.append("init: logit fusion needs both 'rgb' and 'hsi' checkpoints")
    if problems:
        raise ConfigError(problems)
    return cfg


def build_model(cfg: RunConfig, num_classes: int, bands: Optional[int] = None):
    """Fresh (randomly initialised) model for ``cfg``."""
    m = cfg.modality
    grouping = compute_grouping(bands, cfg["k_slices"]) if bands else None
    if m in ("hsi", "fusion", "logit_fusion") and grouping is None:
        raise ConfigError(["bands: HSI models need the band count"])
    hsi_kw = dict(sharing_mode=cfg["sharing_mode"], spectral_mode=cfg["spectral_mode"],
                  spectral_kernel=cfg["spectral_kernel"])
    if m == "rgb":
        return RGBSegModel(num_classes, cfg.rgb_backbone, cfg.decoder(num_classes))
    if m == "hsi":
        return HSISegModel(num_classes, grouping, cfg.hsi_backbone, cfg.decoder(num_classes),
                           reducer=cfg["reducer"], **hsi_kw)
    if m == "fusion":
        return BCAFModel(num_classes, grouping, cfg["ratio"], cfg.rgb_backbone, cfg.hsi_backbone,
                         cfg.decoder(num_classes), cfg.plan, reducer=cfg["reducer"], **hsi_kw)
    rgb = RGBSegModel(num_classes, cfg.rgb_backbone, cfg.with_overrides(modality="rgb").decoder(num_classes))
    hsi = HSISegModel(num_classes, grouping, cfg.hsi_backbone, cfg.with_overrides(modality="hsi").decoder(num_classes),
                      reducer=cfg["reducer"], **hsi_kw)
    return LogitFusionModel(rgb, hsi)


def model_meta(cfg: RunConfig, num_classes: int, bands: Optional[int]) -> dict:
    """What a checkpoint needs to rebuild its model."""
    return {"run_config": cfg.to_json(), "num_classes": num_classes, "bands": bands,
            "config_hash": cfg.config_hash()}


def model_from_meta(meta: dict):
    return build_model(parse_config(meta["run_config"]), meta["num_classes"], meta.get("bands"))
