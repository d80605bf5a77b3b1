"""Pixel-, feature- and response-level fusion and component routing.

``FusionConfig`` states which input each downstream component consumes:
``"rgb"``, ``"tir"`` or ``"fused"``. For response-level fusion
``predictor_input == "fused"`` means one predictor per modality whose
response maps are summed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from .backbone import FeatureBundle

LEVELS = ("single_rgb", "single_tir", "pixel", "feature", "response")
INPUTS = ("rgb", "tir", "fused")
COMPONENTS = ("backbone", "iou", "predictor")


class RoutingError(KeyError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    level: str = "single_rgb"
    iou_input: str | None = None
    predictor_input: str | None = None
    tir_lr_multiplier: float = 1.0

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown fusion level {self.level!r}")
        forced = {
            "single_rgb": ("rgb", "rgb"),
            "single_tir": ("tir", "tir"),
            "pixel": ("fused", "fused"),
            "feature": ("fused", "fused"),
            "response": ("rgb", "fused"),
        }[self.level]
        iou_in = self.iou_input or forced[0]
        pred_in = self.predictor_input or forced[1]
        for v in (iou_in, pred_in):
            if v not in INPUTS:
                raise ValueError(f"unknown component input {v!r}")
        if self.level in ("single_rgb", "single_tir", "pixel") and (iou_in, pred_in) != forced:
            raise ValueError(f"level={self.level} requires iou_input=predictor_input={forced[0]}")
        if self.level == "response":
            if pred_in != "fused":
                raise ValueError("response-level fusion sums both predictors (predictor_input=fused)")
            if iou_in not in ("rgb", "tir"):
                raise ValueError("response-level fusion feeds a single modality to the IoU head")
        if self.tir_lr_multiplier <= 0:
            raise ValueError("tir_lr_multiplier must be positive")
        object.__setattr__(self, "iou_input", iou_in)
        object.__setattr__(self, "predictor_input", pred_in)

    @property
    def backbone_modalities(self) -> tuple[str, ...]:
        """Backbones the network holds for this level."""
        return ("fused",) if self.level == "pixel" else ("rgb", "tir")

    @property
    def predictor_names(self) -> tuple[str, ...]:
        return ("rgb", "tir") if self.level == "response" else ("main",)

    def required_modalities(self) -> set[str]:
        """Backbones that must actually run for this routing."""
        if self.level == "pixel":
            return {"fused"}
        need = set()
        for v in (self.iou_input, self.predictor_input):
            need |= {"rgb", "tir"} if v == "fused" else {v}
        return need

    def iou_channel_factor(self) -> int:
        return 2 if self.level == "feature" and self.iou_input == "fused" else 1

    def predictor_channel_factor(self) -> int:
        return 2 if self.level == "feature" and self.predictor_input == "fused" else 1


def fuse_features(x_v: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    """Channel concatenation ``[x_v | x_t]`` (channel axis is -3)."""
    if x_v.shape[-2:] != x_t.shape[-2:] or x_v.shape[:-3] != x_t.shape[:-3]:
        raise ValueError(f"cannot fuse features of shapes {tuple(x_v.shape)} and {tuple(x_t.shape)}")
    return torch.cat([x_v, x_t], dim=-3)


def fuse_response(s_v, s_t):
    """Elementwise sum of two response maps."""
    if tuple(s_v.shape) != tuple(s_t.shape):
        raise ValueError(f"response shapes differ: {tuple(s_v.shape)} vs {tuple(s_t.shape)}")
    return s_v + s_t


def fuse_bundles(b_v: FeatureBundle, b_t: FeatureBundle) -> FeatureBundle:
    return FeatureBundle(fuse_features(b_v.block3, b_t.block3), fuse_features(b_v.block4, b_t.block4),
                         b_v.stride3, b_v.stride4, "fused")


def _bundle(bundles: dict, name: str) -> FeatureBundle:
    if name not in bundles:
        raise RoutingError(f"routing needs a {name!r} feature bundle, got {sorted(bundles)}")
    return bundles[name]


def route_inputs(config: FusionConfig, bundles: dict) -> tuple[FeatureBundle, dict]:
    """Select the features each component consumes.

    Returns ``(iou_features, predictor_features)`` where ``iou_features`` is a
    bundle (block3 and block4) and ``predictor_features`` maps predictor name
    to a block4 map.
    """
    if config.level == "pixel":
        b = _bundle(bundles, "fused")
        return b, {"main": b.block4}

    def pick(which):
        if which == "fused":
            return fuse_bundles(_bundle(bundles, "rgb"), _bundle(bundles, "tir"))
        return _bundle(bundles, which)

    iou_feats = pick(config.iou_input)
    if config.level == "response":
        return iou_feats, {m: _bundle(bundles, m).block4 for m in ("rgb", "tir")}
    if config.predictor_input == config.iou_input:
        return iou_feats, {"main": iou_feats.block4}
    if config.predictor_input == "fused":
        pred = fuse_features(_bundle(bundles, "rgb").block4, _bundle(bundles, "tir").block4)
    else:
        pred = _bundle(bundles, config.predictor_input).block4
    return iou_feats, {"main": pred}


# ---------------------------------------------------------- ablation grid

@dataclass(frozen=True)
class AblationRow:
    """One configuration of the fusion ablation table.

    ``finetune`` lists the components updated during the fine-tuning stage;
    the rest keep their pre-trained weights.
    """

    name: str
    fusion: FusionConfig
    finetune: frozenset = field(default_factory=frozenset)
    group: str = "fusion"


def _row(name, group, finetune=COMPONENTS, **fusion):
    return AblationRow(name, FusionConfig(**fusion), frozenset(finetune), group)


ABLATION_ROWS = (
    _row("single_rgb", "single", (), level="single_rgb"),
    _row("single_tir", "single", (), level="single_tir"),
    _row("single_tir/ft=iou+pred", "single", ("iou", "predictor"), level="single_tir"),
    _row("single_tir/ft=backbone+pred", "single", ("backbone", "predictor"), level="single_tir"),
    _row("single_tir/ft=all", "single", COMPONENTS, level="single_tir"),
    _row("single_rgb/ft=all", "single", COMPONENTS, level="single_rgb"),
    _row("pixel", "pixel", level="pixel"),
    _row("response/iou=rgb", "response", level="response", iou_input="rgb"),
    _row("response/iou=tir", "response", level="response", iou_input="tir"),
    _row("feature/iou=rgb/pred=fused", "feature", level="feature", iou_input="rgb",
         predictor_input="fused"),
    _row("feature/iou=tir/pred=fused", "feature", level="feature", iou_input="tir",
         predictor_input="fused"),
    _row("feature/iou=fused/pred=rgb", "feature", level="feature", iou_input="fused",
         predictor_input="rgb"),
    _row("feature/iou=fused/pred=tir", "feature", level="feature", iou_input="fused",
         predictor_input="tir"),
    _row("feature/iou=fused/pred=fused", "feature", level="feature", iou_input="fused",
         predictor_input="fused"),
    _row("feature/iou=fused/pred=fused/tirx10", "feature", level="feature", iou_input="fused",
         predictor_input="fused", tir_lr_multiplier=10.0),
)

ROWS_BY_NAME = {r.name: r for r in ABLATION_ROWS}


def get_row(name: str) -> AblationRow:
    try:
        return ROWS_BY_NAME[name]
    except KeyError:
        raise KeyError(f"unknown ablation row {name!r}; known rows: {', '.join(ROWS_BY_NAME)}") from None


def with_multiplier(config: FusionConfig, multiplier: float) -> FusionConfig:
    return replace(config, tir_lr_multiplier=multiplier)
