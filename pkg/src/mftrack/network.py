"""Assembled tracker network for one fusion configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeatureBundle, init_weights
from .fusion import FusionConfig, route_inputs
from .iou_net import IoUHead
from .model_predictor import ModelPredictor

MODALITY_CHANNELS = {"rgb": 3, "tir": 1, "fused": 4}
_SEED_OFFSET = {"rgb": 0, "tir": 1, "fused": 2}


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    feat_dim: int = 32
    filter_size: int = 5
    n_iter: int = 5
    lam: float = 0.01
    sigma: float = 1.0
    iou_dim: int = 32
    iou_hidden: int = 64
    search_scale: float = 5.0
    out_size: int = 144
    seed: int = 0

    def __post_init__(self):
        if self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd")
        if self.out_size < self.backbone.stride4:
            raise ValueError("out_size smaller than the backbone stride")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


def split_modalities(images: torch.Tensor, needed) -> dict:
    """N x 4 x H x W RGBT crops to per-backbone inputs."""
    out = {}
    if "rgb" in needed:
        out["rgb"] = images[:, :3]
    if "tir" in needed:
        out["tir"] = images[:, 3:4]
    if "fused" in needed:
        out["fused"] = images
    return out


class TrackerNet(nn.Module):
    def __init__(self, fusion: FusionConfig, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.fusion, self.config = fusion, config
        self.backbones = nn.ModuleDict()
        for m in fusion.backbone_modalities:
            bc = config.backbone.with_channels(MODALITY_CHANNELS[m])
            seed = config.seed * 10 + _SEED_OFFSET[m] + bc.weight_init_seed
            bc = BackboneConfig(**{**asdict(bc), "weight_init_seed": seed})
            self.backbones[m] = Backbone(bc)
        c3, c4 = config.backbone.block_channel_widths[2:]
        cp = c4 * fusion.predictor_channel_factor()
        self.predictors = nn.ModuleDict({
            name: ModelPredictor(cp, config.feat_dim, config.filter_size, config.n_iter,
                                 config.lam, config.sigma)
            for name in fusion.predictor_names})
        f = fusion.iou_channel_factor()
        self.iou_head = IoUHead(c3 * f, c4 * f, config.iou_dim, config.iou_dim,
                                hidden=config.iou_hidden)
        init_weights(self.predictors, config.seed * 10 + 7)
        init_weights(self.iou_head, config.seed * 10 + 8)

    @property
    def stride3(self) -> int:
        return self.config.backbone.stride3

    @property
    def stride4(self) -> int:
        return self.config.backbone.stride4

    def extract(self, images: torch.Tensor) -> dict:
        """Run only the backbones this routing needs on N x 4 x H x W crops."""
        needed = self.fusion.required_modalities()
        inputs = split_modalities(images, needed)
        return {m: self.backbones[m](x, m) for m, x in inputs.items()}

    def route(self, bundles: dict) -> tuple[FeatureBundle, dict]:
        return route_inputs(self.fusion, bundles)

    def component_parameters(self) -> dict:
        """Parameter lists keyed by learning-rate group."""
        groups = {}
        for m, bb in self.backbones.items():
            groups["backbone_tir" if m == "tir" else "backbone_rgb" if m == "rgb" else "backbone_fused"] = \
                list(bb.parameters())
        groups["predictor"] = list(self.predictors.parameters())
        groups["iou_head"] = list(self.iou_head.parameters())
        return groups
