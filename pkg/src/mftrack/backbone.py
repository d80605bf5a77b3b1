"""Toy multi-block feature extractor with block3/block4 taps.

Each stage is a strided convolution (7x7 for the first stage, 3x3 after) plus,
for stages 2-4, a stride-1 3x3 convolution. Padding is arranged so that an
input of size H x W gives ``floor(H / s_k) x floor(W / s_k)`` cells at
cumulative stride ``s_k``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

FIRST_LAYER = "stages.0.conv.conv.weight"


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    block_channel_widths: tuple = (16, 32, 64, 64)
    block_strides: tuple = (2, 2, 2, 2)
    first_kernel: int = 7
    norm: str = "none"  # "none" | "group"
    weight_init_seed: int = 0

    def __post_init__(self):
        if self.input_channels not in (1, 3, 4):
            raise ValueError(f"input_channels must be 1, 3 or 4, got {self.input_channels}")
        object.__setattr__(self, "block_channel_widths", tuple(int(w) for w in self.block_channel_widths))
        object.__setattr__(self, "block_strides", tuple(int(s) for s in self.block_strides))
        if len(self.block_channel_widths) != 4 or len(self.block_strides) != 4:
            raise ValueError("backbone needs exactly 4 blocks")
        if min(self.block_channel_widths) <= 0 or min(self.block_strides) <= 0:
            raise ValueError("block widths and strides must be positive")
        if self.norm not in ("none", "group"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def stride3(self) -> int:
        return math.prod(self.block_strides[:3])

    @property
    def stride4(self) -> int:
        return math.prod(self.block_strides)

    def with_channels(self, c: int) -> "BackboneConfig":
        d = asdict(self)
        d["input_channels"] = c
        return BackboneConfig(**d)


@dataclass
class FeatureBundle:
    """Block3/block4 maps, either ``C x h x w`` or batched ``N x C x h x w``."""

    block3: torch.Tensor
    block4: torch.Tensor
    stride3: int
    stride4: int
    modality: str = "rgb"

    def index(self, idx) -> "FeatureBundle":
        return FeatureBundle(self.block3[idx], self.block4[idx], self.stride3, self.stride4,
                             self.modality)


class _Conv(nn.Module):
    def __init__(self, cin, cout, k, stride, norm):
        super().__init__()
        self.k, self.stride = k, stride
        self.conv = nn.Conv2d(cin, cout, k, stride=stride, padding=0)
        self.norm = nn.GroupNorm(min(8, cout), cout) if norm == "group" else nn.Identity()

    def pad(self, x):
        left = self.k // 2
        right = self.k - self.stride - left
        return F.pad(x, (left, right, left, right))

    def preactivation(self, x):
        return self.conv(self.pad(x))

    def forward(self, x):
        return F.silu(self.norm(self.preactivation(x)))


class _Stage(nn.Module):
    def __init__(self, cin, cout, k, stride, norm, refine: bool):
        super().__init__()
        self.conv = _Conv(cin, cout, k, stride, norm)
        self.refine = _Conv(cout, cout, 3, 1, norm) if refine else None

    def forward(self, x):
        x = self.conv(x)
        return self.refine(x) if self.refine is not None else x


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        widths = config.block_channel_widths
        cins = (config.input_channels,) + widths[:3]
        self.stages = nn.ModuleList(
            _Stage(ci, co, config.first_kernel if i == 0 else 3, s, config.norm, refine=i > 0)
            for i, (ci, co, s) in enumerate(zip(cins, widths, config.block_strides)))
        init_weights(self, config.weight_init_seed)

    @property
    def out_channels(self) -> tuple[int, int]:
        return self.config.block_channel_widths[2], self.config.block_channel_widths[3]

    def first_layer_preactivation(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages[0].conv.preactivation(x)

    def forward(self, x: torch.Tensor, modality: str = "rgb") -> FeatureBundle:
        """``x``: N x C x H x W tensor."""
        if x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"backbone expects {self.config.input_channels} channels, got {x.shape[1]}")
        s4 = self.config.stride4
        if x.shape[-2] < s4 or x.shape[-1] < s4:
            raise ValueError(f"input {tuple(x.shape[-2:])} too small for cumulative stride {s4}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeatureBundle(feats[2], feats[3], self.config.stride3, s4, modality)


def init_weights(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


def image_to_tensor(image) -> torch.Tensor:
    """H x W x C array (or tensor) to a 1 x C x H x W float tensor."""
    t = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if t.ndim == 2:
        t = t[..., None]
    return t.permute(2, 0, 1)[None].to(torch.get_default_dtype())


def extract_features(image, backbone: Backbone, modality: str = "rgb") -> FeatureBundle:
    """Single-image forward pass; returns unbatched ``C x h x w`` maps."""
    x = image_to_tensor(image) if not (torch.is_tensor(image) and image.ndim == 4) else image
    x = x.to(next(backbone.parameters()).dtype)
    return backbone(x, modality).index(0)


def make_pixel_fused_input(rgb, tir):
    """Channel concatenation ``[rgb | tir]`` of aligned H x W x 3 and H x W x 1 images."""
    if torch.is_tensor(rgb):
        if tir.ndim == rgb.ndim - 1:
            tir = tir[..., None]
        if rgb.shape[:-1] != tir.shape[:-1]:
            raise ValueError(f"shape mismatch {tuple(rgb.shape)} vs {tuple(tir.shape)}")
        return torch.cat([rgb, tir], dim=-1)
    rgb, tir = np.asarray(rgb), np.asarray(tir)
    if tir.ndim == rgb.ndim - 1:
        tir = tir[..., None]
    if rgb.shape[:-1] != tir.shape[:-1]:
        raise ValueError(f"shape mismatch {rgb.shape} vs {tir.shape}")
    return np.concatenate([rgb, tir], axis=-1)


def extend_first_layer(params_3ch: dict, init_rule: str = "mean") -> dict:
    """Add a fourth input slice to the first-layer kernels (3 -> 4 channels).

    ``init_rule`` is ``"mean"`` (mean of the RGB slices) or ``"zero"``.
    All other entries are copied unchanged.
    """
    w = params_3ch[FIRST_LAYER]
    if w.shape[1] != 3:
        raise ValueError(f"first layer has {w.shape[1]} input channels, expected 3")
    if init_rule == "mean":
        extra = w.mean(dim=1, keepdim=True)
    elif init_rule == "zero":
        extra = torch.zeros_like(w[:, :1])
    else:
        raise ValueError(f"unknown init rule {init_rule!r}")
    out = {k: v.clone() for k, v in params_3ch.items()}
    out[FIRST_LAYER] = torch.cat([w, extra], dim=1)
    return out


def collapse_first_layer(params_3ch: dict) -> dict:
    """3 -> 1 channel by summing the RGB slices.

    Equivalent to feeding a single-channel image replicated to three channels
    into the original network.
    """
    w = params_3ch[FIRST_LAYER]
    if w.shape[1] != 3:
        raise ValueError(f"first layer has {w.shape[1]} input channels, expected 3")
    out = {k: v.clone() for k, v in params_3ch.items()}
    out[FIRST_LAYER] = w.sum(dim=1, keepdim=True)
    return out


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, state: dict, config: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``<path>.npz`` (named arrays) and ``<path>.json`` (manifest)."""
    path = Path(path)
    if path.suffix == ".npz":
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: (v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v))
              for k, v in state.items()}
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {
        "layers": [{"name": k, "shape": list(a.shape), "dtype": str(a.dtype)}
                   for k, a in arrays.items()],
        "config": config or {},
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path.with_suffix(".npz")


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if path.suffix in (".npz", ".json"):
        path = path.with_suffix("")
    npz, man = path.with_suffix(".npz"), path.with_suffix(".json")
    if not npz.is_file() or not man.is_file():
        raise FileNotFoundError(f"checkpoint {path} (.npz/.json) not found")
    with np.load(npz) as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    return state, json.loads(man.read_text())
