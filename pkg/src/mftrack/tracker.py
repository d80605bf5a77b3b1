"""Online tracking loop.

Coordinates: image pixel ``i`` covers ``[i, i + 1)``. The search patch is a
square of side ``scale * sqrt(w h)`` centred on the box and resampled to
``out_size`` pixels; feature cell ``j`` of a stride-``s`` map is centred at
patch coordinate ``(j + 0.5) * s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .data_model import BoundingBox, FramePair, format_box
from .fusion import fuse_response
from .iou_net import pixel_to_feature_boxes, refine_box
from .model_predictor import compute_response, steepest_descent
from .network import TrackerNet


@dataclass(frozen=True)
class TrackerConfig:
    memory_capacity: int = 50
    memory_decay: float = 0.99
    update_interval: int = 10
    online_iterations: int = 2
    init_iterations: int = 10
    confidence_threshold: float = 0.25
    num_candidates: int = 10
    candidate_center_sigma: float = 0.1
    candidate_scale_sigma: float = 0.1
    refine_steps: int = 10
    refine_step_size: float = 0.25
    top_k: int = 3
    augment_shift: float = 0.3
    max_scale_change: float = 1.5


@dataclass(frozen=True)
class CropTransform:
    """Maps patch coordinates to image coordinates: ``u_img = x0 + u_patch / factor``."""

    x0: float
    y0: float
    factor: float

    def to_image(self, box: BoundingBox) -> BoundingBox:
        f = self.factor
        return BoundingBox(self.x0 + box.x / f, self.y0 + box.y / f, box.w / f, box.h / f)

    def to_patch(self, box: BoundingBox) -> BoundingBox:
        f = self.factor
        return BoundingBox((box.x - self.x0) * f, (box.y - self.y0) * f, box.w * f, box.h * f)

    def point_to_image(self, u: float, v: float) -> tuple[float, float]:
        return self.x0 + u / self.factor, self.y0 + v / self.factor


def crop_search_region(image: np.ndarray, box: BoundingBox, scale: float = 5.0,
                       out_size: int = 144, center=None) -> tuple[np.ndarray, CropTransform]:
    """Square crop around ``box`` (or ``center``) resampled to ``out_size``; edges replicated."""
    side = scale * math.sqrt(box.w * box.h)
    cx, cy = center if center is not None else box.center
    x0, y0 = cx - side / 2.0, cy - side / 2.0
    f = out_size / side
    M = np.array([[1 / f, 0, x0 + 0.5 / f - 0.5], [0, 1 / f, y0 + 0.5 / f - 0.5]])
    img = np.ascontiguousarray(image, dtype=np.float32)
    patch = cv2.warpAffine(img, M, (out_size, out_size),
                           flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                           borderMode=cv2.BORDER_REPLICATE)
    if patch.ndim == 2:
        patch = patch[..., None]
    return patch, CropTransform(x0, y0, f)


def rgbt_image(frame: FramePair) -> np.ndarray:
    return np.concatenate([frame.rgb, frame.tir], axis=-1)


def patches_to_tensor(patches, dtype=None) -> torch.Tensor:
    a = np.stack(patches).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype or torch.get_default_dtype())


def subcell_peak(response: torch.Tensor) -> tuple[float, float, float]:
    """Argmax (first in row-major order) refined by a 1-D parabola per axis.

    Returns ``(x, y, peak_value)`` in feature-cell coordinates.
    """
    s = response.detach().cpu().double().numpy()
    h, w = s.shape
    iy, ix = np.unravel_index(int(np.argmax(s)), s.shape)

    def offset(a, c, b):
        d = a - 2 * c + b
        return float(np.clip(0.5 * (a - b) / d, -0.5, 0.5)) if d < 0 else 0.0

    dx = offset(s[iy, ix - 1], s[iy, ix], s[iy, ix + 1]) if 0 < ix < w - 1 else 0.0
    dy = offset(s[iy - 1, ix], s[iy, ix], s[iy + 1, ix]) if 0 < iy < h - 1 else 0.0
    return ix + dx, iy + dy, float(s[iy, ix])


def localize(response: torch.Tensor, transform: CropTransform, stride: int,
             prev: BoundingBox) -> tuple[BoundingBox, float]:
    """Previous-size box centred on the response peak, in image coordinates."""
    px, py, peak = subcell_peak(response)
    cx, cy = transform.point_to_image((px + 0.5) * stride, (py + 0.5) * stride)
    return BoundingBox.from_center(cx, cy, prev.w, prev.h), peak


@dataclass
class TrackerState:
    net: TrackerNet
    config: TrackerConfig
    filters: dict
    memory: dict  # predictor name -> [features M x C x h x w, centers M x 2]
    weights: torch.Tensor
    modulation: torch.Tensor
    box: BoundingBox
    frame_index: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    image_size: tuple = (0, 0)

    @property
    def fusion(self):
        return self.net.fusion


def _patch_features(net: TrackerNet, patches: torch.Tensor):
    bundles = net.extract(patches)
    iou_feats, pred_feats = net.route(bundles)
    projected = {name: net.predictors[name].project(x) for name, x in pred_feats.items()}
    return iou_feats, projected


def _center_cells(box: BoundingBox, stride: int) -> tuple[float, float]:
    cx, cy = box.center
    return cx / stride - 0.5, cy / stride - 0.5


def init(frame: FramePair, box: BoundingBox, net: TrackerNet,
         config: TrackerConfig = TrackerConfig(), seed: int = 0) -> TrackerState:
    """Build the initial filter(s), memory and modulation vector from one frame."""
    H, W = frame.shape
    tol = 0.5
    if box.x < -tol or box.y < -tol or box.x + box.w > W + tol or box.y + box.h > H + tol:
        raise ValueError(f"initial box {box} lies outside the {W}x{H} frame")
    mc = net.config
    image = rgbt_image(frame)
    size = math.sqrt(box.w * box.h)
    cx, cy = box.center
    shifts = [(0.0, 0.0)] + [(sx * config.augment_shift * size, sy * config.augment_shift * size)
                             for sx, sy in ((1, 0), (-1, 0), (0, 1), (0, -1))]
    patches, patch_boxes = [], []
    for dx, dy in shifts:
        p, tf = crop_search_region(image, box, mc.search_scale, mc.out_size, (cx + dx, cy + dy))
        patches.append(p)
        patch_boxes.append(tf.to_patch(box))
    # horizontal flip of the centred patch
    patches.append(patches[0][:, ::-1].copy())
    b0 = patch_boxes[0]
    patch_boxes.append(BoundingBox(mc.out_size - b0.x - b0.w, b0.y, b0.w, b0.h))

    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        x = patches_to_tensor(patches, dtype)
        iou_feats, projected = _patch_features(net, x)
        boxes_px = torch.tensor(np.stack([b.as_array() for b in patch_boxes]), dtype=dtype)
        boxes_f = pixel_to_feature_boxes(boxes_px, net.stride4)
        centers = torch.tensor([_center_cells(b, net.stride4) for b in patch_boxes], dtype=dtype)
        filters, memory = {}, {}
        for name, feats in projected.items():
            pred = net.predictors[name]
            hist = pred(feats[None], boxes_f[None], centers[None], n_iter=config.init_iterations)
            filters[name] = hist[-1][0]
            memory[name] = [feats, centers.clone()]
        ref = iou_feats.index(slice(0, 1))
        modulation = net.iou_head.modulation(ref, boxes_px[:1])[0]
    weights = torch.ones(len(patches), dtype=dtype)
    return TrackerState(net, config, filters, memory, weights, modulation, box, 0,
                        np.random.default_rng(seed), (H, W))


def _response(state: TrackerState, projected: dict) -> torch.Tensor:
    responses = [compute_response(projected[name][0], f) for name, f in state.filters.items()]
    s = responses[0]
    for r in responses[1:]:
        s = fuse_response(s, r)
    return s


def _candidates(state: TrackerState, box: BoundingBox) -> torch.Tensor:
    cfg = state.config
    n = max(1, cfg.num_candidates)
    cx, cy = box.center
    out = [[cx, cy, box.w, box.h]]
    for _ in range(n - 1):
        dc = state.rng.normal(0, cfg.candidate_center_sigma, 2) * np.array([box.w, box.h])
        ds = np.exp(state.rng.normal(0, cfg.candidate_scale_sigma, 2))
        out.append([cx + dc[0], cy + dc[1], box.w * ds[0], box.h * ds[1]])
    a = np.array(out)
    a[:, :2] -= a[:, 2:] / 2
    return torch.tensor(a)


def _clip_box(box: BoundingBox, prev: BoundingBox, state: TrackerState) -> BoundingBox:
    H, W = state.image_size
    m = state.config.max_scale_change
    w = float(np.clip(box.w, prev.w / m, prev.w * m))
    h = float(np.clip(box.h, prev.h / m, prev.h * m))
    w, h = max(w, 1.0), max(h, 1.0)
    cx, cy = box.center
    cx, cy = float(np.clip(cx, 0, W)), float(np.clip(cy, 0, H))
    return BoundingBox.from_center(cx, cy, w, h)


def _update_memory(state: TrackerState, projected: dict, center) -> None:
    cfg = state.config
    state.weights = state.weights * cfg.memory_decay
    for name, (feats, centers) in state.memory.items():
        feats = torch.cat([feats, projected[name]], 0)
        centers = torch.cat([centers, torch.tensor([center], dtype=centers.dtype)], 0)
        state.memory[name] = [feats, centers]
    state.weights = torch.cat([state.weights, torch.ones(1, dtype=state.weights.dtype)])
    if len(state.weights) > cfg.memory_capacity:
        drop = int(torch.argmin(state.weights))
        keep = [i for i in range(len(state.weights)) if i != drop]
        state.weights = state.weights[keep]
        for name in state.memory:
            state.memory[name] = [t[keep] for t in state.memory[name]]


def _reoptimize(state: TrackerState) -> None:
    net = state.net
    for name, f in state.filters.items():
        feats, centers = state.memory[name]
        pred = net.predictors[name]
        z = pred.labels(centers, feats.shape[-2:])
        hist = steepest_descent(f[None], feats[None], z[None], pred.lam,
                                state.config.online_iterations, state.weights[None])
        state.filters[name] = hist[-1][0]


def track_frame(state: TrackerState, frame: FramePair) -> BoundingBox:
    """Localize the target in ``frame`` and update ``state`` in place."""
    if state is None or not state.filters:
        raise RuntimeError("tracker state is not initialized")
    net, cfg, mc = state.net, state.config, state.net.config
    prev = state.box
    patch, tf = crop_search_region(rgbt_image(frame), prev, mc.search_scale, mc.out_size)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        iou_feats, projected = _patch_features(net, patches_to_tensor([patch], dtype))
        response = _response(state, projected)
        test_feats = net.iou_head.test_features(iou_feats)
    coarse, confidence = localize(response, tf, net.stride4, prev)

    cands = _candidates(state, tf.to_patch(coarse)).to(dtype)
    c = state.modulation[None]

    def score(boxes):
        return net.iou_head.predict(c, test_feats, boxes[None])[0]

    refined, scores = refine_box(score, cands, cfg.refine_steps, cfg.refine_step_size)
    k = min(cfg.top_k, len(scores))
    top = torch.topk(scores, k).indices
    wts = scores[top].clamp_min(0)
    wts = wts / wts.sum() if float(wts.sum()) > 0 else torch.full_like(wts, 1.0 / k)
    est = (refined[top] * wts[:, None]).sum(0).detach().double().numpy()
    box = _clip_box(tf.to_image(BoundingBox(*est)), prev, state)

    state.frame_index += 1
    if confidence > cfg.confidence_threshold:
        _update_memory(state, projected, _center_cells(tf.to_patch(box), net.stride4))
        if state.frame_index % cfg.update_interval == 0:
            with torch.no_grad():
                _reoptimize(state)
    state.box = box
    return box


class Tracker:
    """Stateful wrapper used by the evaluation protocols."""

    def __init__(self, net: TrackerNet, config: TrackerConfig = TrackerConfig(), seed: int = 0):
        self.net, self.config, self.seed = net, config, seed
        self.state = None
        self._inits = 0

    def initialize(self, frame: FramePair, box: BoundingBox) -> None:
        self.state = init(frame, box, self.net, self.config, seed=self.seed * 7919 + self._inits)
        self._inits += 1

    def track(self, frame: FramePair) -> BoundingBox:
        if self.state is None:
            raise RuntimeError("tracker state is not initialized")
        return track_frame(self.state, frame)


def write_results(path, boxes) -> Path:
    """One line per frame: ``x,y,w,h`` or an integer VOT code (0 skipped, 2 failure)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [format_box(b) if isinstance(b, BoundingBox) else str(int(b)) for b in boxes]
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_results(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        out.append(int(float(parts[0])) if len(parts) == 1 else BoundingBox(*map(float, parts)))
    return out
