"""IoU prediction head and box refinement.

Boxes handed to the head are in search-patch pixels; each block converts them
to its own feature-cell coordinates (cell ``j`` centred at ``(j + 0.5) * stride``).
"""
from __future__ import annotations

from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeatureBundle
from .data_model import BoundingBox
from .prpool import prpool

__all__ = ["IoUHead", "prpool", "compute_modulation", "predict_iou", "refine_box",
           "iou_regression_loss", "pixel_to_feature_boxes"]


def pixel_to_feature_boxes(boxes: torch.Tensor, stride: int) -> torch.Tensor:
    """xywh pixel boxes to feature-cell boxes for a map of the given stride."""
    b = boxes / stride
    return torch.cat([b[..., :2] - 0.5, b[..., 2:]], dim=-1)


def _conv(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU())


class IoUHead(nn.Module):
    """Reference branch (one conv per block) and test branch (two convs per block).

    The modulation vector has one entry per test-branch pooled channel; the
    predictor ``g`` is three fully connected layers.
    """

    def __init__(self, c3: int, c4: int, ref_dim: int = 32, test_dim: int = 32,
                 ref_pool: int = 5, test_pool: int = 3, hidden: int = 64):
        super().__init__()
        self.ref_pool, self.test_pool = ref_pool, test_pool
        self.ref_conv = nn.ModuleList([_conv(c3, ref_dim), _conv(c4, ref_dim)])
        self.ref_fc = nn.ModuleList([nn.Linear(ref_dim * ref_pool ** 2, test_dim) for _ in range(2)])
        self.test_conv = nn.ModuleList([
            nn.Sequential(_conv(c3, test_dim), _conv(test_dim, test_dim)),
            nn.Sequential(_conv(c4, test_dim), _conv(test_dim, test_dim))])
        self.g = nn.Sequential(
            nn.Linear(2 * test_dim * test_pool ** 2, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, 1))

    @property
    def modulation_dim(self) -> int:
        return 2 * self.ref_fc[0].out_features

    @staticmethod
    def _blocks(bundle: FeatureBundle):
        b3, b4 = bundle.block3, bundle.block4
        if b3.ndim == 3:
            b3, b4 = b3[None], b4[None]
        return (b3, bundle.stride3), (b4, bundle.stride4)

    def modulation(self, ref: FeatureBundle, boxes: torch.Tensor) -> torch.Tensor:
        """N reference maps and N x 4 pixel boxes -> N x D modulation vectors."""
        out = []
        for (x, stride), conv, fc in zip(self._blocks(ref), self.ref_conv, self.ref_fc):
            y = conv(x)
            pooled = prpool(y, pixel_to_feature_boxes(boxes, stride), self.ref_pool)
            out.append(fc(pooled.flatten(1)))
        return torch.cat(out, dim=1)

    def test_features(self, test: FeatureBundle) -> list:
        return [(conv(x), stride) for (x, stride), conv in zip(self._blocks(test), self.test_conv)]

    def predict(self, c: torch.Tensor, feats: list, boxes: torch.Tensor) -> torch.Tensor:
        """c: N x D; feats from :meth:`test_features` (N maps); boxes: N x M x 4 -> N x M."""
        N, M = boxes.shape[:2]
        pooled = []
        for y, stride in feats:
            yy = y.repeat_interleave(M, dim=0)
            fb = pixel_to_feature_boxes(boxes.reshape(N * M, 4), stride)
            pooled.append(prpool(yy, fb, self.test_pool))
        z = torch.cat(pooled, dim=1)  # NM x D x p x p
        cm = c.repeat_interleave(M, dim=0)[:, :, None, None]
        return self.g((cm * z).flatten(1)).reshape(N, M)


def _box_tensor(box, dtype) -> torch.Tensor:
    if isinstance(box, BoundingBox):
        return torch.tensor(box.as_array(), dtype=dtype)
    return torch.as_tensor(box, dtype=dtype)


def compute_modulation(x0: FeatureBundle, b0, head: IoUHead) -> torch.Tensor:
    """Modulation vector from one reference frame (unbatched bundle)."""
    dtype = x0.block4.dtype
    box = _box_tensor(b0, dtype).reshape(1, 4)
    if bool((box[:, 2:] <= 0).any()):
        raise ValueError("degenerate reference box")
    ref = x0 if x0.block4.ndim == 4 else FeatureBundle(x0.block3[None], x0.block4[None],
                                                       x0.stride3, x0.stride4, x0.modality)
    return head.modulation(ref, box)[0]


def predict_iou(c: torch.Tensor, x: FeatureBundle, box, head: IoUHead) -> torch.Tensor:
    """Scalar predicted IoU of ``box`` (pixels) on the test features ``x``."""
    b = _box_tensor(box, c.dtype).reshape(1, 1, 4)
    if bool((b[..., 2:] <= 0).any()):
        raise ValueError("degenerate box")
    return head.predict(c[None], head.test_features(x), b)[0, 0]


def refine_box(score_fn: Callable[[torch.Tensor], torch.Tensor], box, steps: int = 10,
               step_size: float = 0.25) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient ascent on a box score over (cx, cy, log w, log h).

    ``score_fn`` maps an ``M x 4`` xywh tensor to ``M`` scores. Centre steps
    are scaled by each candidate's initial size. Returns the best iterate per
    candidate and its score (``steps == 0`` returns the input).
    """
    with torch.enable_grad():
        b0 = _box_tensor(box, torch.get_default_dtype() if not torch.is_tensor(box) else box.dtype)
        single = b0.ndim == 1
        b0 = b0.reshape(-1, 4).detach()
        size0 = b0[:, 2:].clone()
        theta = torch.cat([(b0[:, :2] + b0[:, 2:] / 2) / size0, b0[:, 2:].log()], dim=1)

        def to_box(t):
            wh = t[:, 2:].exp()
            return torch.cat([t[:, :2] * size0 - wh / 2, wh], dim=1)

        best_box = b0.clone()
        best_score = score_fn(b0).detach().reshape(-1)
        for _ in range(steps):
            theta = theta.detach().requires_grad_(True)
            s = score_fn(to_box(theta)).reshape(-1)
            (grad,) = torch.autograd.grad(s.sum(), theta)
            cur = to_box(theta).detach()
            better = s.detach() > best_score
            best_box = torch.where(better[:, None], cur, best_box)
            best_score = torch.where(better, s.detach(), best_score)
            theta = theta.detach() + step_size * grad
        if steps > 0:
            final = to_box(theta.detach())
            s = score_fn(final).detach().reshape(-1)
            better = s > best_score
            best_box = torch.where(better[:, None], final, best_box)
            best_score = torch.where(better, s, best_score)
    if single:
        return best_box[0], best_score[0]
    return best_box, best_score


def iou_regression_loss(predictions, targets) -> torch.Tensor:
    if not torch.is_tensor(predictions):
        predictions = torch.as_tensor(predictions, dtype=torch.get_default_dtype())
    targets = torch.as_tensor(targets, dtype=predictions.dtype)
    if predictions.numel() == 0:
        raise ValueError("empty prediction set")
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(predictions.shape)} vs {tuple(targets.shape)}")
    return F.mse_loss(predictions, targets)
