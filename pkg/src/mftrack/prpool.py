"""Precise ROI pooling.

The feature map defines a continuous surface by bilinear interpolation
between cell centres, which sit at integer coordinates (cell ``j`` at
``u = j``) and drop to zero one cell outside the map. Each output bin is the
exact integral average of that surface. The interpolation kernel is
separable (a hat function per axis), so the integral over a bin
``[a, b] x [c, d]`` factorises into per-axis weights
``K(a, b; j) = H(b - j) - H(a - j)`` with ``H`` the antiderivative of the hat.
The result is differentiable in all four box coordinates.
"""
from __future__ import annotations

import torch

from .data_model import BoundingBox


def hat_integral(t: torch.Tensor) -> torch.Tensor:
    """Antiderivative of ``max(0, 1 - |t|)``, zero at ``t = -1``."""
    t = t.clamp(-1.0, 1.0)
    return torch.where(t < 0, 0.5 * (t + 1) ** 2, 1.0 - 0.5 * (1 - t) ** 2)


def _axis_weights(lo: torch.Tensor, size: torch.Tensor, bins: int, n: int) -> torch.Tensor:
    """(N, bins, n) integral weights for bins of ``[lo, lo + size]``."""
    edges = torch.arange(bins + 1, dtype=lo.dtype, device=lo.device) / bins
    edges = lo[:, None] + size[:, None] * edges[None]  # N x (bins+1)
    nodes = torch.arange(n, dtype=lo.dtype, device=lo.device)
    H = hat_integral(edges[:, :, None] - nodes[None, None, :])
    return H[:, 1:] - H[:, :-1]


def _as_boxes(boxes, like: torch.Tensor) -> tuple[torch.Tensor, bool]:
    single = isinstance(boxes, BoundingBox)
    if single:
        boxes = torch.tensor(boxes.as_array()[None], dtype=like.dtype)
    boxes = torch.as_tensor(boxes, dtype=like.dtype)
    if boxes.ndim == 1:
        boxes, single = boxes[None], True
    return boxes, single


def prpool(x: torch.Tensor, boxes, out=(3, 3)) -> torch.Tensor:
    """Pool ``x`` over ``boxes`` (x, y, w, h in feature-cell coordinates).

    ``x`` is ``C x h x w`` (shared by all boxes) or ``N x C x h x w`` (one map
    per box). Returns ``N x C x p x q``, or ``C x p x q`` for a single box.
    """
    p, q = (out, out) if isinstance(out, int) else out
    boxes, single = _as_boxes(boxes, x)
    if bool((boxes[:, 2] <= 0).any()) or bool((boxes[:, 3] <= 0).any()):
        raise ValueError("prpool needs boxes with positive width and height")
    h, w = x.shape[-2:]
    ky = _axis_weights(boxes[:, 1], boxes[:, 3], p, h)
    kx = _axis_weights(boxes[:, 0], boxes[:, 2], q, w)
    area = (boxes[:, 2] / q * boxes[:, 3] / p)[:, None, None, None]
    if x.ndim == 3:
        pooled = torch.einsum("nph,chw,nqw->ncpq", ky, x, kx)
    else:
        if x.shape[0] != boxes.shape[0]:
            raise ValueError(f"{x.shape[0]} feature maps for {boxes.shape[0]} boxes")
        pooled = torch.einsum("nph,nchw,nqw->ncpq", ky, x, kx)
    pooled = pooled / area
    return pooled[0] if single else pooled
