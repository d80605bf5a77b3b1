"""Discriminative filter learning.

The filter ``f`` (C x k x k) is correlated with a feature map to give a
response ``s = x * f`` (same size, zero padding). It is learned by minimising

    L(f) = sum_j w_j ||x_j * f - z_j||^2 + lam ||f||^2

with steepest descent. ``L`` is quadratic in ``f``, so the optimal step along
the negative gradient ``g`` is ``||g||^2 / (2 (sum_j w_j ||x_j * g||^2 + lam ||g||^2))``.
Every iterate stays in the autograd graph so the offline classification
loss can be back-propagated into the features.

Label centres ``c`` are ``(x, y)`` in feature-cell coordinates, with cell
``(i, j)`` centred at ``x = j, y = i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .prpool import prpool


@dataclass(frozen=True)
class LabelConfig:
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("label sigma must be positive")


@dataclass
class FilterModel:
    f: torch.Tensor
    history: list = field(default_factory=list)
    lam: float = 0.01
    step_policy: str = "exact"

    @property
    def n_iter(self) -> int:
        return len(self.history) - 1


@dataclass
class TrainSamples:
    """Features ``N x C x h x w`` with target centres ``N x 2`` (feature cells)."""

    features: torch.Tensor
    centers: torch.Tensor

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ValueError("features must be N x C x h x w")
        if self.centers.shape != (self.features.shape[0], 2):
            raise ValueError("need one (x, y) centre per sample")

    def __len__(self):
        return self.features.shape[0]


def gaussian_label(c, shape, config: LabelConfig = LabelConfig(), dtype=None) -> torch.Tensor:
    """``exp(-||p - c||^2 / (2 sigma^2))`` on an ``h x w`` grid.

    ``c`` is one ``(x, y)`` pair or an ``N x 2`` tensor (gives ``N x h x w``).
    """
    c = torch.as_tensor(c, dtype=dtype or torch.get_default_dtype())
    single = c.ndim == 1
    c = c.reshape(-1, 2)
    h, w = shape
    ys = torch.arange(h, dtype=c.dtype)[None, :, None]
    xs = torch.arange(w, dtype=c.dtype)[None, None, :]
    d2 = (xs - c[:, 0, None, None]) ** 2 + (ys - c[:, 1, None, None]) ** 2
    z = torch.exp(-d2 / (2.0 * config.sigma ** 2))
    return z[0] if single else z


# ------------------------------------------------------------- responses

def compute_response(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Channel-summed cross-correlation with zero padding; ``C x h x w`` -> ``h x w``.

    ``x`` may also be batched ``N x C x h x w`` (-> ``N x h x w``).
    """
    if x.shape[-3] != f.shape[0]:
        raise ValueError(f"feature channels {x.shape[-3]} != filter channels {f.shape[0]}")
    single = x.ndim == 3
    xb = x[None] if single else x
    s = F.conv2d(xb, f[None], padding=f.shape[-1] // 2)[:, 0]
    return s[0] if single else s


def batch_response(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """``B x N x C x h x w`` features, ``B x C x k x k`` filters -> ``B x N x h x w``."""
    B, N, C, h, w = x.shape
    xs = x.transpose(0, 1).reshape(N, B * C, h, w)
    s = F.conv2d(xs, f, padding=f.shape[-1] // 2, groups=B)
    return s.transpose(0, 1)


def _correlation_matrix(x: torch.Tensor, k: int) -> torch.Tensor:
    """``B x N x C x h x w`` -> ``B x N x (C k k) x (h w)`` so that ``s = A^T f``."""
    B, N, C, h, w = x.shape
    cols = F.unfold(x.reshape(B * N, C, h, w), k, padding=k // 2)
    return cols.reshape(B, N, C * k * k, h * w)


def residual(s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Residual seam ``l(s, z)``; plain least squares."""
    return s - z


# ------------------------------------------------------------ optimizer

def filter_objective(f, features, labels, lam, weights=None) -> torch.Tensor:
    """``sum_j w_j ||x_j * f - z_j||^2 + lam ||f||^2`` for one filter."""
    s = compute_response(features, f)
    r2 = ((s - labels) ** 2).flatten(1).sum(1)
    if weights is not None:
        r2 = r2 * torch.as_tensor(weights, dtype=r2.dtype)
    return r2.sum() + lam * (f ** 2).sum()


def steepest_descent(f0: torch.Tensor, features: torch.Tensor, labels: torch.Tensor,
                     lam: float, n_iter: int, weights: torch.Tensor | None = None) -> list:
    """Batched steepest descent with exact line search.

    f0: B x C x k x k; features: B x N x C x h x w; labels: B x N x h x w;
    weights: B x N or None. Returns the iterates ``[f0, ..., f_n_iter]``.
    """
    if n_iter < 0 or lam < 0:
        raise ValueError("n_iter and lam must be non-negative")
    B, N, C, h, w = features.shape
    k = f0.shape[-1]
    if f0.shape != (B, C, k, k) or labels.shape != (B, N, h, w):
        raise ValueError(
            f"shape mismatch: f0 {tuple(f0.shape)}, features {tuple(features.shape)}, "
            f"labels {tuple(labels.shape)}")
    history = [f0]
    if n_iter == 0:
        return history
    A = _correlation_matrix(features, k)  # B N K P
    z = labels.reshape(B, N, h * w)
    wts = torch.ones(B, N, dtype=f0.dtype) if weights is None else weights.to(f0.dtype)
    f = f0.reshape(B, -1)
    for _ in range(n_iter):
        r = residual(torch.einsum("bnkp,bk->bnp", A, f), z)
        g = 2.0 * (torch.einsum("bnkp,bnp->bk", A, r * wts[..., None]) + lam * f)
        Ag = torch.einsum("bnkp,bk->bnp", A, g)
        gg = (g * g).sum(1)
        denom = 2.0 * ((Ag * Ag).sum(2) * wts).sum(1) + 2.0 * lam * gg
        alpha = gg / denom.clamp_min(1e-30)
        f = f - alpha[:, None] * g
        history.append(f.reshape(B, C, k, k))
    return history


def optimize_filter(f0: torch.Tensor, samples: TrainSamples | torch.Tensor, labels: torch.Tensor,
                    lam: float = 0.01, n_iter: int = 5, weights=None) -> FilterModel:
    """Single-filter steepest descent; returns the final filter and all iterates."""
    feats = samples.features if isinstance(samples, TrainSamples) else samples
    if feats.shape[1] != f0.shape[0]:
        raise ValueError(f"filter has {f0.shape[0]} channels, features have {feats.shape[1]}")
    if labels.shape != (feats.shape[0],) + tuple(feats.shape[-2:]):
        raise ValueError(f"labels {tuple(labels.shape)} do not match features {tuple(feats.shape)}")
    wts = None if weights is None else torch.as_tensor(weights, dtype=f0.dtype)[None]
    hist = steepest_descent(f0[None], feats[None], labels[None], lam, n_iter, wts)
    hist = [h[0] for h in hist]
    return FilterModel(hist[-1], hist, lam)


def classification_loss(history, test_features: torch.Tensor, test_labels: torch.Tensor,
                        response_fn: Callable | None = None) -> torch.Tensor:
    """Mean over iterates of the summed squared test residuals.

    Batched use: iterates ``B x C x k x k``, features ``B x N x C x h x w``,
    labels ``B x N x h x w``; the result is also averaged over ``B``.
    Unbatched: iterates ``C x k x k``, features ``N x C x h x w``.
    """
    if len(history) == 0:
        raise ValueError("empty filter history")
    if test_features.shape[0] == 0 or test_labels.numel() == 0:
        raise ValueError("empty test set")
    batched = history[0].ndim == 4
    total = 0.0
    for f in history:
        if response_fn is not None:
            s = response_fn(f)
        elif batched:
            s = batch_response(test_features, f)
        else:
            s = compute_response(test_features, f)
        r2 = residual(s, test_labels) ** 2
        total = total + (r2.flatten(1).sum(1) if batched else r2.sum())
    loss = total / len(history)
    return loss.mean() if batched else loss


# ------------------------------------------------------- filter initializer

def init_filter(features: torch.Tensor, target_boxes, filter_size: int = 5,
                conv: nn.Module | None = None) -> torch.Tensor:
    """Initial filter: optional conv layer, PrPool over each target box, mean over samples.

    features: N x C x h x w; target_boxes: N x 4 (x, y, w, h) in feature cells.
    """
    if features.shape[0] == 0:
        raise ValueError("init_filter needs at least one sample")
    x = conv(features) if conv is not None else features
    boxes = torch.as_tensor(target_boxes, dtype=x.dtype).reshape(-1, 4)
    pooled = prpool(x, boxes, (filter_size, filter_size))
    return pooled.mean(0)


class ModelPredictor(nn.Module):
    """Classifier head: feature projection, learned initializer, SD optimizer."""

    def __init__(self, in_channels: int, feat_dim: int = 32, filter_size: int = 5,
                 n_iter: int = 5, lam: float = 0.01, sigma: float = 1.0):
        super().__init__()
        self.filter_size, self.n_iter, self.lam = filter_size, n_iter, lam
        self.label_config = LabelConfig(sigma)
        self.feature = nn.Sequential(
            nn.Conv2d(in_channels, feat_dim, 3, padding=1), nn.SiLU(),
            nn.Conv2d(feat_dim, feat_dim, 3, padding=1))
        self.initializer = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Classifier features for ``... x C x h x w`` block4 maps.

        Each map is rescaled so its per-cell feature vectors have unit mean
        squared norm, which keeps response magnitudes independent of the
        input contrast.
        """
        lead = x.shape[:-3]
        y = self.feature(x.reshape(-1, *x.shape[-3:]))
        h, w = y.shape[-2:]
        energy = (y * y).flatten(1).sum(1) / (h * w)
        y = y / torch.sqrt(energy + 1e-8)[:, None, None, None]
        return y.reshape(*lead, *y.shape[-3:])

    def initial_filter(self, feats: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """feats: B x N x C x h x w (projected); boxes: B x N x 4 -> B x C x k x k."""
        B, N = feats.shape[:2]
        x = self.initializer(feats.reshape(B * N, *feats.shape[2:]))
        pooled = prpool(x, boxes.reshape(B * N, 4), (self.filter_size, self.filter_size))
        f = pooled.reshape(B, N, *pooled.shape[1:]).mean(1)
        # keep the initial response on the scale of the labels
        return f / f[0].numel()

    def labels(self, centers: torch.Tensor, shape) -> torch.Tensor:
        """centers: ... x 2 -> ... x h x w."""
        lead = centers.shape[:-1]
        z = gaussian_label(centers.reshape(-1, 2), shape, self.label_config, dtype=centers.dtype)
        return z.reshape(*lead, *shape)

    def forward(self, feats, boxes, centers, n_iter: int | None = None, weights=None):
        """Learn filters from projected training features; returns the iterate list."""
        f0 = self.initial_filter(feats, boxes)
        z = self.labels(centers, feats.shape[-2:])
        n = self.n_iter if n_iter is None else n_iter
        return steepest_descent(f0, feats, z, self.lam, n, weights)
