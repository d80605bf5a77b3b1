"""
Learning a discriminative filter by steepest descent
====================================================

A filter ``f`` is fitted to a few training feature maps so that the
correlation ``x * f`` reproduces a Gaussian label centred on the target.
The objective is quadratic, so each descent step uses the exact line search
and the loss can only go down. We compare against the closed-form solution.
"""

import numpy as np
import torch

from mftrack.model_predictor import (compute_response, filter_objective, gaussian_label,
                                     optimize_filter)

torch.manual_seed(0)
N, C, H, W, k, lam = 3, 4, 12, 12, 3, 0.05

# features with a bright blob at the target, labels centred on it
centers = torch.tensor([[4.0, 5.0], [6.5, 6.0], [7.0, 3.5]], dtype=torch.float64)
labels = gaussian_label(centers, (H, W), dtype=torch.float64)
x = 0.3 * torch.randn(N, C, H, W, dtype=torch.float64) + labels[:, None]

model = optimize_filter(torch.zeros(C, k, k, dtype=torch.float64), x, labels, lam, n_iter=30)
losses = [float(filter_objective(f, x, labels, lam)) for f in model.history]
print("loss per iterate:", np.round(losses[:8], 4), "...", round(losses[-1], 6))

# closed form: stack every correlation window into one least-squares system
pad = np.pad(x.numpy(), ((0, 0), (0, 0), (1, 1), (1, 1)))
A = np.array([pad[n, :, i:i + k, j:j + k].ravel() for n in range(N) for i in range(H) for j in range(W)])
z = labels.numpy().ravel()
f_star = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ z)
best = ((A @ f_star - z) ** 2).sum() + lam * (f_star ** 2).sum()
print(f"closed form loss {best:.6f}, relative gap {(losses[-1] - best) / best:.2e}")

# the learned filter peaks where the label does
response = compute_response(x[0], model.f)
iy, ix = np.unravel_index(int(response.argmax()), response.shape)
print("response peak (x, y):", (ix, iy), "label centre:", tuple(centers[0].tolist()))
