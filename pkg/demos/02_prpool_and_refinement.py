"""
Precise ROI pooling and box refinement
======================================

PrPool averages the bilinearly interpolated feature surface over each bin
exactly, so the pooled values are smooth in the box coordinates. That is what
lets the IoU head refine a box by gradient ascent.
"""

import torch

from mftrack.iou_net import refine_box
from mftrack.prpool import prpool

# a linear ramp: the exact bin average is the ramp value at the bin centre
ramp = torch.arange(8, dtype=torch.float64).repeat(8, 1)[None]  # value = column index
box = torch.tensor([1.25, 2.0, 3.0, 2.0], dtype=torch.float64)
print("pooled ramp (2x3 bins):\n", prpool(ramp, box, (2, 3))[0])
print("bin centres in x:", [1.25 + 0.5 + i for i in range(3)])

# gradients with respect to the box exist everywhere
b = box.clone().requires_grad_(True)
prpool(ramp, b, (2, 3)).sum().backward()
print("d(sum)/d(x, y, w, h):", b.grad.tolist())

# refinement on a score with a known optimum
target = torch.tensor([40.0, 30.0, 24.0, 16.0], dtype=torch.float64)


def score(boxes):
    c = boxes[:, :2] + boxes[:, 2:] / 2
    tc = target[:2] + target[2:] / 2
    return 1 - (((c - tc) / target[2:]) ** 2).sum(1) - (torch.log(boxes[:, 2:] / target[2:]) ** 2).sum(1)


start = torch.tensor([[34.0, 35.0, 30.0, 12.0]], dtype=torch.float64)
for steps in (0, 5, 20, 50):
    out, s = refine_box(score, start, steps=steps, step_size=0.25)
    print(f"{steps:3d} steps: box {[round(v, 2) for v in out[0].tolist()]} score {float(s[0]):.4f}")
