"""
Where the two modalities meet
=============================

A toy RGB-T sequence has one interval where the RGB frames are nearly black
and noisy, and another where the thermal frames are. Each fusion level
decides where the streams join: at the input image, at the backbone features,
or at the filter responses.
"""

import numpy as np
import torch

from mftrack.fusion import ABLATION_ROWS, FusionConfig
from mftrack.network import ModelConfig, TrackerNet
from mftrack.synth_data import generate_toy_dataset
from mftrack.tracker import crop_search_region, patches_to_tensor, rgbt_image

seq = generate_toy_dataset(1, 0)[0]


def dark_frames(images):
    level = np.array([float(im.mean()) for im in images])
    return np.flatnonzero(level < 0.5 * np.median(level)).tolist()


print(seq.name, "attributes:", sorted(seq.attributes))
print("frames with weak RGB:", dark_frames([f.rgb for f in seq.frames]))
print("frames with weak TIR:", dark_frames([f.tir for f in seq.frames]))

patch, _ = crop_search_region(rgbt_image(seq.frames[0]), seq.groundtruth[0])
x = patches_to_tensor([patch])
for level in ("single_rgb", "pixel", "feature", "response"):
    net = TrackerNet(FusionConfig(level))
    iou_feats, pred_feats = net.route(net.extract(x))
    print(f"{level:10s} backbones run: {sorted(net.fusion.required_modalities())}, "
          f"IoU block4 {tuple(iou_feats.block4.shape[1:])}, "
          f"predictors {{{', '.join(f'{k}: {tuple(v.shape[1:])}' for k, v in pred_feats.items())}}}")

print(f"\n{len(ABLATION_ROWS)} configuration rows:")
for row in ABLATION_ROWS:
    print(f"  {row.name:38s} finetune={'+'.join(sorted(row.finetune)) or 'none'}")
