"""
Training and tracking at toy scale
==================================

Train a small feature-fusion tracker for a few hundred steps, then run the
one-pass evaluation on held-out toy sequences. Takes a few minutes on one
CPU core. Pass a step count as the first argument to change the budget.
"""

import sys

import torch

from mftrack.evaluation import attribute_breakdown, run_ope
from mftrack.fusion import FusionConfig
from mftrack.synth_data import generate_toy_dataset
from mftrack.tracker import Tracker
from mftrack.trainer import TrainConfig, train

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

train_set = generate_toy_dataset(40, 0)
test_set = generate_toy_dataset(5, 100, prefix="test")

result = train(train_set, TrainConfig(steps=steps), FusionConfig("feature"),
               log=lambda s, l: print(s, {k: round(v, 3) for k, v in l.items()}) if s % 50 == 0 else None)

curves, boxes = run_ope(lambda seed: Tracker(result.net, seed=seed), test_set, runs=1)
print(f"\nOPE on {len(test_set)} sequences: SR {curves.sr_auc:.3f}  PR@20px {curves.pr20:.3f}")
for name, (p, s) in curves.per_sequence.items():
    print(f"  {name}: SR {s.mean():.3f}")
print("per attribute (PR, SR):", attribute_breakdown(curves.per_sequence, test_set))
