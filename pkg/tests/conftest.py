import numpy as np
import pytest
import torch

from mftrack.backbone import BackboneConfig
from mftrack.network import ModelConfig
from mftrack.synth_data import ToySequenceSpec, generate_toy_sequence


@pytest.fixture
def tiny_model_config():
    bb = BackboneConfig(block_channel_widths=(4, 8, 8, 8))
    return ModelConfig(backbone=bb, feat_dim=8, filter_size=3, n_iter=2, iou_dim=8,
                       iou_hidden=16, out_size=64)


@pytest.fixture
def toy_sequence():
    spec = ToySequenceSpec(num_frames=12, image_size=(64, 64), start_box=(20, 20, 12, 12),
                           velocity=(1.0, 0.5), num_distractors=1, seed=3, name="fixture")
    return generate_toy_sequence(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = [line for name, mod in list(sys.modules.items()) if name.endswith("test_acceptance")
             for line in getattr(mod, "RESULTS", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
