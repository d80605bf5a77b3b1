import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mftrack.backbone import FeatureBundle
from mftrack.data_model import BoundingBox
from mftrack.iou_net import (IoUHead, compute_modulation, iou_regression_loss, predict_iou,
                             refine_box)

D = torch.float64


def make_head(seed=0):
    torch.manual_seed(seed)
    return IoUHead(4, 8, ref_dim=8, test_dim=8, hidden=16).double()


def bundle(seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeatureBundle(torch.randn(4, 18, 18, generator=g, dtype=D),
                         torch.randn(8, 9, 9, generator=g, dtype=D), 8, 16)


def test_modulation_shape_and_repeatability():
    head, x0 = make_head(), bundle()
    c = compute_modulation(x0, BoundingBox(50, 50, 40, 40), head)
    assert c.shape == (head.modulation_dim,) == (16,)
    torch.testing.assert_close(c, compute_modulation(x0, BoundingBox(50, 50, 40, 40), head),
                               rtol=0, atol=0)


def test_zero_reference_gives_zero_modulation():
    head = make_head()
    for m in head.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            torch.nn.init.zeros_(m.bias)
    zero = FeatureBundle(torch.zeros(4, 18, 18, dtype=D), torch.zeros(8, 9, 9, dtype=D), 8, 16)
    c = compute_modulation(zero, BoundingBox(50, 50, 40, 40), head)
    assert torch.count_nonzero(c) == 0


def test_zero_modulation_predicts_zero():
    head = make_head()
    for m in head.g:
        if isinstance(m, torch.nn.Linear):
            torch.nn.init.zeros_(m.bias)
    c = torch.zeros(head.modulation_dim, dtype=D)
    for box in [(10, 10, 30, 30), (60.5, 40.2, 70, 20), (0, 0, 144, 144)]:
        assert predict_iou(c, bundle(1), box, head).item() == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 120), st.floats(0, 120), st.floats(1, 80), st.floats(1, 80))
def test_prediction_finite(x, y, w, h):
    head = make_head()
    c = compute_modulation(bundle(), (50, 50, 40, 40), head)
    assert torch.isfinite(predict_iou(c, bundle(2), (x, y, w, h), head))


def test_degenerate_boxes_rejected():
    head = make_head()
    with pytest.raises(ValueError):
        compute_modulation(bundle(), (50, 50, 0, 40), head)
    c = compute_modulation(bundle(), (50, 50, 40, 40), head)
    with pytest.raises(ValueError):
        predict_iou(c, bundle(), (50, 50, 40, -1), head)


def test_predict_iou_gradient_matches_fd():
    head = make_head()
    c = compute_modulation(bundle(), (50, 50, 40, 40), head).detach()
    rng = np.random.default_rng(0)
    for case in range(10):
        x = bundle(10 + case)
        box = torch.tensor([*rng.uniform(30, 70, 2), *rng.uniform(20, 40, 2)], dtype=D,
                           requires_grad=True)
        (grad,) = torch.autograd.grad(predict_iou(c, x, box, head), box)
        eps = 1e-4
        for i in range(4):
            d = torch.zeros(4, dtype=D)
            d[i] = eps
            with torch.no_grad():
                fd = (predict_iou(c, x, box + d, head) - predict_iou(c, x, box - d, head)) / (2 * eps)
            assert abs(float(fd) - float(grad[i])) <= 1e-3 * max(abs(float(fd)), 1e-6)


def test_refine_zero_steps_returns_input():
    box = torch.tensor([10.0, 20.0, 30.0, 40.0], dtype=D)
    out, _ = refine_box(lambda b: -(b ** 2).sum(1), box, steps=0)
    assert torch.equal(out, box)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_refine_never_lowers_score(seed):
    head = make_head()
    c = compute_modulation(bundle(), (50, 50, 40, 40), head)
    x = bundle(seed)
    feats = head.test_features(x)
    score = lambda b: head.predict(c[None], feats, b[None])[0]
    rng = np.random.default_rng(seed)
    boxes = torch.tensor(np.column_stack([rng.uniform(20, 80, (5, 2)), rng.uniform(15, 50, (5, 2))]),
                         dtype=D)
    with torch.no_grad():
        before = score(boxes)
    refined, s = refine_box(score, boxes, steps=5, step_size=0.5)
    assert bool((s >= before).all())
    with torch.no_grad():
        torch.testing.assert_close(score(refined), s)
    assert bool((refined[:, 2:] > 0).all())


def test_quadratic_stub_recovers_optimum():
    target = torch.tensor([70.0, 62.0, 36.0, 28.0], dtype=D)
    tc = target[:2] + target[2:] / 2

    def stub(b):
        c = b[:, :2] + b[:, 2:] / 2
        return 1 - (((c - tc) / target[2:]) ** 2).sum(1) - (torch.log(b[:, 2:] / target[2:]) ** 2).sum(1)

    rng = np.random.default_rng(3)
    for _ in range(10):
        start = target.clone()
        start[:2] += torch.from_numpy(rng.uniform(-12, 12, 2))
        start[2:] *= torch.from_numpy(np.exp(rng.uniform(-0.4, 0.4, 2)))
        out, _ = refine_box(stub, start, steps=50, step_size=0.25)
        centre = out[:2] + out[2:] / 2
        assert float((centre - tc).abs().max()) / 16 < 0.1


def test_regression_loss_examples():
    assert float(iou_regression_loss([0.2, 0.7], [0.2, 0.7])) == 0.0
    assert float(iou_regression_loss([0.0, 1.0], [1.0, 0.0])) == pytest.approx(1.0)
    assert float(iou_regression_loss([0.3], [0.5])) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        iou_regression_loss([], [])
    with pytest.raises(ValueError):
        iou_regression_loss([0.1, 0.2], [0.1])
