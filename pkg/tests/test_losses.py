import math

import numpy as np
import pytest
import torch

from oracles import bce_loop, central_difference, dice_loop, focal_loop, relative_error, seg_loop
from unsam.errors import ShapeError, ValidationError
from unsam.losses import LossReport, dice_loss, focal_loss, seg_loss


def _rand(rng, shape=(4, 4)):
    p = torch.from_numpy(rng.uniform(0.02, 0.98, shape))
    y = torch.from_numpy(rng.integers(0, 2, shape).astype(float))
    return p, y


def test_focal_perfect_prediction():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert focal_loss(y.clone(), y).item() < 1e-12


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(0)
    p, y = _rand(rng)
    logits = torch.log(p / (1 - p))
    expected = 0.5 * bce_loop(logits.flatten().tolist(), y.flatten().tolist())
    assert focal_loss(p, y, gamma=0.0, alpha=0.5).item() == pytest.approx(expected, abs=1e-9)


def test_focal_single_pixel():
    got = focal_loss(torch.tensor([[0.5]]), torch.tensor([[1.0]])).item()
    assert got == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-7)
    assert round(got, 4) == 0.0433


def test_dice_examples():
    y = torch.zeros(4, 4)
    y[:2] = 1
    assert dice_loss(y.clone(), y).item() <= 1 / (2 * y.sum().item() + 1) + 1e-7
    assert dice_loss(1 - y, y).item() == pytest.approx(1 - 1 / 17, abs=1e-7)
    assert round(dice_loss(1 - y, y).item(), 3) == 0.941
    assert dice_loss(torch.zeros(4, 4), torch.zeros(4, 4)).item() == 0.0


def test_dice_is_per_image_mean():
    y = torch.zeros(2, 4, 4)
    y[0, :2] = 1
    p = torch.rand(2, 4, 4)
    assert dice_loss(p, y).item() == pytest.approx(
        (dice_loss(p[0], y[0]).item() + dice_loss(p[1], y[1]).item()) / 2, abs=1e-6)


def test_seg_loss_mixing():
    rng = np.random.default_rng(1)
    p, y = _rand(rng)
    seg, focal, dice = seg_loss(p, y, 0.8, return_terms=True)
    assert seg.item() == pytest.approx(0.8 * focal.item() + 0.2 * dice.item(), abs=1e-12)
    assert 0.8 * 0.5 + 0.2 * 0.25 == pytest.approx(0.45)
    assert seg_loss(p, y, 1.0).item() == pytest.approx(focal_loss(p, y).item(), abs=1e-12)
    assert seg_loss(p, y, 0.0).item() == pytest.approx(dice_loss(p, y).item(), abs=1e-12)
    with pytest.raises(ValidationError):
        seg_loss(p, y, 1.5)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        focal_loss(torch.rand(4, 4), torch.zeros(4, 3))
    with pytest.raises(ShapeError):
        dice_loss(torch.rand(4, 4), torch.zeros(3, 4))


def test_seg_loss_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
        p, y = _rand(rng, shape)
        lam = float(rng.uniform())
        got = seg_loss(p, y, lam).item()
        want = seg_loop(p.flatten().tolist(), y.flatten().tolist(), lam)
        assert abs(got - want) < 1e-6
        assert abs(focal_loss(p, y).item() - focal_loop(p.flatten().tolist(), y.flatten().tolist(), 2, 0.25)) < 1e-6
        assert abs(dice_loss(p, y).item() - dice_loop(p.flatten().tolist(), y.flatten().tolist())) < 1e-6


@pytest.mark.parametrize("fn", [focal_loss, dice_loss, lambda p, y: seg_loss(p, y, 0.8)])
def test_loss_gradients(fn):
    rng = np.random.default_rng(3)
    p, y = _rand(rng)
    p.requires_grad_(True)
    fn(p, y).backward()
    for idx in [(0, 0), (1, 2), (3, 3), (2, 1)]:
        fd = central_difference(lambda: fn(p, y), p, idx)
        assert relative_error(p.grad[idx].item(), fd) < 1e-4


def test_non_negative_and_finite_at_extremes():
    y = torch.tensor([[1.0, 0.0]])
    for p in (torch.tensor([[0.0, 1.0]]), torch.tensor([[1.0, 0.0]]), torch.tensor([[0.5, 0.5]])):
        for v in (focal_loss(p, y), dice_loss(p, y), seg_loss(p, y)):
            assert torch.isfinite(v) and v.item() >= 0


def test_seg_monotone_in_focal():
    # same soft intersection and mass, so dice is equal; b has a confident false positive
    y = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    a = torch.tensor([[0.5, 0.3, 0.3]], dtype=torch.float64)
    b = torch.tensor([[0.5, 0.6, 0.0]], dtype=torch.float64)
    assert dice_loss(a, y).item() == pytest.approx(dice_loss(b, y).item(), abs=1e-12)
    assert focal_loss(b, y) > focal_loss(a, y)
    for lam in (0.1, 0.8, 1.0):
        assert seg_loss(b, y, lam) > seg_loss(a, y, lam)


def test_loss_report_fields():
    r = LossReport(focal=0.5, dice=0.25, seg=0.45, spgen=0.1, total=0.55)
    assert set(r.as_dict()) == {"focal", "dice", "seg", "spgen", "total", "retained"}
