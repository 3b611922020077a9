import itertools
import math
import random

import pytest
import torch

from oracles import brute_force_lovasz
from rawseg.losses import (IGNORE, LossWeights, OhemConfig, SmoothnessConfig, adaptive_schedule, lovasz_softmax,
                           ohem_ce, pixel_ce, smoothness, total_loss)

DT = torch.float64


def _binary_case(rng: random.Random):
    n = rng.randint(1, 6)
    labels = [rng.randint(0, 1) for _ in range(n)]
    p1 = [rng.choice([rng.random(), 0.0, 1.0, 0.5]) for _ in range(n)]
    return p1, labels


def _lovasz_of(p1, labels):
    p = torch.tensor(p1, dtype=DT)
    probs = torch.stack([1 - p, p]).view(2, 1, -1)
    return lovasz_softmax(probs, torch.tensor(labels).view(1, -1)).item()


def test_lovasz_matches_brute_force_sweep():
    rng = random.Random(0)
    worst = max(abs(_lovasz_of(*c) - brute_force_lovasz(*c)) for c in (_binary_case(rng) for _ in range(1000)))
    assert worst < 1e-9


def test_lovasz_brute_force_exhaustive_labels():
    # every labelling of up to 4 pixels with hard 0/1 predictions
    for n in range(1, 5):
        for labels in itertools.product((0, 1), repeat=n):
            for preds in itertools.product((0.0, 1.0), repeat=n):
                assert abs(_lovasz_of(list(preds), list(labels)) - brute_force_lovasz(list(preds), list(labels))) < 1e-12


def test_lovasz_perfect_and_worst():
    labels = torch.tensor([[0, 1, 1, 0]])
    perfect = torch.nn.functional.one_hot(labels, 2).permute(2, 0, 1).to(DT)
    assert lovasz_softmax(perfect, labels).item() == 0.0
    assert lovasz_softmax(1 - perfect, labels).item() == 1.0


def test_lovasz_ignores_ignored_pixels():
    labels = torch.tensor([[0, 1, IGNORE]])
    probs = torch.tensor([[[0.8, 0.3, 0.5]], [[0.2, 0.7, 0.5]]], dtype=DT)
    ref = lovasz_softmax(probs[..., :2], labels[..., :2])
    assert lovasz_softmax(probs, labels).item() == ref.item()


def test_lovasz_all_ignored_is_zero():
    probs = torch.full((2, 1, 3), 0.5, dtype=DT, requires_grad=True)
    loss = lovasz_softmax(probs, torch.full((1, 3), IGNORE))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(probs.grad, torch.zeros_like(probs))


# --------------------------------------------------------------------------- OHEM

def _probs_with_ce(ces):
    p = torch.exp(-torch.tensor(ces, dtype=DT))
    return torch.stack([p, 1 - p]).view(2, 1, -1), torch.zeros(1, len(ces), dtype=torch.long)


def test_ohem_hand_value():
    probs, labels = _probs_with_ce([1.0, 2.0, 3.0, 4.0])
    assert ohem_ce(probs, labels, OhemConfig(0.25, 1)).item() == pytest.approx(4.0, abs=1e-12)


def test_ohem_min_kept_and_full_fraction():
    probs, labels = _probs_with_ce([1.0, 2.0, 3.0, 4.0])
    assert ohem_ce(probs, labels, OhemConfig(0.25, 2)).item() == pytest.approx(3.5, abs=1e-12)
    assert ohem_ce(probs, labels, OhemConfig(1.0, 1)).item() == pytest.approx(2.5, abs=1e-12)
    assert ohem_ce(probs, labels, OhemConfig(0.25, 100)).item() == pytest.approx(2.5, abs=1e-12)


def test_ohem_errors():
    probs, labels = _probs_with_ce([1.0, 2.0])
    with pytest.raises(ValueError, match="ignored"):
        ohem_ce(probs, torch.full_like(labels, IGNORE))
    with pytest.raises(ValueError, match="outside"):
        ohem_ce(probs, torch.full_like(labels, 7))
    with pytest.raises(ValueError):
        OhemConfig(0.0, 1)


def test_pixel_ce_floor():
    probs = torch.tensor([[[1.0]], [[0.0]]], dtype=DT)
    ce = pixel_ce(probs, torch.tensor([[1]]))
    assert torch.isfinite(ce).all() and ce.item() > 20


# --------------------------------------------------------------------------- smoothness

def test_smoothness_two_pixel_hand_value():
    probs = torch.tensor([[[1.0], [0.0]], [[0.0], [1.0]]], dtype=DT)  # (C=2, H=2, W=1)
    guide = torch.full((3, 2, 1), 0.4, dtype=DT)
    assert smoothness(probs, guide, SmoothnessConfig(0.1)).item() == 2.0


def test_smoothness_edge_weighting():
    probs = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=DT)
    flat = smoothness(probs, torch.zeros(3, 1, 2, dtype=DT))
    edge = smoothness(probs, torch.tensor([[[0.0, 1.0]]] * 3, dtype=DT), SmoothnessConfig(0.1))
    assert edge.item() == pytest.approx(2.0 * math.exp(-10.0), rel=1e-12)
    assert flat.item() == 2.0


def test_smoothness_constant_probs_zero():
    probs = torch.full((3, 5, 5), 1 / 3, dtype=DT)
    assert smoothness(probs, torch.rand(3, 5, 5, dtype=DT)).item() == 0.0


# --------------------------------------------------------------------------- total loss

def test_total_loss_arithmetic():
    assert total_loss(1.0, 1.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert total_loss(1.0, 0.5, 2.0, LossWeights(lambda_smooth=0.1)) == pytest.approx(1.0, abs=1e-15)


def test_adaptive_schedule_ramps():
    w = LossWeights(lambda_smooth=0.2, adaptive=True)
    o = OhemConfig(0.25, 1)
    assert adaptive_schedule(0.0, w, o) == (1.0, 0.0)
    assert adaptive_schedule(0.25, w, o) == pytest.approx((0.625, 0.1))
    assert adaptive_schedule(1.0, w, o) == pytest.approx((0.25, 0.2))
    assert adaptive_schedule(0.3, LossWeights(), o) == (0.25, 0.1)
    with pytest.raises(ValueError):
        adaptive_schedule(1.5, w, o)
