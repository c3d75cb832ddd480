import math

import pytest
import torch
import torch.nn.functional as F

from pxsg_core.errors import DimensionMismatchError
from pxsg_core.losses import (
    LossReport,
    adversarial_loss,
    dice_loss,
    diversity_from_flows,
    diversity_loss,
    invertibility_loss,
    pair_log_likelihood,
    smoothness_loss,
    ssim_loss,
    summarize,
    total_loss,
)
from pxsg_core.settings import LossWeights
from pxsg_core.similarity import K1, minimum_extent, ms_ssim, soft_dice, ssim, window_size
from pxsg_core.volume import one_hot


def _onehot_batch(labels, classes):
    return one_hot(labels, classes).soft.unsqueeze(0)


def test_dice_loss_of_identical_maps_is_zero():
    labels = torch.randint(0, 3, (4, 4, 4), generator=torch.Generator().manual_seed(0))
    y = _onehot_batch(labels, 3)
    assert dice_loss(y, y).item() == pytest.approx(0.0, abs=1e-7)


def test_dice_loss_of_disjoint_maps_is_near_one():
    labels = torch.zeros(4, 4, 4, dtype=torch.long)
    labels[:2] = 1
    assert dice_loss(_onehot_batch(labels, 2), _onehot_batch(1 - labels, 2)).item() > 0.95


def test_soft_dice_hand_count():
    a = torch.zeros(1, 1, 2, 2, 2)
    b = torch.zeros(1, 1, 2, 2, 2)
    a.view(-1)[:4] = 1.0
    b.view(-1)[2:6] = 1.0
    assert soft_dice(a, b, smooth=0.0).item() == pytest.approx(0.5)


def test_dice_loss_rejects_class_mismatch():
    with pytest.raises(DimensionMismatchError):
        dice_loss(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 3, 2, 2, 2))


def test_ssim_of_identical_volumes_is_one():
    x = torch.rand(1, 1, 12, 12, 12, generator=torch.Generator().manual_seed(1))
    assert ssim(x, x).item() == pytest.approx(1.0, abs=1e-6)
    assert ms_ssim(x, x).item() == pytest.approx(1.0, abs=1e-6)
    assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-6)


def test_ssim_of_constant_patches_has_closed_form():
    x = torch.zeros(1, 1, 12, 12, 12, dtype=torch.float64)
    y = torch.ones(1, 1, 12, 12, 12, dtype=torch.float64)
    c1 = K1 ** 2
    assert ssim(x, y).item() == pytest.approx(c1 / (1 + c1), abs=1e-6)
    assert c1 / (1 + c1) == pytest.approx(1e-4 / 1.0001)


def test_ms_ssim_rejects_grids_below_the_minimum_extent():
    x = torch.rand(1, 1, 11, 16, 16)
    with pytest.raises(DimensionMismatchError, match="12"):
        ms_ssim(x, x)
    assert minimum_extent(3) == 12
    assert window_size((7, 20, 20)) == 7
    assert window_size((6, 20, 20)) == 5


def test_pair_log_likelihood_at_one_half():
    value = pair_log_likelihood(torch.tensor([0.5]), torch.tensor([1.0]))
    assert value.item() == pytest.approx(math.log(0.5))


def test_adversarial_terms_with_an_undecided_discriminator():
    y = torch.zeros(2, 2, 4, 4, 4)
    terms = adversarial_loss(lambda a, b: torch.full((a.shape[0],), 0.5), y, y, torch.tensor([1.0, 0.0]), y, y)
    assert terms.generator_term.item() == pytest.approx(math.log(0.5))
    assert terms.discriminator_loss.item() == pytest.approx(-2 * math.log(0.5))


def test_adversarial_terms_with_a_perfect_discriminator():
    y = torch.zeros(2, 2, 4, 4, 4, dtype=torch.float64)
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    calls = []

    def perfect(a, b):
        calls.append(a)
        if len(calls) == 1:
            return labels.clone()
        return torch.ones(a.shape[0], dtype=torch.float64)

    terms = adversarial_loss(perfect, y, y, labels, y, y)
    assert terms.real_term.item() == pytest.approx(0.0, abs=1e-6)
    assert terms.generator_term.item() == pytest.approx(math.log(1e-7), rel=1e-6)


def test_adversarial_loss_rejects_non_binary_labels():
    y = torch.zeros(1, 2, 4, 4, 4)
    with pytest.raises(ValueError):
        adversarial_loss(lambda a, b: torch.full((1,), 0.5), y, y, torch.tensor([0.5]), y, y)


def test_smoothness_of_constant_flow_is_zero():
    flow = torch.full((1, 3, 5, 5, 5), 1.7)
    assert smoothness_loss(flow).item() == pytest.approx(0.0)


def test_smoothness_of_unit_ramp_is_one():
    flow = torch.zeros(1, 3, 6, 5, 4)
    flow[0, 0] = torch.arange(6, dtype=torch.float32).view(6, 1, 1)
    assert smoothness_loss(flow).item() == pytest.approx(1.0)


def test_invertibility_loss_vanishes_for_identity_flows():
    x = torch.rand(1, 1, 12, 12, 12, generator=torch.Generator().manual_seed(2))
    y = _onehot_batch(torch.randint(0, 2, (12, 12, 12), generator=torch.Generator().manual_seed(3)), 2)
    zero = torch.zeros(1, 3, 12, 12, 12)
    assert invertibility_loss(x, y, zero, zero).item() == pytest.approx(0.0, abs=1e-6)


def _blob_phantom():
    x = torch.zeros(1, 1, 12, 12, 12)
    x[0, 0, 2:6, 3:8, 4:9] = 1.0
    labels = (x[0, 0] > 0.5).long()
    return x, _onehot_batch(labels, 2)


def test_diversity_is_minimal_for_equal_keys(generator):
    x = torch.rand(1, 1, 16, 16, 16, generator=torch.Generator().manual_seed(4))
    y = _onehot_batch(torch.randint(0, 3, (16, 16, 16), generator=torch.Generator().manual_seed(5)), 3)
    key = torch.randn(1, 4, generator=torch.Generator().manual_seed(6))
    assert diversity_loss(generator, x, y, key, key).item() == pytest.approx(0.0, abs=1e-6)


def test_opposite_translations_are_more_diverse_than_equal_ones():
    x, y = _blob_phantom()
    plus = torch.zeros(1, 3, 12, 12, 12)
    plus[:, 0] = 1.0
    same = diversity_from_flows(x, y, plus, plus).item()
    opposite = diversity_from_flows(x, y, plus, -plus).item()
    assert opposite > same


def test_total_loss_combines_terms_with_signs():
    report = total_loss(0.2, 0.1, 0.05, 0.01, 0.3)
    assert report.total.item() == pytest.approx(0.1)
    assert set(report.as_floats()) == set(LossReport.TERMS)


def test_total_loss_of_zero_terms_is_zero():
    assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0).total.item() == 0.0


def test_zero_weights_leave_only_the_segmentation_term():
    report = total_loss(0.37, float("nan"), 1.0, float("inf"), 2.0, LossWeights.zero())
    assert report.total.item() == pytest.approx(0.37)
    assert report.non_finite_term() == "adv"


def test_summarize_averages_each_term():
    reports = [total_loss(0.2, 0.0, 0.0, 0.0, 0.0), total_loss(0.4, 0.0, 0.0, 0.0, 0.0)]
    assert summarize(reports)["seg"] == pytest.approx(0.3)
    assert math.isnan(summarize([])["total"])


KINK_MARGIN = 1e-3


def _away_from_kinks(flow):
    frac = flow - torch.floor(flow)
    near = (frac < KINK_MARGIN) | (frac > 1 - KINK_MARGIN)
    return torch.where(near, flow + 0.01, flow)


def _smooth_field(channels, dims, seed):
    gen = torch.Generator().manual_seed(seed)
    control = torch.rand(1, channels, 4, 4, 4, generator=gen, dtype=torch.float64)
    return F.interpolate(control, size=dims, mode="trilinear", align_corners=True)


def _gradcheck(fn, inputs):
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-6, rtol=1e-4, fast_mode=True)


def test_ms_ssim_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(1, 1, 16, 16, 16, generator=gen, dtype=torch.float64)
    y = (0.8 * x + 0.2 * torch.rand(x.shape, generator=gen, dtype=torch.float64)).clamp(0, 1)
    x.requires_grad_(True)
    y.requires_grad_(True)
    assert _gradcheck(lambda a, b: ms_ssim(a, b), (x, y))


def test_smoothness_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(1)
    flow = torch.randn(1, 3, 8, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    assert _gradcheck(smoothness_loss, (flow,))


def test_dice_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(2)
    pred = torch.softmax(torch.randn(2, 3, 5, 5, 5, generator=gen, dtype=torch.float64), dim=1)
    target = torch.softmax(3 * torch.randn(2, 3, 5, 5, 5, generator=gen, dtype=torch.float64), dim=1)
    pred.requires_grad_(True)
    target.requires_grad_(True)
    assert _gradcheck(dice_loss, (pred, target))


def test_invertibility_gradient_matches_finite_differences():
    dims = (12, 12, 12)
    x = _smooth_field(1, dims, seed=3)
    y = torch.softmax(4 * _smooth_field(3, dims, seed=4), dim=1)
    gen = torch.Generator().manual_seed(5)
    flows = [
        _away_from_kinks(torch.empty(1, 3, *dims, dtype=torch.float64).uniform_(-0.6, 0.6, generator=gen)).requires_grad_(True)
        for _ in range(2)
    ]
    assert _gradcheck(lambda f, g: invertibility_loss(x, y, f, g), tuple(flows))
