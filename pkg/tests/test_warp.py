import math

import pytest
import torch
import torch.nn.functional as F

from pxsg_core.errors import DimensionMismatchError, NonFiniteError
from pxsg_core.phantom import synthesize_subject
from pxsg_core.settings import PhantomSpec
from pxsg_core.volume import FlowField, Volume, one_hot, pad_to
from pxsg_core.warp import (
    TrilinearWarp,
    compose_roundtrip,
    invert_flow,
    warp,
    warp_backward,
    warp_tensor,
)

KINK_MARGIN = 1e-3


def _away_from_kinks(flow: torch.Tensor) -> torch.Tensor:
    """Move components whose fractional part is within the margin of an integer."""
    frac = flow - torch.floor(flow)
    near = (frac < KINK_MARGIN) | (frac > 1 - KINK_MARGIN)
    return torch.where(near, flow + 0.01, flow)


def test_zero_flow_is_bitwise_identity(random_volume):
    volume = random_volume((5, 6, 7))
    assert torch.equal(warp(volume, FlowField.zeros(volume.dims)).data, volume.data)


def test_half_voxel_shift_interpolates_neighbours():
    source = torch.tensor([0.0, 1.0]).view(1, 1, 2, 1, 1)
    flow = torch.zeros(1, 3, 2, 1, 1)
    flow[0, 0, 0] = 0.5
    out = warp_tensor(source, flow)
    assert out[0, 0, 0, 0, 0].item() == pytest.approx(0.5)


def test_samples_outside_the_grid_are_zero():
    out = warp(Volume(torch.ones(1, 1, 1)), FlowField.constant((1, 1, 1), (2.0, 0.0, 0.0)))
    assert out.data.item() == 0.0


def test_rejects_mismatched_dims_and_non_finite_flow():
    with pytest.raises(DimensionMismatchError):
        warp_tensor(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 3, 2, 2, 3))
    flow = torch.zeros(1, 3, 2, 2, 2)
    flow[0, 1, 0, 0, 0] = float("inf")
    with pytest.raises(NonFiniteError):
        warp_tensor(torch.zeros(1, 1, 2, 2, 2), flow)


@pytest.mark.parametrize("seed", range(20))
def test_analytical_gradients_match_finite_differences(seed):
    gen = torch.Generator().manual_seed(seed)
    source = torch.rand(1, 2, 6, 6, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    flow = _away_from_kinks(torch.empty(1, 3, 6, 6, 6, dtype=torch.float64).uniform_(-1.5, 1.5, generator=gen))
    flow.requires_grad_(True)
    assert torch.autograd.gradcheck(
        TrilinearWarp.apply, (source, flow), eps=1e-4, atol=1e-6, rtol=1e-4, fast_mode=True
    )


def test_zero_flow_passes_upstream_gradient_through(random_volume):
    volume = random_volume((4, 4, 4))
    upstream = torch.randn(4, 4, 4, generator=torch.Generator().manual_seed(5))
    grad_source, _ = warp_backward(volume, FlowField.zeros(volume.dims), upstream)
    assert torch.allclose(grad_source, upstream)


def test_constant_volume_has_no_flow_gradient_in_the_interior():
    volume = Volume(torch.full((6, 6, 6), 0.7, dtype=torch.float64))
    gen = torch.Generator().manual_seed(3)
    flow = FlowField(_away_from_kinks(torch.empty(3, 6, 6, 6, dtype=torch.float64).uniform_(-0.4, 0.4, generator=gen)))
    upstream = torch.zeros(6, 6, 6, dtype=torch.float64)
    upstream[1:-1, 1:-1, 1:-1] = 1.0
    _, grad_flow = warp_backward(volume, flow, upstream)
    assert torch.allclose(grad_flow, torch.zeros_like(grad_flow), atol=1e-12)


def test_zero_flow_gradient_is_the_forward_difference():
    ramp = torch.arange(5, dtype=torch.float64).view(5, 1, 1).expand(5, 4, 4).contiguous()
    upstream = torch.zeros(5, 4, 4, dtype=torch.float64)
    upstream[:-1] = 1.0
    _, grad_flow = warp_backward(Volume(ramp), FlowField.zeros((5, 4, 4), dtype=torch.float64), upstream)
    assert torch.equal(grad_flow[0, :-1], torch.ones(4, 4, 4, dtype=torch.float64))
    assert not grad_flow[1, :, :-1].any()
    assert not grad_flow[2, :, :, :-1].any()


def test_zero_flows_round_trip_exactly(random_volume):
    volume = random_volume((16, 16, 16))
    zero = FlowField.zeros(volume.dims)
    result = compose_roundtrip(volume, zero, zero)
    assert torch.equal(result.reconstruction.data, volume.data)
    assert result.metric == "ms_ssim"
    assert result.value == pytest.approx(1.0)


def test_translation_round_trip_restores_the_interior():
    data = torch.zeros(8, 8, 8)
    data[1:-1, 1:-1, 1:-1] = torch.rand(6, 6, 6, generator=torch.Generator().manual_seed(2))
    volume = Volume(data)
    forward = FlowField.constant(volume.dims, (1.0, 0.0, 0.0))
    inverse = FlowField.constant(volume.dims, (-1.0, 0.0, 0.0))
    back = warp(warp(volume, forward), inverse)
    assert torch.equal(back.data[1:-1], volume.data[1:-1])


def test_segmentation_round_trip_uses_dice():
    labels = torch.randint(0, 3, (6, 6, 6), generator=torch.Generator().manual_seed(4))
    zero = FlowField.zeros((6, 6, 6))
    result = compose_roundtrip(one_hot(labels, 3), zero, zero)
    assert result.metric == "dice"
    assert result.value == pytest.approx(1.0)


def _smooth_flow(dims, amplitude, seed):
    gen = torch.Generator().manual_seed(seed)
    control = torch.randn(1, 3, 3, 3, 3, generator=gen, dtype=torch.float64)
    flow = F.interpolate(control, size=dims, mode="trilinear", align_corners=True)[0]
    flow = amplitude * flow / flow.abs().max()
    taper = torch.ones(dims, dtype=torch.float64)
    for axis, n in enumerate(dims):
        shape = [1, 1, 1]
        shape[axis] = n
        taper = taper * torch.sin(torch.linspace(0, math.pi, n, dtype=torch.float64)).view(shape)
    return FlowField((flow * taper).float())


def test_fixed_point_inverse_reconstructs_a_phantom():
    spec = PhantomSpec(n_subjects=2, dims=(16, 16, 16), classes=3, shell_radii=(0.5, 1.0), noise_sigma=0.0)
    volume = pad_to(synthesize_subject(spec, subject_seed=11).scans[0].volume, (16, 16, 16))
    forward = _smooth_flow((16, 16, 16), amplitude=0.5, seed=8)
    result = compose_roundtrip(volume, forward, invert_flow(forward))
    assert result.value >= 0.98
