# Trilinear grid sampling of volumes, soft segmentations and flows by a
# displacement field. The deformed grid is d = b + f (voxel units) and each
# output voxel is the hat-weighted sum of the 8 input voxels around d:
#
#   out[p] = sum_{q in corners(d)} x[q] * prod_a max(0, 1 - |d_a - q_a|)
#
# Corners outside the grid contribute zero. The backward pass is written out
# analytically with the right derivative of the hat: -1 for s in [0, 1), +1 for
# s in [-1, 0) and 0 elsewhere.

import contextlib
import functools
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch

from .errors import DimensionMismatchError, NonFiniteError
from .similarity import ms_ssim, soft_dice
from .volume import Dims, FlowField, SegMap, Volume

logger = logging.getLogger(__name__)

_OFFSETS = tuple(itertools.product((0, 1), repeat=3))


@functools.lru_cache(maxsize=16)
def _base_grid(dims: Dims, dtype: torch.dtype, device: str) -> torch.Tensor:
    axes = [torch.arange(n, dtype=dtype, device=device) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def base_grid(dims: Sequence[int], dtype: torch.dtype = torch.float32, device="cpu") -> torch.Tensor:
    """Voxel coordinates b of shape (3, H, W, D)."""
    return _base_grid(tuple(int(d) for d in dims), dtype, str(device))


@dataclass(frozen=True)
class DeformedGrid:
    """Sampling locations d = b + f of a flow field."""
    dims: Dims
    coordinates: torch.Tensor

    @classmethod
    def from_flow(cls, flow: FlowField) -> "DeformedGrid":
        b = base_grid(flow.dims, flow.vectors.dtype, flow.vectors.device)
        return cls(flow.dims, b + flow.vectors)


def _hat(s: torch.Tensor) -> torch.Tensor:
    return torch.clamp(1 - s.abs(), min=0)


def _hat_slope(s: torch.Tensor) -> torch.Tensor:
    # right derivative; support is [-1, 1)
    slope = torch.where(s >= 0, -torch.ones_like(s), torch.ones_like(s))
    return torch.where((s < -1) | (s >= 1), torch.zeros_like(s), slope)


def _corners(flow: torch.Tensor):
    """Yield (linear index, inside mask, per-axis offsets s) for the 8 corners of every sample."""
    batch, _, h, w, d = flow.shape
    dims = (h, w, d)
    coords = (base_grid(dims, flow.dtype, flow.device).unsqueeze(0) + flow).reshape(batch, 3, -1)
    lower = torch.floor(coords)
    for offset in _OFFSETS:
        corner = lower + torch.tensor(offset, dtype=flow.dtype, device=flow.device).view(1, 3, 1)
        s = coords - corner
        index = corner.long()
        inside = torch.ones_like(index[:, 0], dtype=torch.bool)
        for axis in range(3):
            inside &= (index[:, axis] >= 0) & (index[:, axis] < dims[axis])
            index[:, axis].clamp_(0, dims[axis] - 1)
        linear = (index[:, 0] * w + index[:, 1]) * d + index[:, 2]
        yield linear, inside, s


def _sample(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    batch, channels = source.shape[:2]
    flat = source.reshape(batch, channels, -1)
    out = torch.zeros_like(flat)
    for linear, inside, s in _corners(flow):
        weight = _hat(s[:, 0]) * _hat(s[:, 1]) * _hat(s[:, 2]) * inside
        values = flat.gather(2, linear.unsqueeze(1).expand(-1, channels, -1))
        out += values * weight.unsqueeze(1)
    return out.view_as(source)


def _gradients(
    source: torch.Tensor,
    flow: torch.Tensor,
    upstream: torch.Tensor,
    need_source: bool = True,
    need_flow: bool = True,
) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    batch, channels = source.shape[:2]
    flat = source.reshape(batch, channels, -1)
    up = upstream.reshape(batch, channels, -1)
    grad_source = torch.zeros_like(flat) if need_source else None
    grad_flow = torch.zeros(batch, 3, flat.shape[-1], dtype=flow.dtype, device=flow.device) if need_flow else None
    for linear, inside, s in _corners(flow):
        hats = [_hat(s[:, axis]) for axis in range(3)]
        index = linear.unsqueeze(1).expand(-1, channels, -1)
        if need_source:
            weight = hats[0] * hats[1] * hats[2] * inside
            grad_source.scatter_add_(2, index, up * weight.unsqueeze(1))
        if need_flow:
            projected = (up * flat.gather(2, index)).sum(dim=1) * inside
            grad_flow[:, 0] += projected * _hat_slope(s[:, 0]) * hats[1] * hats[2]
            grad_flow[:, 1] += projected * hats[0] * _hat_slope(s[:, 1]) * hats[2]
            grad_flow[:, 2] += projected * hats[0] * hats[1] * _hat_slope(s[:, 2])
    if need_source:
        grad_source = grad_source.view_as(source)
    if need_flow:
        grad_flow = grad_flow.view_as(flow)
    return grad_source, grad_flow


class TrilinearWarp(torch.autograd.Function):
    """Autograd wrapper around the sampler with its analytical derivatives."""

    @staticmethod
    def forward(ctx, source, flow):
        ctx.save_for_backward(source, flow)
        return _sample(source, flow)

    @staticmethod
    def backward(ctx, grad_output):
        source, flow = ctx.saved_tensors
        need_source, need_flow = ctx.needs_input_grad
        return _gradients(source, flow, grad_output.contiguous(), need_source, need_flow)


def _validate(source: torch.Tensor, flow: torch.Tensor) -> None:
    if source.dim() != 5 or flow.dim() != 5 or flow.shape[1] != 3:
        raise DimensionMismatchError(
            f"expected source (B, C, H, W, D) and flow (B, 3, H, W, D), got {tuple(source.shape)} and {tuple(flow.shape)}"
        )
    if source.shape[0] != flow.shape[0] or source.shape[2:] != flow.shape[2:]:
        raise DimensionMismatchError(f"source {tuple(source.shape)} and flow {tuple(flow.shape)} disagree")
    if not torch.isfinite(flow.detach()).all():
        raise NonFiniteError("flow field contains NaN or Inf")


def warp_tensor(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Batched warp: source (B, C, H, W, D), flow (B, 3, H, W, D); every channel uses the same flow."""
    _validate(source, flow)
    if flow.dtype != source.dtype:
        flow = flow.to(source.dtype)
    return TrilinearWarp.apply(source.contiguous(), flow.contiguous())


def _as_batch(obj) -> torch.Tensor:
    if isinstance(obj, Volume):
        return obj.data.unsqueeze(0).unsqueeze(0)
    if isinstance(obj, SegMap):
        return obj.soft.unsqueeze(0)
    if isinstance(obj, FlowField):
        return obj.vectors.unsqueeze(0)
    if isinstance(obj, torch.Tensor):
        return obj
    raise TypeError(f"cannot warp {type(obj).__name__}")


def _like(obj, batch: torch.Tensor):
    if isinstance(obj, Volume):
        return Volume(batch[0, 0])
    if isinstance(obj, SegMap):
        return SegMap(batch[0])
    if isinstance(obj, FlowField):
        return FlowField(batch[0])
    return batch


def warp(source: Union[Volume, SegMap, FlowField, torch.Tensor], flow: Union[FlowField, torch.Tensor]):
    """Deform `source` by `flow`, returning the same kind of container."""
    grad_mode = contextlib.nullcontext() if isinstance(source, torch.Tensor) else torch.no_grad()
    with grad_mode:
        out = warp_tensor(_as_batch(source), _as_batch(flow))
    return _like(source, out)


def warp_backward(
    source: Union[Volume, SegMap, torch.Tensor],
    flow: Union[FlowField, torch.Tensor],
    upstream: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gradients of <upstream, warp(source, flow)> with respect to source and flow."""
    src, fl = _as_batch(source), _as_batch(flow)
    _validate(src, fl)
    up = upstream.reshape(src.shape).to(src.dtype)
    grad_source, grad_flow = _gradients(src.contiguous(), fl.to(src.dtype).contiguous(), up.contiguous())
    if not isinstance(source, torch.Tensor):
        grad_source = grad_source[0]
        grad_flow = grad_flow[0]
        if isinstance(source, Volume):
            grad_source = grad_source[0]
    return grad_source, grad_flow


def invert_flow(flow: FlowField, iterations: int = 20) -> FlowField:
    """Numerical inverse by the fixed point g <- -f(p + g(p)), starting from g = -f."""
    f = _as_batch(flow)
    g = -f
    with torch.no_grad():
        for _ in range(iterations):
            g = -warp_tensor(f, g)
    return FlowField(g[0])


@dataclass(frozen=True)
class RoundTrip:
    reconstruction: Union[Volume, SegMap]
    metric: str
    value: float


def compose_roundtrip(
    source: Union[Volume, SegMap],
    forward_flow: FlowField,
    inverse_flow: FlowField,
    scales: int = 3,
) -> RoundTrip:
    """warp(warp(source, f), f_inv) with MS-SSIM (images) or soft Dice (segmentations) against the source."""
    if forward_flow.dims != inverse_flow.dims:
        raise DimensionMismatchError(f"forward {forward_flow.dims} and inverse {inverse_flow.dims} flows disagree")
    reconstruction = warp(warp(source, forward_flow), inverse_flow)
    with torch.no_grad():
        if isinstance(source, Volume):
            value = ms_ssim(_as_batch(source), _as_batch(reconstruction), scales=scales)
            return RoundTrip(reconstruction, "ms_ssim", float(value))
        value = soft_dice(_as_batch(reconstruction), _as_batch(source)).mean()
        return RoundTrip(reconstruction, "dice", float(value))
