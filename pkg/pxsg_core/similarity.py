# Similarity kernels shared by the losses, the warp round trip and the
# re-identification attacker: 3-D SSIM / MS-SSIM with separable Gaussian
# windows, and soft Dice over class channels.

import logging
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .errors import DimensionMismatchError
from .volume import SegMap, Volume

logger = logging.getLogger(__name__)

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_WEIGHTS = (0.2, 0.3, 0.5)
DICE_SMOOTH = 1.0
_FLOOR = 1e-6


def _batched(x: Union[Volume, SegMap, torch.Tensor]) -> torch.Tensor:
    if isinstance(x, Volume):
        return x.data.unsqueeze(0).unsqueeze(0)
    if isinstance(x, SegMap):
        return x.soft.unsqueeze(0)
    if x.dim() == 3:
        return x.unsqueeze(0).unsqueeze(0)
    if x.dim() == 4:
        return x.unsqueeze(0)
    return x


def gaussian_window(size: int, sigma: float = SIGMA, dtype=torch.float32, device="cpu") -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def window_size(dims: Sequence[int], window: int = WINDOW) -> int:
    """Largest odd window not exceeding `window` nor the smallest axis."""
    size = min(window, min(dims))
    if size % 2 == 0:
        size -= 1
    return size


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    channels = x.shape[1]
    size = win.numel()
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = size
        kernel = win.view(shape).expand(channels, 1, *shape[2:]).contiguous()
        x = F.conv3d(x, kernel, groups=channels)
    return x


def _components(x: torch.Tensor, y: torch.Tensor, window: int, sigma: float, data_range: float):
    """Mean SSIM and contrast-structure term per (batch, channel)."""
    size = window_size(x.shape[2:], window)
    win = gaussian_window(size, sigma, x.dtype, x.device)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mu_x ** 2
    syy = _blur(y * y, win) - mu_y ** 2
    sxy = _blur(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return (luminance * cs_map).flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionMismatchError(f"similarity needs equal shapes, got {tuple(x.shape)} and {tuple(y.shape)}")


def ssim(x, y, window: int = WINDOW, sigma: float = SIGMA, data_range: float = 1.0) -> torch.Tensor:
    """Single-scale SSIM averaged over voxels and channels; one value per batch item."""
    x, y = _batched(x), _batched(y)
    _check_pair(x, y)
    if min(x.shape[2:]) < 1:
        raise DimensionMismatchError(f"empty grid {tuple(x.shape[2:])}")
    value, _ = _components(x, y, window, sigma, data_range)
    return value.mean(dim=1)


def minimum_extent(scales: int, smallest_window: int = 3) -> int:
    return smallest_window * 2 ** (scales - 1)


def ms_ssim(
    x,
    y,
    scales: int = len(MS_WEIGHTS),
    weights: Sequence[float] = None,
    window: int = WINDOW,
    sigma: float = SIGMA,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Multi-scale SSIM: contrast-structure at the fine scales, full SSIM at the coarsest, weighted product."""
    x, y = _batched(x), _batched(y)
    _check_pair(x, y)
    if weights is None:
        weights = MS_WEIGHTS if scales == len(MS_WEIGHTS) else (1.0 / scales,) * scales
    if len(weights) != scales:
        raise ValueError(f"{scales} scales need {scales} weights, got {len(weights)}")
    required = minimum_extent(scales)
    if min(x.shape[2:]) < required:
        raise DimensionMismatchError(
            f"grid {tuple(x.shape[2:])} too small for {scales} scales; every axis needs at least {required} voxels"
        )
    result = torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
    for level, weight in enumerate(weights):
        value, cs = _components(x, y, window, sigma, data_range)
        term = value if level == scales - 1 else cs
        result = result * torch.clamp(term, min=_FLOOR) ** weight
        if level < scales - 1:
            x = F.avg_pool3d(x, kernel_size=2, stride=2, ceil_mode=True)
            y = F.avg_pool3d(y, kernel_size=2, stride=2, ceil_mode=True)
    return result.mean(dim=1)


def soft_dice(pred, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Per-(batch, class) soft Dice similarity (2 sum(p t) + s) / (sum p + sum t + s)."""
    pred, target = _batched(pred), _batched(target)
    _check_pair(pred, target)
    dims = tuple(range(2, pred.dim()))
    intersection = (pred * target).sum(dim=dims)
    total = pred.sum(dim=dims) + target.sum(dim=dims)
    return (2 * intersection + smooth) / (total + smooth)


def dice_similarity(pred, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Class-averaged soft Dice; one value per batch item."""
    return soft_dice(pred, target, smooth).mean(dim=1)
