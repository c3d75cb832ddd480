# Terms of the training objective:
#
#   total = seg + l1 * adv + l2 * inv + l3 * smt - l4 * div
#
# The diversity term is maximized by the generator, so it enters with a minus
# sign. The adversarial min/max is split into a discriminator objective and a
# generator term; the trainer alternates the two updates.

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import torch

from .constants import Defaults
from .errors import DimensionMismatchError
from .settings import LossWeights
from .similarity import DICE_SMOOTH, ms_ssim, soft_dice
from .warp import warp_tensor

logger = logging.getLogger(__name__)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - class-averaged soft Dice, averaged over the batch."""
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"dice_loss needs equal shapes/classes, got {tuple(pred.shape)} and {tuple(target.shape)}")
    return 1 - soft_dice(pred, target, smooth).mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """1 - MS-SSIM, clamped into [0, 1] and averaged over the batch."""
    return torch.clamp(1 - ms_ssim(x, y, scales=scales), 0.0, 1.0).mean()


def _clamp_probability(p: torch.Tensor) -> torch.Tensor:
    eps = Defaults.PROBABILITY_CLAMP
    return torch.clamp(p, eps, 1 - eps)


def pair_log_likelihood(probability: torch.Tensor, same: torch.Tensor) -> torch.Tensor:
    """s log D + (1 - s) log(1 - D) per pair."""
    p = _clamp_probability(probability)
    return same * torch.log(p) + (1 - same) * torch.log(1 - p)


@dataclass
class AdversarialTerms:
    discriminator_loss: torch.Tensor
    generator_term: torch.Tensor
    real_term: torch.Tensor


def adversarial_loss(
    discriminator: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    real_a: torch.Tensor,
    real_b: torch.Tensor,
    labels: torch.Tensor,
    deformed: torch.Tensor,
    reconstructed: torch.Tensor,
) -> AdversarialTerms:
    """Split the identity-obfuscation objective into the D loss (negated) and G's term.

    The real pairs carry same-subject labels; the generated pair is (deformed
    prediction, its reconstruction). D maximizes the real cross-entropy plus
    log(1 - D(generated)); G minimizes log(1 - D(generated)).
    """
    labels = labels.to(real_a.dtype).reshape(-1)
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("pair labels must be 0 or 1")
    real_term = pair_log_likelihood(discriminator(real_a, real_b).reshape(-1), labels).mean()
    generated = _clamp_probability(discriminator(deformed, reconstructed).reshape(-1))
    generator_term = torch.log(1 - generated).mean()
    return AdversarialTerms(
        discriminator_loss=-(real_term + generator_term),
        generator_term=generator_term,
        real_term=real_term,
    )


def jacobian(flow: torch.Tensor) -> torch.Tensor:
    """Forward-difference spatial Jacobian (B, 3, 3, H, W, D); the last slice repeats the last difference."""
    rows = []
    for axis in (2, 3, 4):
        diff = torch.diff(flow, dim=axis)
        edge = diff.narrow(axis, diff.shape[axis] - 1, 1) if diff.shape[axis] else torch.zeros_like(flow.narrow(axis, 0, 1))
        rows.append(torch.cat([diff, edge], dim=axis))
    return torch.stack(rows, dim=2)


def smoothness_loss(flow: torch.Tensor) -> torch.Tensor:
    """Mean over voxels (and batch) of the Frobenius norm of the flow Jacobian."""
    if flow.dim() != 5 or flow.shape[1] != 3:
        raise DimensionMismatchError(f"smoothness_loss expects (B, 3, H, W, D), got {tuple(flow.shape)}")
    jac = jacobian(flow).flatten(1, 2)
    return torch.linalg.vector_norm(jac, ord=2, dim=1).mean()


def invertibility_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    forward_flow: torch.Tensor,
    inverse_flow: torch.Tensor,
    deformed_x: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """ssim_loss(x, f_inv(f(x))) + dice_loss(f_inv(f(y)), y) on the ground truth."""
    if deformed_x is None:
        deformed_x = warp_tensor(x, forward_flow)
    x_back = warp_tensor(deformed_x, inverse_flow)
    y_back = warp_tensor(warp_tensor(y, forward_flow), inverse_flow)
    return ssim_loss(x, x_back) + dice_loss(y_back, y)


def diversity_from_flows(
    x: torch.Tensor, y: torch.Tensor, flow_a: torch.Tensor, flow_b: torch.Tensor
) -> torch.Tensor:
    """Dissimilarity of two deformations of the same image and segmentation."""
    return ssim_loss(warp_tensor(x, flow_a), warp_tensor(x, flow_b)) + dice_loss(
        warp_tensor(y, flow_a), warp_tensor(y, flow_b)
    )


def diversity_loss(generator, x: torch.Tensor, y: torch.Tensor, key: torch.Tensor, other_key: torch.Tensor) -> torch.Tensor:
    """Diversity between the deformations produced from keys k and k' (maximized by the generator)."""
    flow_a, _ = generator(x, key)
    flow_b, _ = generator(x, other_key)
    return diversity_from_flows(x, y, flow_a, flow_b)


@dataclass
class LossReport:
    """Per-term values of one minibatch and their weighted total."""
    seg: torch.Tensor
    adv: torch.Tensor
    inv: torch.Tensor
    smt: torch.Tensor
    div: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    TERMS = ("seg", "adv", "inv", "smt", "div", "total")

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in self.TERMS}

    def non_finite_term(self) -> Optional[str]:
        for name in self.TERMS:
            if not math.isfinite(float(getattr(self, name).detach())):
                return name
        return None


def _as_tensor(value, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    dtype = like.dtype if like is not None else torch.float64
    return torch.tensor(float(value), dtype=dtype)


def total_loss(seg, adv, inv, smt, div, weights: Optional[LossWeights] = None) -> LossReport:
    """Weighted combination; terms whose weight is zero are left out of the sum entirely."""
    weights = weights or LossWeights()
    seg = _as_tensor(seg)
    adv, inv, smt, div = (_as_tensor(t, seg) for t in (adv, inv, smt, div))
    total = seg
    for term, weight, sign in (
        (adv, weights.adversarial, 1.0),
        (inv, weights.invertibility, 1.0),
        (smt, weights.smoothness, 1.0),
        (div, weights.diversity, -1.0),
    ):
        if weight:
            total = total + sign * weight * term
    return LossReport(seg=seg, adv=adv, inv=inv, smt=smt, div=div, total=total, weights=weights)


def summarize(reports: Sequence[LossReport]) -> Dict[str, float]:
    """Mean of each term over a sequence of reports."""
    if not reports:
        return {name: float("nan") for name in LossReport.TERMS}
    rows = [r.as_floats() for r in reports]
    return {name: sum(row[name] for row in rows) / len(rows) for name in LossReport.TERMS}
