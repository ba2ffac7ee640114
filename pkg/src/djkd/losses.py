"""Hard (weight-balance) and soft (KL) segmentation losses.

All functions take per-pixel foreground probabilities of shape (B, 1, H, W)
and return differentiable scalars. Probabilities are clamped to
``[EPS_CLAMP, 1 - EPS_CLAMP]`` wherever their logarithm is taken; the overlap
losses (Dice, IoU) use them unclamped and rely on ``EPS_SMOOTH`` instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, StructuralError, ValidationError

EPS_CLAMP = 1e-7
EPS_SMOOTH = 1e-6


def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)


def _check_pair(q: torch.Tensor, y: torch.Tensor) -> None:
    if q.shape != y.shape:
        raise StructuralError(f"prediction {tuple(q.shape)} and target {tuple(y.shape)} differ in shape")


def _check_binary(y: torch.Tensor) -> None:
    if not torch.all((y == 0) | (y == 1)):
        raise ValidationError("target mask must contain only 0 and 1")


def _per_image(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1) if t.ndim > 1 else t.reshape(1, -1)


def cross_entropy(q: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all pixels."""
    _check_pair(q, y)
    _check_binary(y)
    q = clamp_probs(q)
    return -(y * torch.log(q) + (1 - y) * torch.log(1 - q)).mean()


def dice_loss(q: torch.Tensor, y: torch.Tensor, smooth: float = EPS_SMOOTH) -> torch.Tensor:
    """Two-class (foreground/background) squared-denominator Dice loss, w_k = 1/2.

    Computed per image and averaged over the batch.
    """
    _check_pair(q, y)
    q, y = _per_image(q), _per_image(y)
    total = 0.0
    for p, g in ((q, y), (1 - q, 1 - y)):
        num = 2 * (p * g).sum(dim=1)
        den = (p * p).sum(dim=1) + (g * g).sum(dim=1) + smooth
        total = total + 0.5 * num / den
    return (1 - total).mean()


def iou_loss(q: torch.Tensor, y: torch.Tensor, smooth: float = EPS_SMOOTH) -> torch.Tensor:
    """-ln of soft intersection over soft union, per image then batch mean."""
    _check_pair(q, y)
    q, y = _per_image(q), _per_image(y)
    inter = (q * y).sum(dim=1)
    union = q.sum(dim=1) + y.sum(dim=1) - inter
    return -torch.log((inter + smooth) / (union + smooth)).mean()


def weight_balance_terms(q: torch.Tensor, y: torch.Tensor) -> dict[str, torch.Tensor]:
    ce, dice, iou = cross_entropy(q, y), dice_loss(q, y), iou_loss(q, y)
    return {"ce": ce, "dice": dice, "iou": iou, "wb": 2 * ce + dice + iou}


def weight_balance_loss(q: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """2 x cross-entropy + Dice + IoU."""
    return weight_balance_terms(q, y)["wb"]


def soften(p: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature-scale a Bernoulli probability through its logit."""
    p = clamp_probs(p)
    if temperature == 1.0:
        return p
    return torch.sigmoid(torch.logit(p) / temperature)


def kl_divergence(p_teacher: torch.Tensor, q_student: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Mean per-pixel two-point KL(teacher || student); no gradient reaches the teacher."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    _check_pair(p_teacher, q_student)
    p = clamp_probs(soften(p_teacher.detach(), temperature))
    q = clamp_probs(soften(q_student, temperature))
    return (p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))).mean()


@dataclass(frozen=True)
class LossWeights:
    hard: float = 0.3
    benign: float = 0.5
    malignant: float = 0.2

    def __post_init__(self):
        if min(self.hard, self.benign, self.malignant) < 0:
            raise ConfigurationError(f"loss weights must be nonnegative: {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.hard, self.benign, self.malignant)


# A single teacher occupies the benign slot.
PRESETS = {
    "double_teacher": LossWeights(0.3, 0.5, 0.2),
    "single_teacher": LossWeights(0.3, 0.7, 0.0),
    "supervised": LossWeights(1.0, 0.0, 0.0),
}


def preset(name: str) -> LossWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown loss preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class PredictionBundle:
    student: torch.Tensor
    target: torch.Tensor
    benign: torch.Tensor | None = None
    malignant: torch.Tensor | None = None

    def __post_init__(self):
        for name in ("target", "benign", "malignant"):
            t = getattr(self, name)
            if t is not None and t.shape != self.student.shape:
                raise StructuralError(
                    f"{name} {tuple(t.shape)} does not match student {tuple(self.student.shape)}"
                )


def total_loss_terms(bundle: PredictionBundle, weights: LossWeights,
                     temperature: float = 1.0) -> dict[str, torch.Tensor]:
    """Components and weighted total; KL terms with zero weight are not evaluated."""
    if weights.benign > 0 and bundle.benign is None:
        raise ConfigurationError("benign weight > 0 but no benign teacher prediction was given")
    if weights.malignant > 0 and bundle.malignant is None:
        raise ConfigurationError("malignant weight > 0 but no malignant teacher prediction was given")
    terms = weight_balance_terms(bundle.student, bundle.target)
    zero = bundle.student.new_zeros(())
    kl_b = kl_divergence(bundle.benign, bundle.student, temperature) if weights.benign > 0 else zero
    kl_m = kl_divergence(bundle.malignant, bundle.student, temperature) if weights.malignant > 0 else zero
    total = weights.hard * terms["wb"]
    if weights.benign > 0:
        total = total + weights.benign * kl_b
    if weights.malignant > 0:
        total = total + weights.malignant * kl_m
    terms.update(kl_benign=kl_b, kl_malignant=kl_m, total=total)
    return terms


def total_loss(bundle: PredictionBundle, weights: LossWeights, temperature: float = 1.0) -> torch.Tensor:
    return total_loss_terms(bundle, weights, temperature)["total"]


def weights_sum_to_one(weights: LossWeights, tol: float = 1e-9) -> bool:
    return math.isclose(sum(weights.as_tuple()), 1.0, abs_tol=tol)
