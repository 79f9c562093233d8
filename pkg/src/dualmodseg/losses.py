"""The full training objective.

Supervised part: cross-entropy + soft Dice per branch against the shared
ground truth. Unsupervised part: each branch's detached soft prediction is
the regression target for the other branch (squared error, stop-gradient).
Total = supervised sum + alpha * consistency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .data_model import SegMask
from .network import ShapeError

DICE_EPSILON = 1e-5
LOG_CLAMP = 1e-7

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossBundle:
    """Scalar loss components; fields may be live tensors or plain floats."""

    ce_a: Scalar
    ce_b: Scalar
    dice_a: Scalar
    dice_b: Scalar
    consistency: Scalar = 0.0
    alpha: float = 0.0
    total: Scalar = 0.0

    @property
    def supervised_sum(self) -> Scalar:
        return self.ce_a + self.ce_b + self.dice_a + self.dice_b

    def item(self) -> "LossBundle":
        """Float-valued copy for logging."""
        return LossBundle(*(_to_float(getattr(self, f)) for f in
                            ("ce_a", "ce_b", "dice_a", "dice_b", "consistency", "alpha", "total")))

    def is_finite(self) -> bool:
        return all(
            math.isfinite(_to_float(getattr(self, f)))
            for f in ("ce_a", "ce_b", "dice_a", "dice_b", "consistency", "total")
        )


def _to_float(value: Scalar) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


@dataclass(frozen=True)
class PseudoLabelPair:
    """Detached soft predictions; no gradient linkage to the producing network."""

    pl_a: torch.Tensor
    pl_b: torch.Tensor


def _as_target(target, probs: torch.Tensor) -> torch.Tensor:
    if isinstance(target, SegMask):
        target = target.labels
    if isinstance(target, torch.Tensor):
        return target.long()
    arr = np.asarray(target)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr).to(device=probs.device).long()


def _check_prob_target(probs: torch.Tensor, target: torch.Tensor):
    if probs.dim() != target.dim() + 1:
        raise ShapeError(
            f"probs must have one leading class axis over target: "
            f"{tuple(probs.shape)} vs {tuple(target.shape)}"
        )
    if probs.shape[-3:] != target.shape[-3:] or probs.shape[:-4] != target.shape[:-3]:
        raise ShapeError(f"probs {tuple(probs.shape)} do not align with target {tuple(target.shape)}")


def dice_loss(probs: torch.Tensor, target, epsilon: float = DICE_EPSILON) -> torch.Tensor:
    """1 - mean over classes of the smoothed soft Dice coefficient.

    Accepts (C, D, H, W) probs with (D, H, W) targets, or a batched pair;
    batched inputs are averaged per sample.
    """
    target = _as_target(target, probs)
    _check_prob_target(probs, target)
    if probs.dim() == 5:
        return torch.stack(
            [dice_loss(p, t, epsilon) for p, t in zip(probs, target)]
        ).mean()
    num_classes = probs.shape[0]
    onehot = torch.nn.functional.one_hot(target, num_classes)
    onehot = onehot.permute(3, 0, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(1, 2, 3))
    sums = probs.sum(dim=(1, 2, 3)) + onehot.sum(dim=(1, 2, 3))
    dice = (2.0 * inter + epsilon) / (sums + epsilon)
    return 1.0 - dice.mean()


def ce_loss(probs: torch.Tensor, target) -> torch.Tensor:
    """Mean over voxels of -log p[target class], probabilities clamped at 1e-7."""
    target = _as_target(target, probs)
    _check_prob_target(probs, target)
    if probs.dim() == 5:
        return torch.stack([ce_loss(p, t) for p, t in zip(probs, target)]).mean()
    picked = probs.gather(0, target.unsqueeze(0)).squeeze(0)
    return -torch.log(picked.clamp(LOG_CLAMP, 1.0)).mean()


def supervised_loss(
    prob_a: torch.Tensor, prob_b: torch.Tensor, target, dice_epsilon: float = DICE_EPSILON
) -> LossBundle:
    """Per-branch CE + Dice against the shared ground truth (batch mean).

    Returns a partial bundle (consistency and alpha zero).
    """
    if target is None:
        raise ValueError("supervised loss requires a ground-truth mask")
    parts = LossBundle(
        ce_a=ce_loss(prob_a, target),
        ce_b=ce_loss(prob_b, target),
        dice_a=dice_loss(prob_a, target, dice_epsilon),
        dice_b=dice_loss(prob_b, target, dice_epsilon),
    )
    return LossBundle(
        parts.ce_a, parts.ce_b, parts.dice_a, parts.dice_b, total=parts.supervised_sum
    )


def make_pseudo_labels(prob_a: torch.Tensor, prob_b: torch.Tensor) -> PseudoLabelPair:
    """Copy soft predictions and sever them from the gradient graph."""
    return PseudoLabelPair(pl_a=prob_a.detach().clone(), pl_b=prob_b.detach().clone())


def consistency_loss(
    prob_a: torch.Tensor, prob_b: torch.Tensor, pl: PseudoLabelPair
) -> torch.Tensor:
    """Cross-modal mutual regression: each live prediction chases the other
    branch's detached pseudo-label. Mean over both terms' squared differences."""
    if prob_a.shape != pl.pl_b.shape or prob_b.shape != pl.pl_a.shape:
        raise ShapeError("prediction/pseudo-label shapes differ")
    sq = torch.stack([(prob_a - pl.pl_b) ** 2, (prob_b - pl.pl_a) ** 2])
    return sq.mean()


def total_loss(sup: LossBundle, cons: Scalar, alpha: float) -> LossBundle:
    """Combine supervised and consistency parts: total = sup + alpha * cons."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    bundle = LossBundle(
        ce_a=sup.ce_a,
        ce_b=sup.ce_b,
        dice_a=sup.dice_a,
        dice_b=sup.dice_b,
        consistency=cons,
        alpha=float(alpha),
        total=sup.supervised_sum + alpha * cons,
    )
    for name in ("ce_a", "ce_b", "dice_a", "dice_b", "consistency"):
        val = _to_float(getattr(bundle, name))
        if not math.isfinite(val) or val < -1e-9:
            raise ValueError(f"loss component {name} = {val} is negative or non-finite")
    return bundle


def alpha_at(iteration: int, alpha: float, rampup_iters: int = 0) -> float:
    """Constraint weight at an iteration; optional sigmoid ramp-up, off by default."""
    if rampup_iters <= 0:
        return alpha
    t = min(max(iteration / rampup_iters, 0.0), 1.0)
    return alpha * math.exp(-5.0 * (1.0 - t) ** 2)
