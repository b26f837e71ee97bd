"""Classification over virtual classes and the combined training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import torch
import torch.nn.functional as F

from savc.core.errors import InvalidInputError, TrainingDivergenceError
from savc.schemas.experiment import LossWeights


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    cont_global: float
    cont_local: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def ce_fantasy_loss(logits: torch.Tensor, virtual_labels: torch.Tensor) -> torch.Tensor:
    """``(1/M) sum_m`` of the batch-mean cross-entropy for ``M x B x K`` logits."""
    if logits.ndim != 3:
        raise InvalidInputError(f"Expected M x B x K logits, got shape {tuple(logits.shape)}")
    if virtual_labels.shape != logits.shape[:2]:
        raise InvalidInputError(
            f"Labels of shape {tuple(virtual_labels.shape)} do not match logits {tuple(logits.shape[:2])}"
        )
    num_classes = logits.shape[-1]
    if virtual_labels.numel() and (int(virtual_labels.min()) < 0 or int(virtual_labels.max()) >= num_classes):
        raise InvalidInputError(
            f"Virtual labels must lie in [0, {num_classes})",
            details={"min": int(virtual_labels.min()), "max": int(virtual_labels.max())},
        )
    # Every variant has the same batch size, so the flat mean equals the mean of per-variant means.
    return F.cross_entropy(logits.reshape(-1, num_classes), virtual_labels.reshape(-1).long())


def total_loss(
    cls: torch.Tensor,
    cont_global: torch.Tensor | float,
    cont_local: torch.Tensor | float,
    weights: LossWeights,
    *,
    step: int | None = None,
) -> torch.Tensor:
    total = cls + weights.alpha * cont_global + weights.beta * cont_local
    for name, value in (("cls", cls), ("cont_global", cont_global), ("cont_local", cont_local), ("total", total)):
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise TrainingDivergenceError(f"Non-finite {name} loss ({scalar})", step=step)
    return total


def breakdown(
    cls: torch.Tensor,
    cont_global: torch.Tensor | float,
    cont_local: torch.Tensor | float,
    total: torch.Tensor,
) -> LossBreakdown:
    def _scalar(value: torch.Tensor | float) -> float:
        return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)

    return LossBreakdown(
        cls=_scalar(cls),
        cont_global=_scalar(cont_global),
        cont_local=_scalar(cont_local),
        total=_scalar(total),
    )
