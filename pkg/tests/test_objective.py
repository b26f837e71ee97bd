from __future__ import annotations

import math

import pytest
import torch

from savc.core.errors import InvalidInputError, TrainingDivergenceError
from savc.schemas.experiment import LossWeights
from savc.services.objective import breakdown, ce_fantasy_loss, total_loss


def _naive_ce(logits: torch.Tensor, labels: torch.Tensor) -> float:
    fantasy_size, batch_size, _ = logits.shape
    total = 0.0
    for m in range(fantasy_size):
        for b in range(batch_size):
            row = [float(value) for value in logits[m, b]]
            denominator = sum(math.exp(value) for value in row)
            total += -math.log(math.exp(row[int(labels[m, b])]) / denominator) / batch_size
    return total / fantasy_size


def test_ce_matches_naive_softmax_reference() -> None:
    generator = torch.Generator().manual_seed(0)
    classes, fantasy_size, batch_size = 3, 2, 4
    logits = torch.randn(fantasy_size, batch_size, classes * fantasy_size, generator=generator, dtype=torch.float64)
    real = torch.randint(0, classes, (batch_size,), generator=generator)
    labels = real.unsqueeze(0) * fantasy_size + torch.arange(fantasy_size).unsqueeze(1)
    assert float(ce_fantasy_loss(logits, labels)) == pytest.approx(_naive_ce(logits, labels), abs=1e-6)


def test_uniform_logits_give_log_of_virtual_class_count() -> None:
    logits = torch.zeros(4, 5, 12, dtype=torch.float64)
    labels = torch.randint(0, 12, (4, 5), generator=torch.Generator().manual_seed(1))
    assert abs(float(ce_fantasy_loss(logits, labels)) - math.log(12)) < 1e-9


@pytest.mark.parametrize("seed", range(50))
def test_ce_gradient_with_respect_to_logits(seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 3, 6, generator=generator, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 6, (2, 3), generator=generator)
    assert torch.autograd.gradcheck(
        lambda values: ce_fantasy_loss(values, labels), (logits,), eps=1e-6, atol=1e-8, rtol=1e-4
    )


def test_confident_correct_logits_drive_ce_to_zero() -> None:
    fantasy_size, batch_size, classes = 2, 3, 4
    labels = torch.randint(0, classes * fantasy_size, (fantasy_size, batch_size), generator=torch.Generator().manual_seed(3))
    one_hot = torch.nn.functional.one_hot(labels, classes * fantasy_size).to(torch.float64)
    losses = [float(ce_fantasy_loss(margin * one_hot, labels)) for margin in (1.0, 10.0, 100.0, 1000.0)]
    assert losses == sorted(losses, reverse=True)
    assert losses[-1] < 1e-12


def test_ce_rejects_mismatched_shapes_and_labels() -> None:
    with pytest.raises(InvalidInputError):
        ce_fantasy_loss(torch.zeros(4, 6), torch.zeros(4, dtype=torch.long))
    with pytest.raises(InvalidInputError):
        ce_fantasy_loss(torch.zeros(2, 3, 6), torch.zeros(3, 2, dtype=torch.long))
    with pytest.raises(InvalidInputError) as excinfo:
        ce_fantasy_loss(torch.zeros(2, 3, 6), torch.full((2, 3), 6))
    assert excinfo.value.details == {"min": 6, "max": 6}


def test_total_loss_weights_the_contrastive_terms() -> None:
    weights = LossWeights(alpha=0.2, beta=0.8)
    total = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), weights)
    assert float(total) == pytest.approx(1.0 + 0.4 + 2.4)


def test_total_loss_with_default_weights() -> None:
    total = total_loss(torch.tensor(1.0), torch.tensor(0.5), torch.tensor(0.25), LossWeights(alpha=0.2, beta=0.8))
    assert float(total) == pytest.approx(1.3)


def test_total_loss_is_linear_along_a_line_of_weights() -> None:
    cls, cont_global, cont_local = torch.tensor(1.0), torch.tensor(0.5), torch.tensor(0.25)
    points = [(0.1, 0.3), (0.2, 0.5), (0.3, 0.7)]
    totals = [float(total_loss(cls, cont_global, cont_local, LossWeights(alpha=a, beta=b))) for a, b in points]
    step = 0.1 * 0.5 + 0.2 * 0.25
    assert totals[1] - totals[0] == pytest.approx(step)
    assert totals[2] - totals[1] == pytest.approx(step)
    assert totals[0] == pytest.approx(1.0 + 0.1 * 0.5 + 0.3 * 0.25)

    alpha_only = [float(total_loss(cls, cont_global, cont_local, LossWeights(alpha=a, beta=0.0))) for a in (0.0, 0.5, 1.0)]
    assert alpha_only[2] - alpha_only[0] == pytest.approx(2 * (alpha_only[1] - alpha_only[0]))
    assert alpha_only[1] - alpha_only[0] == pytest.approx(0.5 * 0.5)
    beta_only = [float(total_loss(cls, cont_global, cont_local, LossWeights(alpha=0.0, beta=b))) for b in (0.0, 0.5, 1.0)]
    assert beta_only[2] - beta_only[0] == pytest.approx(2 * (beta_only[1] - beta_only[0]))
    assert beta_only[1] - beta_only[0] == pytest.approx(0.5 * 0.25)


def test_total_loss_with_contrast_disabled_is_the_classification_loss() -> None:
    cls = torch.tensor(0.7)
    total = total_loss(cls, 0.0, 0.0, LossWeights(alpha=0.0, beta=0.0))
    assert float(total) == pytest.approx(0.7)


def test_non_finite_losses_raise_divergence() -> None:
    with pytest.raises(TrainingDivergenceError) as excinfo:
        total_loss(torch.tensor(1.0), torch.tensor(float("nan")), 0.0, LossWeights(), step=12)
    assert excinfo.value.step == 12
    assert excinfo.value.details == {"step": 12}
    with pytest.raises(TrainingDivergenceError):
        total_loss(torch.tensor(float("inf")), 0.0, 0.0, LossWeights())


def test_breakdown_reports_plain_floats() -> None:
    losses = breakdown(torch.tensor(1.5), 0.0, torch.tensor(0.25), torch.tensor(1.7))
    assert losses.as_dict() == {"cls": 1.5, "cont_global": 0.0, "cont_local": 0.25, "total": pytest.approx(1.7)}
