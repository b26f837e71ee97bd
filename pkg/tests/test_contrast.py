from __future__ import annotations

from collections import deque
import math

from hypothesis import given, settings
from hypothesis import strategies as st
import pytest
import torch

from savc.core.errors import InvalidConfigError, InvalidInputError
from savc.services.contrast import (
    ContrastBatch,
    ContrastQueue,
    candidate_set,
    scl_loss,
    supervised_contrastive_loss,
)


def _unit(rows: int, dim: int, generator: torch.Generator, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    vectors = torch.randn(rows, dim, generator=generator, dtype=dtype)
    return vectors / vectors.norm(dim=1, keepdim=True)


def _naive_loss(q, k, labels, queue_features, queue_labels, tau) -> float:
    total = 0.0
    for i in range(len(q)):
        candidates = [k[i]] + list(queue_features)
        candidate_labels = [int(labels[i])] + [int(label) for label in queue_labels]
        logits = [float(q[i] @ candidate) / tau for candidate in candidates]
        denominator = sum(math.exp(value) for value in logits)
        positives = [index for index, label in enumerate(candidate_labels) if label == int(labels[i])]
        total += -sum(math.log(math.exp(logits[p]) / denominator) for p in positives) / len(positives)
    return total / len(q)


def _instance(seed: int):
    generator = torch.Generator().manual_seed(seed)
    dim = int(torch.randint(2, 9, (), generator=generator))
    batch = int(torch.randint(1, 9, (), generator=generator))
    fill = int(torch.randint(0, 65, (), generator=generator))
    q = _unit(batch, dim, generator)
    k = _unit(batch, dim, generator)
    labels = torch.randint(0, 4, (batch,), generator=generator)
    queue_features = _unit(fill, dim, generator)
    queue_labels = torch.randint(0, 4, (fill,), generator=generator)
    return q, k, labels, queue_features, queue_labels


@pytest.mark.parametrize("tau", [0.07, 0.5, 1.0])
def test_loss_matches_naive_double_loop(tau: float) -> None:
    for seed in range(67):
        q, k, labels, queue_features, queue_labels = _instance(seed)
        loss = supervised_contrastive_loss(q, k, labels, queue_features, queue_labels, tau)
        expected = _naive_loss(q, k, labels, queue_features, queue_labels, tau)
        assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_single_negative_hand_example() -> None:
    q = torch.tensor([[1.0, 0.0]])
    k = torch.tensor([[1.0, 0.0]])
    loss = supervised_contrastive_loss(q, k, torch.tensor([0]), torch.tensor([[0.0, 1.0]]), torch.tensor([1]), 1.0)
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)
    assert float(loss) == pytest.approx(0.3133, abs=1e-4)


def test_queue_positive_is_averaged_with_own_key() -> None:
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    loss = supervised_contrastive_loss(
        q, q.clone(), torch.tensor([0]), torch.tensor([[0.0, 1.0]], dtype=torch.float64), torch.tensor([0]), 1.0
    )
    assert float(loss) == pytest.approx(math.log(math.e + 1) - 0.5, abs=1e-12)


def test_empty_queue_gives_zero_loss() -> None:
    generator = torch.Generator().manual_seed(0)
    q = _unit(4, 3, generator)
    loss = supervised_contrastive_loss(q, _unit(4, 3, generator), torch.arange(4), torch.zeros(0, 3), torch.zeros(0, dtype=torch.long), 0.1)
    assert float(loss) == 0.0


@pytest.mark.parametrize("tau", [0.07, 0.5, 2.0])
def test_uniform_similarities_give_log_candidate_count(tau: float) -> None:
    q = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    k = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    queue_features = torch.tensor([[0.0, 0.0, 1.0]] * 5 + [[0.0, 1.0, 0.0]] * 4, dtype=torch.float64)
    queue_labels = torch.tensor([0, 1, 2, 0, 3, 1, 1, 0, 2])
    loss = supervised_contrastive_loss(q, k, torch.tensor([0]), queue_features, queue_labels, tau)
    assert abs(float(loss) - math.log(10)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(min_value=0, max_value=100_000))
def test_loss_is_non_negative_and_queue_order_invariant(seed: int) -> None:
    q, k, labels, queue_features, queue_labels = _instance(seed)
    loss = supervised_contrastive_loss(q, k, labels, queue_features, queue_labels, 0.2)
    order = torch.randperm(len(queue_labels), generator=torch.Generator().manual_seed(seed))
    shuffled = supervised_contrastive_loss(q, k, labels, queue_features[order], queue_labels[order], 0.2)
    assert float(loss) >= 0.0
    assert float(shuffled) == pytest.approx(float(loss), abs=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_gradient_with_respect_to_queries(seed: int) -> None:
    q, k, labels, queue_features, queue_labels = _instance(seed)
    q = q.clone().requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda queries: supervised_contrastive_loss(queries, k, labels, queue_features, queue_labels, 0.5),
        (q,),
        eps=1e-6,
        atol=1e-8,
        rtol=1e-4,
    )


def test_loss_rejects_bad_arguments() -> None:
    q = torch.tensor([[1.0, 0.0]])
    with pytest.raises(InvalidConfigError):
        supervised_contrastive_loss(q, q, torch.tensor([0]), torch.zeros(0, 2), torch.zeros(0, dtype=torch.long), 0.0)
    with pytest.raises(InvalidInputError):
        supervised_contrastive_loss(
            q[:0], q[:0], torch.zeros(0, dtype=torch.long), torch.zeros(0, 2), torch.zeros(0, dtype=torch.long), 0.1
        )


def test_contrast_batch_validation() -> None:
    unit = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(InvalidConfigError):
        ContrastBatch(unit, unit, torch.tensor([0, 1]), tau=0.0)
    with pytest.raises(InvalidInputError):
        ContrastBatch(unit, unit * 2.0, torch.tensor([0, 1]), tau=0.1)
    with pytest.raises(InvalidInputError):
        ContrastBatch(unit, unit[:1], torch.tensor([0, 1]), tau=0.1)
    with pytest.raises(InvalidInputError):
        ContrastBatch(unit, unit, torch.tensor([0]), tau=0.1)


def test_scl_loss_reads_the_queue() -> None:
    queue = ContrastQueue(4, 2)
    queue.enqueue(torch.tensor([[0.0, 1.0]]), torch.tensor([1]))
    batch = ContrastBatch(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 0.0]]), torch.tensor([0]), tau=1.0)
    assert float(scl_loss(batch, queue)) == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-6)


def test_queue_fifo_matches_reference() -> None:
    generator = torch.Generator().manual_seed(3)
    queue = ContrastQueue(16, 3)
    reference: deque[tuple[tuple[float, ...], int]] = deque(maxlen=16)
    next_label = 0
    for _ in range(100):
        count = int(torch.randint(0, 7, (), generator=generator))
        keys = _unit(count, 3, generator, dtype=torch.float32)
        labels = torch.arange(next_label, next_label + count)
        next_label += count
        queue.enqueue(keys, labels)
        reference.extend((tuple(key.tolist()), int(label)) for key, label in zip(keys, labels))

        features, stored_labels = queue.chronological()
        assert len(queue) == len(reference)
        assert stored_labels.tolist() == [label for _, label in reference]
        assert torch.equal(features, torch.tensor([key for key, _ in reference], dtype=torch.float32).reshape(-1, 3))


def test_queue_wraps_and_reports_fill() -> None:
    queue = ContrastQueue(4, 2)
    keys = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    queue.enqueue(keys, torch.tensor([0, 1, 2]))
    assert len(queue) == 3 and not queue.is_full
    queue.enqueue(keys, torch.tensor([3, 4, 5]))
    assert queue.is_full
    assert queue.ptr == 2
    assert queue.chronological()[1].tolist() == [2, 3, 4, 5]
    assert queue.contents()[1].tolist() == [4, 5, 2, 3]


def test_queue_rejects_invalid_batches() -> None:
    queue = ContrastQueue(2, 2)
    with pytest.raises(InvalidConfigError):
        queue.enqueue(torch.tensor([[1.0, 0.0]] * 3), torch.tensor([0, 1, 2]))
    with pytest.raises(InvalidInputError):
        queue.enqueue(torch.tensor([[2.0, 0.0]]), torch.tensor([0]))
    with pytest.raises(InvalidInputError):
        queue.enqueue(torch.tensor([[1.0, 0.0, 0.0]]), torch.tensor([0]))
    with pytest.raises(InvalidInputError):
        queue.enqueue(torch.tensor([[1.0, 0.0]]), torch.tensor([0, 1]))
    queue.enqueue(torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))
    assert len(queue) == 0
    with pytest.raises(InvalidConfigError):
        ContrastQueue(0, 2)


def test_queue_state_survives_a_checkpoint() -> None:
    queue = ContrastQueue(3, 2)
    queue.enqueue(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([5, 6]))
    restored = ContrastQueue.from_state_dict(queue.state_dict())
    assert restored.ptr == queue.ptr and len(restored) == 2
    assert torch.equal(restored.contents()[0], queue.contents()[0])
    with pytest.raises(InvalidConfigError):
        ContrastQueue(4, 2).load_state_dict(queue.state_dict())


def test_candidate_set_prepends_own_key() -> None:
    queue = ContrastQueue(4, 2)
    queue.enqueue(torch.tensor([[0.0, 1.0]]), torch.tensor([3]))
    features, labels = candidate_set(queue, torch.tensor([1.0, 0.0]), 7)
    assert labels.tolist() == [7, 3]
    assert torch.equal(features[0], torch.tensor([1.0, 0.0]))
    with pytest.raises(InvalidInputError):
        candidate_set(queue, torch.tensor([3.0, 0.0]), 7)
