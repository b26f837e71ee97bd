"""Key/label FIFO memory and the supervised contrastive loss over virtual labels."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Any

import torch

from savc.core.errors import InvalidConfigError, InvalidInputError

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-4
EMPTY_LABEL = -1


def _check_unit_norm(name: str, vectors: torch.Tensor) -> None:
    if vectors.numel() == 0:
        return
    norms = vectors.detach().norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=UNIT_NORM_TOLERANCE):
        worst = float((norms - 1.0).abs().max())
        raise InvalidInputError(f"{name} must be unit-norm (max deviation {worst:.2e})")


class ContrastQueue:
    """Fixed-length ring buffer of key embeddings and their virtual labels.

    ``contents()`` returns the valid entries in storage order; ``chronological()``
    returns them oldest first.
    """

    def __init__(self, length: int, dim: int) -> None:
        if length <= 0 or dim <= 0:
            raise InvalidConfigError("Queue length and dim must be > 0")
        self.length = int(length)
        self.dim = int(dim)
        self.features = torch.zeros(self.length, self.dim, dtype=torch.float32)
        self.labels = torch.full((self.length,), EMPTY_LABEL, dtype=torch.long)
        self.ptr = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    @property
    def is_full(self) -> bool:
        return self.fill == self.length

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor, labels: torch.Tensor) -> None:
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise InvalidInputError(f"Expected keys of shape [N, {self.dim}], got {tuple(keys.shape)}")
        if len(keys) != len(labels):
            raise InvalidInputError(f"{len(keys)} keys but {len(labels)} labels")
        count = len(keys)
        if count == 0:
            return
        if count > self.length:
            raise InvalidConfigError(
                f"Enqueue batch of {count} exceeds queue length {self.length}",
                details={"batch": count, "queue_length": self.length},
            )
        _check_unit_norm("Queued keys", keys)

        keys = keys.detach().to(dtype=self.features.dtype, device=self.features.device)
        labels = labels.detach().to(dtype=torch.long, device=self.labels.device)
        end = self.ptr + count
        if end <= self.length:
            self.features[self.ptr : end].copy_(keys)
            self.labels[self.ptr : end].copy_(labels)
        else:
            first = self.length - self.ptr
            self.features[self.ptr :].copy_(keys[:first])
            self.labels[self.ptr :].copy_(labels[:first])
            self.features[: end - self.length].copy_(keys[first:])
            self.labels[: end - self.length].copy_(labels[first:])
        self.ptr = end % self.length
        self.fill = min(self.length, self.fill + count)

    def contents(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.features[: self.fill], self.labels[: self.fill]

    def chronological(self) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.is_full:
            return self.contents()
        order = torch.roll(torch.arange(self.length), -self.ptr)
        return self.features[order], self.labels[order]

    def state_dict(self) -> dict[str, Any]:
        return {
            "length": self.length,
            "dim": self.dim,
            "features": self.features.clone(),
            "labels": self.labels.clone(),
            "ptr": self.ptr,
            "fill": self.fill,
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        if int(state["length"]) != self.length or int(state["dim"]) != self.dim:
            raise InvalidConfigError(
                f"Queue state is {state['length']} x {state['dim']}, expected {self.length} x {self.dim}"
            )
        self.features = state["features"].clone().to(torch.float32)
        self.labels = state["labels"].clone().to(torch.long)
        self.ptr = int(state["ptr"])
        self.fill = int(state["fill"])

    @classmethod
    def from_state_dict(cls, state: dict[str, Any]) -> "ContrastQueue":
        queue = cls(int(state["length"]), int(state["dim"]))
        queue.load_state_dict(state)
        return queue


def candidate_set(queue: ContrastQueue, own_key: torch.Tensor, own_label: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Own key prepended to the queue contents: ``(fill + 1) x p`` features and labels."""
    _check_unit_norm("Own key", own_key.reshape(1, -1))
    features, labels = queue.contents()
    own = own_key.reshape(1, -1).to(features.dtype)
    return (
        torch.cat([own, features], dim=0),
        torch.cat([torch.tensor([own_label], dtype=torch.long), labels], dim=0),
    )


@dataclass(frozen=True)
class ContrastBatch:
    q: torch.Tensor
    k: torch.Tensor
    virtual_labels: torch.Tensor
    tau: float

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise InvalidConfigError(f"Temperature must be > 0, got {self.tau}")
        if self.q.shape != self.k.shape or self.q.ndim != 2:
            raise InvalidInputError(f"q and k must share a [B, p] shape, got {tuple(self.q.shape)} and {tuple(self.k.shape)}")
        if len(self.virtual_labels) != len(self.q):
            raise InvalidInputError("virtual_labels must have one entry per query")
        _check_unit_norm("Query embeddings", self.q)
        _check_unit_norm("Key embeddings", self.k)


def supervised_contrastive_loss(
    q: torch.Tensor,
    k: torch.Tensor,
    labels: torch.Tensor,
    queue_features: torch.Tensor,
    queue_labels: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Mean over queries of the negative mean log-likelihood of each positive.

    Query ``i`` contrasts against ``A_i = {k_i} + queue``; positives are the members
    of ``A_i`` sharing its label, so ``k_i`` is always one of them.
    """
    if tau <= 0:
        raise InvalidConfigError(f"Temperature must be > 0, got {tau}")
    if len(q) == 0:
        raise InvalidInputError("Contrastive loss needs at least one query")

    queue_features = queue_features.to(dtype=q.dtype, device=q.device)
    own_logits = (q * k.to(q.dtype)).sum(dim=1, keepdim=True) / tau
    queue_logits = q @ queue_features.T / tau
    logits = torch.cat([own_logits, queue_logits], dim=1)

    queue_positive = labels.reshape(-1, 1) == queue_labels.to(labels.device).reshape(1, -1)
    positives = torch.cat([torch.ones_like(own_logits, dtype=torch.bool), queue_positive], dim=1)

    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    weights = positives.to(log_prob.dtype)
    per_query = -(weights * log_prob).sum(dim=1) / weights.sum(dim=1)
    return per_query.mean()


def scl_loss(batch: ContrastBatch, queue: ContrastQueue) -> torch.Tensor:
    features, labels = queue.contents()
    return supervised_contrastive_loss(batch.q, batch.k, batch.virtual_labels, features, labels, batch.tau)
