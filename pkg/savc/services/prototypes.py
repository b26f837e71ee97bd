"""Class prototypes per (session, class, fantasy variant) and the growing prototype bank."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
import copy
from dataclasses import dataclass
import logging
from typing import Any

import torch

from savc.core.errors import InvalidDataError, InvalidInputError, InvalidStateError
from savc.services.fantasy import FantasySet, apply_transform
from savc.services.network import QueryNetwork, extract_features, l2_normalize
from savc.services.samples import SampleSet

logger = logging.getLogger(__name__)

PrototypeKey = tuple[int, int, int]


@dataclass(frozen=True)
class PrototypeEntry:
    session: int
    class_id: int
    fantasy_index: int
    vector: torch.Tensor
    count: int

    @property
    def key(self) -> PrototypeKey:
        return (self.session, self.class_id, self.fantasy_index)


class PrototypeBank:
    """Prototype vectors keyed by ``(session, class, fantasy index)``.

    Sessions are added whole and never rewritten unless explicitly replaced, so
    prototypes of closed sessions keep the values they were computed with.
    """

    def __init__(self, fantasy_size: int, feature_dim: int) -> None:
        if fantasy_size < 1 or feature_dim < 1:
            raise InvalidStateError("PrototypeBank needs fantasy_size >= 1 and feature_dim >= 1")
        self.fantasy_size = fantasy_size
        self.feature_dim = feature_dim
        self.entries: dict[PrototypeKey, torch.Tensor] = {}
        self.counts: dict[tuple[int, int], int] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def sessions(self) -> list[int]:
        return sorted({session for session, _, _ in self.entries})

    def class_keys(self) -> list[tuple[int, int]]:
        """Encountered ``(session, class)`` pairs in lexicographic order."""
        return sorted({(session, class_id) for session, class_id, _ in self.entries})

    def class_ids(self) -> list[int]:
        return [class_id for _, class_id in self.class_keys()]

    def extend(self, entries: Iterable[PrototypeEntry]) -> None:
        new_entries = list(entries)
        if not new_entries:
            return
        keys = [entry.key for entry in new_entries]
        duplicates = sorted({key for key in keys if keys.count(key) > 1 or key in self.entries})
        if duplicates:
            raise InvalidStateError(f"Duplicate prototype keys {duplicates[:5]}", details={"keys": duplicates[:20]})
        existing_sessions = set(self.sessions()) & {entry.session for entry in new_entries}
        if existing_sessions:
            raise InvalidStateError(f"Sessions {sorted(existing_sessions)} are already in the prototype bank")
        self._insert(new_entries)

    def replace_session(self, session: int, entries: Iterable[PrototypeEntry]) -> None:
        new_entries = list(entries)
        if any(entry.session != session for entry in new_entries):
            raise InvalidStateError(f"Replacement entries must all belong to session {session}")
        self.entries = {key: value for key, value in self.entries.items() if key[0] != session}
        self.counts = {key: value for key, value in self.counts.items() if key[0] != session}
        self._insert(new_entries)

    def _insert(self, entries: list[PrototypeEntry]) -> None:
        for entry in entries:
            if entry.vector.shape != (self.feature_dim,):
                raise InvalidInputError(
                    f"Prototype {entry.key} has shape {tuple(entry.vector.shape)}, expected ({self.feature_dim},)"
                )
            if not 0 <= entry.fantasy_index < self.fantasy_size:
                raise InvalidInputError(f"Prototype {entry.key} has fantasy index outside [0, {self.fantasy_size})")
            self.entries[entry.key] = entry.vector.detach().clone()
            self.counts[(entry.session, entry.class_id)] = entry.count

    def subset_matrix(self, fantasy_index: int) -> torch.Tensor:
        """Conditional subset ``W_m`` with rows in :meth:`class_keys` order."""
        rows = []
        for session, class_id in self.class_keys():
            vector = self.entries.get((session, class_id, fantasy_index))
            if vector is None:
                raise InvalidStateError(
                    f"Prototype bank lacks entry for class {class_id} (session {session}), variant {fantasy_index}"
                )
            rows.append(vector)
        if not rows:
            return torch.zeros(0, self.feature_dim)
        return torch.stack(rows)

    def virtual_class_matrix(self) -> torch.Tensor:
        """Rows ``c * M + m`` for contiguous class ids ``0..C-1``."""
        class_ids = self.class_ids()
        if class_ids != list(range(len(class_ids))):
            raise InvalidStateError("Virtual-class matrix requires contiguous class ids starting at 0")
        subsets = torch.stack([self.subset_matrix(m) for m in range(self.fantasy_size)], dim=1)
        return subsets.reshape(len(class_ids) * self.fantasy_size, self.feature_dim)

    def state_dict(self) -> dict[str, Any]:
        return {
            "fantasy_size": self.fantasy_size,
            "feature_dim": self.feature_dim,
            "entries": [(list(key), value.clone()) for key, value in sorted(self.entries.items())],
            "counts": [(list(key), value) for key, value in sorted(self.counts.items())],
        }

    @classmethod
    def from_state_dict(cls, state: dict[str, Any]) -> "PrototypeBank":
        bank = cls(int(state["fantasy_size"]), int(state["feature_dim"]))
        bank.entries = {tuple(key): value.clone() for key, value in state["entries"]}
        bank.counts = {tuple(key): int(value) for key, value in state["counts"]}
        return bank


def compute_prototypes(
    network: QueryNetwork,
    samples: SampleSet,
    class_ids: Sequence[int],
    session_index: int,
    fantasy: FantasySet,
    *,
    batch_size: int = 256,
    normalize_features: bool = False,
) -> list[PrototypeEntry]:
    """Mean extractor feature of every (class, variant) over the session's training images."""
    labels = samples.labels
    images = samples.float_images()
    entries: list[PrototypeEntry] = []
    for class_id in class_ids:
        mask = labels == class_id
        count = int(mask.sum())
        if count == 0:
            raise InvalidDataError(f"Class {class_id} has no samples in session {session_index}")
        class_images = images[mask]
        for fantasy_index, descriptor in enumerate(fantasy.transforms):
            features = extract_features(
                network,
                class_images,
                batch_size=batch_size,
                transform=lambda batch, d=descriptor: apply_transform(batch, d),
            )
            if normalize_features:
                features = l2_normalize(features)
            vector = features.to(torch.float64).mean(dim=0).to(torch.float32)
            entries.append(
                PrototypeEntry(
                    session=session_index,
                    class_id=int(class_id),
                    fantasy_index=fantasy_index,
                    vector=vector,
                    count=count,
                )
            )
    logger.debug("Computed %d prototypes for session %d", len(entries), session_index)
    return entries


def extend_classifier(bank: PrototypeBank, entries: Iterable[PrototypeEntry]) -> PrototypeBank:
    extended = copy.deepcopy(bank)
    extended.extend(entries)
    return extended
