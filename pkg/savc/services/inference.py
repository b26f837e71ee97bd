"""Nearest-class-mean and aggregated multi-variant prediction over the prototype bank.

Scores are cosine similarities computed in float64. Candidate columns follow the
bank's lexicographic ``(session, class)`` order and ``argmax`` keeps the first
maximum, so ties go to the lowest ``(session, class)``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
import torch

from savc.core.errors import InvalidInputError, InvalidStateError, UndefinedSimilarityError
from savc.services.fantasy import FantasySet, apply_transform
from savc.services.network import QueryNetwork, extract_features
from savc.services.prototypes import PrototypeBank
from savc.services.samples import SampleSet

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class Prediction:
    class_id: int
    session: int
    score: float
    breakdown: tuple[float, ...]


@dataclass(frozen=True)
class PredictionBatch:
    sample_ids: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray
    sessions: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def accuracy(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.mean(self.predicted == self.labels) * 100.0)

    def accuracy_for(self, class_ids: Sequence[int]) -> float | None:
        mask = np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64))
        if not mask.any():
            return None
        return float(np.mean(self.predicted[mask] == self.labels[mask]) * 100.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "sample_id": self.sample_ids.astype(np.int64),
                "true_label": self.labels.astype(np.int64),
                "predicted_label": self.predicted.astype(np.int64),
                "predicted_session": self.sessions.astype(np.int64),
                "score": self.scores,
            }
        )


def _as_float64(values: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def cosine_scores(features: torch.Tensor | np.ndarray, prototypes: torch.Tensor | np.ndarray) -> np.ndarray:
    """``N x K`` cosine similarities; zero-norm rows on either side are undefined."""
    features = np.atleast_2d(_as_float64(features))
    prototypes = np.atleast_2d(_as_float64(prototypes))
    feature_norms = np.linalg.norm(features, axis=1)
    prototype_norms = np.linalg.norm(prototypes, axis=1)
    if np.any(feature_norms <= ZERO_NORM):
        raise UndefinedSimilarityError("Cosine similarity is undefined for a zero feature")
    if np.any(prototype_norms <= ZERO_NORM):
        raise UndefinedSimilarityError("Cosine similarity is undefined for a zero prototype")
    return (features / feature_norms[:, None]) @ (prototypes / prototype_norms[:, None]).T


def score_variants(
    variant_features: Sequence[torch.Tensor | np.ndarray], bank: PrototypeBank
) -> tuple[np.ndarray, np.ndarray]:
    """Per-variant score tensor ``M' x N x K`` and its sum over variants.

    ``variant_features[m]`` holds ``f(x_m)`` and is scored against the subset ``W_m``.
    """
    if len(bank) == 0:
        raise InvalidStateError("Prototype bank is empty")
    if not variant_features or len(variant_features) > bank.fantasy_size:
        raise InvalidInputError(f"Expected between 1 and {bank.fantasy_size} variant feature blocks")
    per_variant = np.stack(
        [cosine_scores(features, bank.subset_matrix(m)) for m, features in enumerate(variant_features)]
    )
    return per_variant, per_variant.sum(axis=0)


def _decide(per_variant: np.ndarray, totals: np.ndarray, bank: PrototypeBank) -> list[Prediction]:
    keys = bank.class_keys()
    winners = np.argmax(totals, axis=1)
    predictions = []
    for row, column in enumerate(winners):
        session, class_id = keys[int(column)]
        predictions.append(
            Prediction(
                class_id=class_id,
                session=session,
                score=float(totals[row, column]),
                breakdown=tuple(float(value) for value in per_variant[:, row, column]),
            )
        )
    return predictions


def predict_from_features(
    variant_features: Sequence[torch.Tensor | np.ndarray], bank: PrototypeBank
) -> list[Prediction]:
    per_variant, totals = score_variants(variant_features, bank)
    return _decide(per_variant, totals, bank)


def ncm_predict(feature: torch.Tensor | np.ndarray, bank: PrototypeBank) -> Prediction:
    """Nearest class mean over the identity-variant prototypes."""
    return predict_from_features([np.atleast_2d(_as_float64(feature))], bank)[0]


def variant_features(
    network: QueryNetwork,
    images: torch.Tensor,
    fantasy: FantasySet,
    *,
    batch_size: int = 256,
) -> list[torch.Tensor]:
    return [
        extract_features(
            network,
            images,
            batch_size=batch_size,
            transform=lambda batch, d=descriptor: apply_transform(batch, d),
        )
        for descriptor in fantasy.transforms
    ]


def aggregated_predict(
    image: torch.Tensor,
    fantasy: FantasySet,
    network: QueryNetwork,
    bank: PrototypeBank,
) -> Prediction:
    if image.ndim != 3:
        raise InvalidInputError(f"Expected a C x H x W image, got shape {tuple(image.shape)}")
    if fantasy.size != bank.fantasy_size:
        raise InvalidStateError(f"Fantasy set has {fantasy.size} variants, bank has {bank.fantasy_size}")
    return predict_from_features(variant_features(network, image.unsqueeze(0), fantasy), bank)[0]


def predict_samples(
    network: QueryNetwork,
    samples: SampleSet,
    fantasy: FantasySet,
    bank: PrototypeBank,
    *,
    batch_size: int = 256,
) -> PredictionBatch:
    """Aggregated prediction for every sample of a test set."""
    if fantasy.size != bank.fantasy_size:
        raise InvalidStateError(f"Fantasy set has {fantasy.size} variants, bank has {bank.fantasy_size}")
    if len(samples) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return PredictionBatch(empty, empty, empty, empty, np.zeros(0, dtype=np.float64))

    predictions = predict_from_features(
        variant_features(network, samples.float_images(), fantasy, batch_size=batch_size), bank
    )
    return PredictionBatch(
        sample_ids=samples.sample_ids.numpy().astype(np.int64),
        labels=samples.labels.numpy().astype(np.int64),
        predicted=np.array([p.class_id for p in predictions], dtype=np.int64),
        sessions=np.array([p.session for p in predictions], dtype=np.int64),
        scores=np.array([p.score for p in predictions], dtype=np.float64),
    )


def confusion_matrix(
    predictions: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    num_classes: int,
) -> np.ndarray:
    predicted = np.asarray(predictions, dtype=np.int64).reshape(-1)
    truth = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(predicted) != len(truth):
        raise InvalidInputError(f"{len(predicted)} predictions but {len(truth)} labels")
    if num_classes < 1:
        raise InvalidInputError("num_classes must be >= 1")
    if len(truth) == 0:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    for name, values in (("label", truth), ("prediction", predicted)):
        if values.min() < 0 or values.max() >= num_classes:
            raise InvalidInputError(f"A {name} lies outside [0, {num_classes})")
    return sk_confusion_matrix(truth, predicted, labels=np.arange(num_classes)).astype(np.int64)


def write_predictions(path: Path, batch: PredictionBatch) -> None:
    batch.to_frame().to_csv(path, index=False, float_format="%.10f")
