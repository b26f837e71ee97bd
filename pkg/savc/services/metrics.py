"""Embedding separation diagnostics, CDF tables, accuracy tables and embedding dumps.

All sums are taken over cosine distances ``1 - sim`` in float64. For unit-normalized
embeddings the mean pairwise distance between two sample groups equals
``1 - mean(u) . mean(v)``, so the within-class and total averages are evaluated from
class means instead of explicit pair loops.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
import itertools
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from savc.core.errors import (
    InvalidInputError,
    UndefinedMetricError,
    UndefinedSimilarityError,
)
from savc.schemas.experiment import BaselineAccuracies
from savc.schemas.reports import SeparationReport, SessionResult
from savc.services.network import QueryNetwork, extract_features
from savc.services.samples import SampleSet

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
DISTANCE_FLOOR = 1e-12

ArrayLike = np.ndarray | torch.Tensor | Sequence[Sequence[float]]


def _matrix(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2:
        raise InvalidInputError(f"Expected a 2-D array of vectors, got shape {array.shape}")
    return array


def _labels(values: np.ndarray | torch.Tensor | Sequence[int]) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.int64).reshape(-1)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms <= ZERO_NORM):
        raise UndefinedSimilarityError("Cosine similarity is undefined for a zero vector")
    return vectors / norms[:, None]


def _distance(value: float) -> float:
    value = min(max(value, 0.0), 2.0)
    return 0.0 if value < DISTANCE_FLOOR else value


def inter_class_distance(prototypes: ArrayLike) -> list[float]:
    """``1 - sim(p_a, p_b)`` for every unordered prototype pair ``a < b``."""
    unit = _unit_rows(_matrix(prototypes))
    if len(unit) < 2:
        raise InvalidInputError("Inter-class distance needs at least two prototypes")
    similarity = unit @ unit.T
    return [_distance(1.0 - similarity[a, b]) for a, b in itertools.combinations(range(len(unit)), 2)]


def intra_class_distance(
    embeddings: ArrayLike,
    labels: np.ndarray | torch.Tensor | Sequence[int],
    prototypes: Mapping[int, ArrayLike],
) -> dict[int, float]:
    """Per class, the mean ``1 - sim`` between its samples and its prototype."""
    features = _matrix(embeddings)
    label_array = _labels(labels)
    if len(features) != len(label_array):
        raise InvalidInputError(f"{len(features)} embeddings but {len(label_array)} labels")
    unknown = sorted(set(label_array.tolist()) - set(prototypes))
    if unknown:
        raise InvalidInputError(f"Classes {unknown[:10]} have samples but no prototype")

    unit = _unit_rows(features) if len(features) else features
    distances: dict[int, float] = {}
    for class_id in sorted(prototypes):
        mask = label_array == class_id
        if not mask.any():
            logger.warning("Class %d has no samples; excluded from intra-class distance", class_id)
            continue
        prototype = _unit_rows(_matrix(prototypes[class_id]))[0]
        distances[int(class_id)] = _distance(float(np.mean(1.0 - unit[mask] @ prototype)))
    return distances


def _class_means(unit: np.ndarray, label_array: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    means = []
    for class_id in class_ids:
        mask = label_array == class_id
        if not mask.any():
            raise InvalidInputError(f"Class {class_id} has no embeddings")
        means.append(unit[mask].mean(axis=0))
    return np.stack(means)


def _prepare(
    embeddings: ArrayLike, labels: np.ndarray | torch.Tensor | Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    features = _matrix(embeddings)
    label_array = _labels(labels)
    if len(features) != len(label_array):
        raise InvalidInputError(f"{len(features)} embeddings but {len(label_array)} labels")
    return _unit_rows(features), label_array


def _within(means: np.ndarray) -> float:
    return _distance(1.0 - float(np.mean(np.sum(means * means, axis=1))))


def _ratio(within: float, total: float, metric: str) -> float:
    if total <= DISTANCE_FLOOR:
        raise UndefinedMetricError(f"{metric} is undefined: average total distance is zero", details={"metric": metric})
    return 1.0 - within / total


def r_squared(
    embeddings: ArrayLike,
    labels: np.ndarray | torch.Tensor | Sequence[int],
    class_subset: Sequence[int],
) -> float:
    """``1 - d_within / d_total`` over the classes in ``class_subset``."""
    if not class_subset:
        raise InvalidInputError("R^2 needs at least one class")
    unit, label_array = _prepare(embeddings, labels)
    means = _class_means(unit, label_array, sorted(set(class_subset)))
    centroid = means.mean(axis=0)
    total = _distance(1.0 - float(centroid @ centroid))
    return _ratio(_within(means), total, "r_squared")


def mutual_r_squared(
    embeddings: ArrayLike,
    labels: np.ndarray | torch.Tensor | Sequence[int],
    base_ids: Sequence[int],
    novel_ids: Sequence[int],
) -> float:
    """Within term over all classes; total term averaged over (base, novel) class pairs only."""
    if not base_ids or not novel_ids:
        raise InvalidInputError("Mutual R^2 needs both base and novel classes")
    if set(base_ids) & set(novel_ids):
        raise InvalidInputError("base_ids and novel_ids must be disjoint")
    unit, label_array = _prepare(embeddings, labels)
    base_means = _class_means(unit, label_array, sorted(set(base_ids)))
    novel_means = _class_means(unit, label_array, sorted(set(novel_ids)))
    within = _within(np.concatenate([base_means, novel_means]))
    total = _distance(1.0 - float(base_means.mean(axis=0) @ novel_means.mean(axis=0)))
    return _ratio(within, total, "r2_mutual")


def cdf_export(values: Sequence[float] | np.ndarray) -> pd.DataFrame:
    array = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if array.size == 0:
        raise InvalidInputError("CDF export needs at least one value")
    return pd.DataFrame(
        {"value": array, "cumulative_fraction": np.arange(1, array.size + 1, dtype=np.float64) / array.size}
    )


def session_table(
    accuracies: Sequence[float],
    baseline: BaselineAccuracies | None = None,
) -> SessionResult:
    if baseline is None:
        return SessionResult(accuracies=list(accuracies))
    if len(baseline.accuracies) != len(accuracies):
        raise InvalidInputError(
            f"Run has {len(accuracies)} sessions but baseline {baseline.name!r} has {len(baseline.accuracies)}"
        )
    return SessionResult(
        accuracies=list(accuracies),
        baseline_name=baseline.name,
        baseline_accuracies=list(baseline.accuracies),
        delta_last=round(accuracies[-1] - baseline.accuracies[-1], 2),
    )


def separation_report(
    embeddings: ArrayLike,
    labels: np.ndarray | torch.Tensor | Sequence[int],
    prototypes: Mapping[int, ArrayLike],
    base_ids: Sequence[int],
    novel_ids: Sequence[int] = (),
    *,
    fantasy_space: bool = False,
) -> SeparationReport:
    """Inter/intra distances over base classes plus base, novel and mutual R^2."""
    base = sorted(base_ids)
    novel = sorted(novel_ids)
    features = _matrix(embeddings)
    label_array = _labels(labels)
    base_mask = np.isin(label_array, np.asarray(base, dtype=np.int64))

    d_inter = inter_class_distance(np.stack([_matrix(prototypes[class_id])[0] for class_id in base]))
    d_intra = intra_class_distance(
        features[base_mask], label_array[base_mask], {class_id: prototypes[class_id] for class_id in base}
    )

    undefined: list[str] = []

    def _guarded(metric: str, compute) -> float | None:
        try:
            return compute()
        except UndefinedMetricError:
            logger.warning("%s is undefined for this embedding set", metric)
            undefined.append(metric)
            return None

    r2_base = _guarded("r2_base", lambda: r_squared(features, label_array, base))
    r2_novel = _guarded("r2_novel", lambda: r_squared(features, label_array, novel)) if novel else None
    r2_mutual = (
        _guarded("r2_mutual", lambda: mutual_r_squared(features, label_array, base, novel)) if novel else None
    )
    return SeparationReport(
        d_inter=d_inter,
        d_intra=d_intra,
        r2_base=r2_base,
        r2_novel=r2_novel,
        r2_mutual=r2_mutual,
        base_ids=base,
        novel_ids=novel,
        fantasy_space=fantasy_space,
        subsampled=False,
        undefined_metrics=undefined,
    )


def embedding_frame(
    features: np.ndarray | torch.Tensor,
    sample_ids: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    session_ids: Sequence[int] | np.ndarray,
) -> pd.DataFrame:
    matrix = _matrix(features) if len(features) else np.zeros((0, 0))
    frame = pd.DataFrame(
        {
            "sample_id": np.asarray(sample_ids, dtype=np.int64),
            "label": np.asarray(labels, dtype=np.int64),
            "session_id": np.asarray(session_ids, dtype=np.int64),
        }
    )
    columns = pd.DataFrame(matrix, columns=[f"f{index}" for index in range(matrix.shape[1])])
    return pd.concat([frame, columns], axis=1)


def embedding_dump(
    network: QueryNetwork,
    samples: SampleSet,
    path: Path,
    *,
    session_of_class: Mapping[int, int],
    batch_size: int = 256,
) -> pd.DataFrame:
    """Write ``sample_id,label,session_id,f0..f{d-1}`` rows of identity-variant features."""
    features = extract_features(network, samples.float_images(), batch_size=batch_size)
    labels = samples.labels.numpy()
    missing = sorted(set(labels.tolist()) - set(session_of_class))
    if missing:
        raise InvalidInputError(f"No session known for classes {missing[:10]}")
    frame = embedding_frame(
        features,
        samples.sample_ids.numpy(),
        labels,
        [session_of_class[int(label)] for label in labels],
    )
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info("Wrote %d embeddings to %s", len(frame), path)
    return frame


def load_embeddings(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_confusion(path: Path, matrix: np.ndarray) -> None:
    labels = [str(index) for index in range(matrix.shape[0])]
    pd.DataFrame(matrix, index=labels, columns=labels).to_csv(path, index_label="true\\predicted")
