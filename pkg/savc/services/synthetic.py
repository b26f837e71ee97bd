"""Procedural toy benchmark.

Every class is a colored sine grating with its own hue, orientation and
frequency, plus a white corner marker. The hue makes channel permutations land
on new colors and the marker makes every rotation distinguishable, so the
fantasy transforms produce genuinely distinct virtual classes.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
import torch

from savc.core.errors import InvalidConfigError
from savc.core.reproducibility import derive_seed
from savc.schemas.experiment import SyntheticConfig
from savc.services.samples import SampleSet

MIN_RESOLUTION = 8
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_PHASE_JITTER = 0.3


@dataclass(frozen=True)
class _ClassPattern:
    color: np.ndarray
    orientation: float
    frequency: float
    phase: float


def _hue_to_rgb(hue: float, saturation: float = 0.85, value: float = 0.95) -> np.ndarray:
    offsets = np.array([0.0, 4.0, 2.0])
    rgb = np.clip(np.abs((hue * 6.0 + offsets) % 6.0 - 3.0) - 1.0, 0.0, 1.0)
    return value * (1.0 - saturation + saturation * rgb)


def _class_pattern(class_id: int, num_classes: int, seed: int) -> _ClassPattern:
    rng = np.random.default_rng(derive_seed(seed, class_id, 0))
    hue = (class_id / num_classes + rng.uniform(0.0, 0.25 / num_classes)) % 1.0
    return _ClassPattern(
        color=_hue_to_rgb(hue),
        orientation=math.pi * ((class_id * _GOLDEN) % 1.0),
        frequency=1.5 + (class_id % 3),
        phase=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


def synthetic_dataset(
    num_classes: int,
    per_class: int,
    resolution: int,
    seed: int,
    *,
    noise: float = 0.04,
) -> SampleSet:
    if num_classes < 2:
        raise InvalidConfigError("synthetic dataset needs at least 2 classes")
    if per_class < 1:
        raise InvalidConfigError("synthetic dataset needs at least 1 sample per class")
    if resolution < MIN_RESOLUTION:
        raise InvalidConfigError(f"synthetic resolution must be >= {MIN_RESOLUTION}, got {resolution}")

    axis = np.linspace(0.0, 1.0, resolution)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    marker = max(2, resolution // 4)

    images = np.empty((num_classes * per_class, 3, resolution, resolution), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for class_id in range(num_classes):
        pattern = _class_pattern(class_id, num_classes, seed)
        projection = xx * math.cos(pattern.orientation) + yy * math.sin(pattern.orientation)
        rng = np.random.default_rng(derive_seed(seed, class_id, 1))
        for offset in range(per_class):
            jitter = rng.uniform(-_PHASE_JITTER, _PHASE_JITTER)
            grating = 0.5 + 0.5 * np.sin(2.0 * math.pi * pattern.frequency * projection + pattern.phase + jitter)
            image = pattern.color[:, None, None] * (0.35 + 0.65 * grating)[None, :, :]
            image[:, :marker, :marker] = 1.0
            image = image + rng.normal(0.0, noise, size=image.shape)
            images[class_id * per_class + offset] = np.clip(image, 0.0, 1.0)

    return SampleSet(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels),
        sample_ids=torch.arange(len(labels)),
    )


def synthetic_split(config: SyntheticConfig, *, num_classes: int) -> tuple[SampleSet, SampleSet]:
    """Generate train and test pools that share class patterns but not samples."""
    per_class = config.train_per_class + config.test_per_class
    pool = synthetic_dataset(num_classes, per_class, config.resolution, config.seed, noise=config.noise)
    offsets = torch.arange(len(pool)) % per_class
    train = pool.subset(torch.nonzero(offsets < config.train_per_class).flatten())
    test = pool.subset(torch.nonzero(offsets >= config.train_per_class).flatten())
    return train, test
