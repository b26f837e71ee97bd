"""Benchmark loading and the FSCIL session split.

Array-archive layout (cifar100)::

    <root>/cifar100/train.npz   images: uint8 N x 32 x 32 x 3, labels: int N
    <root>/cifar100/test.npz

Image-folder layout (mini_imagenet, cub200)::

    <root>/<benchmark>/train/<class_name>/<image>
    <root>/<benchmark>/test/<class_name>/<image>

Class ids follow the sorted class-folder order, so the first base-class count
folders form session 0 and the rest are dealt out to incremental sessions in order.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torchvision.io import ImageReadMode, read_image
from torchvision.transforms.v2 import functional as TF

from savc.core.constants import BENCHMARK_SCHEDULES
from savc.core.errors import DatasetIOError, InvalidConfigError, InvalidDataError
from savc.core.reproducibility import derive_seed
from savc.schemas.enums import Benchmark
from savc.schemas.experiment import SyntheticConfig
from savc.schemas.session import SessionSpec
from savc.services.samples import SampleSet
from savc.services.synthetic import synthetic_split

logger = logging.getLogger(__name__)

_IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}


@dataclass(frozen=True)
class SessionSplit:
    benchmark: Benchmark
    sessions: list[SessionSpec]
    train: list[SampleSet]
    test: SampleSet

    @property
    def resolution(self) -> int:
        return self.test.resolution

    @property
    def base_classes(self) -> list[int]:
        return list(self.sessions[0].class_ids)

    def encountered_classes(self, session_index: int) -> list[int]:
        return [class_id for spec in self.sessions[: session_index + 1] for class_id in spec.class_ids]

    def test_for_session(self, session_index: int) -> SampleSet:
        return self.test.for_classes(self.encountered_classes(session_index))

    def manifest(self) -> dict[str, Any]:
        return {
            "benchmark": self.benchmark.value,
            "sessions": [
                {
                    **spec.model_dump(mode="json"),
                    "train_sample_ids": train.sample_ids.tolist(),
                }
                for spec, train in zip(self.sessions, self.train)
            ],
            "test_sample_count": len(self.test),
        }


def build_schedule(benchmark: Benchmark, synthetic: SyntheticConfig | None = None) -> list[SessionSpec]:
    if benchmark == Benchmark.SYNTHETIC:
        config = synthetic or SyntheticConfig()
        base_classes = config.base_classes
        sessions = config.incremental_sessions
        ways = config.ways
        shots = config.shots
    else:
        schedule = BENCHMARK_SCHEDULES[benchmark.value]
        base_classes = schedule["base_classes"]
        sessions = schedule["incremental_sessions"]
        ways = schedule["incremental_classes"] // sessions
        shots = schedule["shots"]

    specs = [SessionSpec(index=0, class_ids=tuple(range(base_classes)), shots=None, ways=base_classes)]
    for index in range(1, sessions + 1):
        start = base_classes + (index - 1) * ways
        specs.append(SessionSpec(index=index, class_ids=tuple(range(start, start + ways)), shots=shots, ways=ways))
    return specs


def benchmark_resolution(benchmark: Benchmark, synthetic: SyntheticConfig | None = None) -> int:
    if benchmark == Benchmark.SYNTHETIC:
        return (synthetic or SyntheticConfig()).resolution
    return BENCHMARK_SCHEDULES[benchmark.value]["resolution"]


def build_sessions(
    benchmark: Benchmark,
    *,
    dataset_root: Path | None = None,
    synthetic: SyntheticConfig | None = None,
    seed: int = 0,
) -> SessionSplit:
    schedule = build_schedule(benchmark, synthetic)

    if benchmark == Benchmark.SYNTHETIC:
        train_pool, test = synthetic_split(synthetic or SyntheticConfig(), num_classes=_class_count(schedule))
    else:
        if dataset_root is None:
            raise InvalidConfigError(f"dataset_root is required for benchmark {benchmark.value}")
        train_pool, test = _load_benchmark(benchmark, Path(dataset_root))

    expected_classes = set(range(_class_count(schedule)))
    observed_classes = set(train_pool.classes())
    if not expected_classes <= observed_classes:
        missing = sorted(expected_classes - observed_classes)
        raise InvalidDataError(f"Training data lacks classes {missing[:10]}")

    rng = np.random.default_rng(derive_seed(seed, 17))
    train_sets: list[SampleSet] = []
    for spec in schedule:
        if spec.shots is None:
            train_sets.append(train_pool.for_classes(spec.class_ids))
            continue
        train_sets.append(_few_shot_subset(train_pool, spec, rng))

    split = SessionSplit(
        benchmark=benchmark,
        sessions=schedule,
        train=train_sets,
        test=test.for_classes(sorted(expected_classes)),
    )
    logger.info(
        "Built %s split: %d base classes, %d incremental sessions",
        benchmark.value,
        len(schedule[0].class_ids),
        len(schedule) - 1,
    )
    return split


def _class_count(schedule: list[SessionSpec]) -> int:
    return sum(len(spec.class_ids) for spec in schedule)


def _few_shot_subset(pool: SampleSet, spec: SessionSpec, rng: np.random.Generator) -> SampleSet:
    labels = pool.labels.numpy()
    chosen: list[int] = []
    for class_id in spec.class_ids:
        candidates = np.flatnonzero(labels == class_id)
        if len(candidates) < (spec.shots or 0):
            raise InvalidDataError(
                f"Class {class_id} has {len(candidates)} samples, session {spec.index} needs {spec.shots}"
            )
        picked = np.sort(rng.choice(candidates, size=spec.shots, replace=False))
        chosen.extend(int(index) for index in picked)
    return pool.subset(chosen)


def _load_benchmark(benchmark: Benchmark, root: Path) -> tuple[SampleSet, SampleSet]:
    if benchmark == Benchmark.CIFAR100:
        return _load_array_archive(root / "cifar100", "train"), _load_array_archive(root / "cifar100", "test")

    resolution = BENCHMARK_SCHEDULES[benchmark.value]["resolution"]
    directory = root / benchmark.value
    return (
        _load_image_folder(directory / "train", resolution),
        _load_image_folder(directory / "test", resolution),
    )


def _load_array_archive(directory: Path, split: str) -> SampleSet:
    path = directory / f"{split}.npz"
    if not path.exists():
        raise DatasetIOError(f"Missing dataset archive: {path}")
    with np.load(path) as archive:
        if "images" not in archive or "labels" not in archive:
            raise InvalidDataError(f"{path} must contain 'images' and 'labels' arrays")
        images = np.ascontiguousarray(archive["images"])
        labels = np.asarray(archive["labels"], dtype=np.int64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InvalidDataError(f"{path}: images must be N x H x W x 3, got {images.shape}")
    tensor = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    return SampleSet(images=tensor, labels=torch.from_numpy(labels), sample_ids=torch.arange(len(labels)))


def _load_image_folder(directory: Path, resolution: int) -> SampleSet:
    if not directory.is_dir():
        raise DatasetIOError(f"Missing dataset folder: {directory}")

    class_dirs = sorted(path for path in directory.iterdir() if path.is_dir())
    if not class_dirs:
        raise DatasetIOError(f"No class folders under {directory}")

    images: list[torch.Tensor] = []
    labels: list[int] = []
    for class_id, class_dir in enumerate(class_dirs):
        files = sorted(path for path in class_dir.iterdir() if path.suffix.lower() in _IMAGE_SUFFIXES)
        for path in files:
            images.append(_eval_transform(read_image(str(path), mode=ImageReadMode.RGB), resolution))
            labels.append(class_id)

    logger.info("Loaded %d images from %s", len(images), directory)
    return SampleSet(
        images=torch.stack(images),
        labels=torch.tensor(labels, dtype=torch.long),
        sample_ids=torch.arange(len(labels)),
    )


def _eval_transform(image: torch.Tensor, resolution: int) -> torch.Tensor:
    resized = TF.resize(image, [int(round(resolution * 8 / 7))], antialias=True)
    return TF.center_crop(resized, [resolution, resolution])
