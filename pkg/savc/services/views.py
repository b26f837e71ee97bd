"""Query, key and multi-crop views for contrastive training.

Crop regions are recorded in original-image pixel coordinates so the overlap
constraint between local crops and the query crop can be audited.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Any

import torch
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms.v2 import functional as TF

from savc.core.errors import InvalidConfigError, InvalidInputError
from savc.core.reproducibility import derive_seed, torch_generator
from savc.schemas.enums import ViewRole
from savc.schemas.experiment import AugmentationConfig
from savc.services.fantasy import FantasySet, Sample, expand
from savc.services.samples import SampleSet

logger = logging.getLogger(__name__)

_CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class CropRegion:
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def intersection(self, other: "CropRegion") -> int:
        rows = min(self.top + self.height, other.top + other.height) - max(self.top, other.top)
        cols = min(self.left + self.width, other.left + other.width) - max(self.left, other.left)
        return max(rows, 0) * max(cols, 0)

    def iou(self, other: "CropRegion") -> float:
        inter = self.intersection(other)
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class LocalView:
    image: torch.Tensor
    region: CropRegion
    role: ViewRole = ViewRole.QUERY_ONLY


@dataclass(frozen=True)
class ViewBundle:
    query: torch.Tensor
    key: torch.Tensor
    query_region: CropRegion
    key_region: CropRegion
    locals: tuple[LocalView, ...] = field(default_factory=tuple)
    fallback_count: int = 0


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand((), generator=generator))


def sample_crop(
    height: int,
    width: int,
    scale: tuple[float, float],
    ratio: tuple[float, float],
    generator: torch.Generator,
) -> CropRegion:
    """Random-resized-crop geometry drawn from an explicit generator."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(_CROP_ATTEMPTS):
        target_area = area * _uniform(generator, scale[0], scale[1])
        aspect = math.exp(_uniform(generator, log_ratio[0], log_ratio[1]))
        crop_w = int(round(math.sqrt(target_area * aspect)))
        crop_h = int(round(math.sqrt(target_area / aspect)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = int(torch.randint(0, height - crop_h + 1, (), generator=generator))
            left = int(torch.randint(0, width - crop_w + 1, (), generator=generator))
            return CropRegion(top=top, left=left, height=crop_h, width=crop_w)

    in_ratio = width / height
    if in_ratio < ratio[0]:
        crop_w, crop_h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        crop_h, crop_w = height, int(round(height * ratio[1]))
    else:
        crop_w, crop_h = width, height
    return CropRegion(top=(height - crop_h) // 2, left=(width - crop_w) // 2, height=crop_h, width=crop_w)


def center_subcrop(region: CropRegion, area_fraction: float) -> CropRegion:
    """Centered crop inside ``region`` covering at least ``area_fraction`` of it."""
    side = math.sqrt(min(max(area_fraction, 0.0), 1.0))
    crop_h = min(region.height, max(1, math.ceil(region.height * side)))
    crop_w = min(region.width, max(1, math.ceil(region.width * side)))
    return CropRegion(
        top=region.top + (region.height - crop_h) // 2,
        left=region.left + (region.width - crop_w) // 2,
        height=crop_h,
        width=crop_w,
    )


def _photometric(image: torch.Tensor, config: AugmentationConfig, generator: torch.Generator) -> torch.Tensor:
    if float(torch.rand((), generator=generator)) < config.flip_p:
        image = TF.horizontal_flip(image)

    if float(torch.rand((), generator=generator)) < config.jitter_p:
        brightness, contrast, saturation, hue = config.jitter_strength
        order = torch.randperm(4, generator=generator).tolist()
        factors = (
            _uniform(generator, max(0.0, 1 - brightness), 1 + brightness),
            _uniform(generator, max(0.0, 1 - contrast), 1 + contrast),
            _uniform(generator, max(0.0, 1 - saturation), 1 + saturation),
            _uniform(generator, -hue, hue),
        )
        for op in order:
            if op == 0:
                image = TF.adjust_brightness(image, factors[0])
            elif op == 1:
                image = TF.adjust_contrast(image, factors[1])
            elif op == 2:
                image = TF.adjust_saturation(image, factors[2])
            else:
                image = TF.adjust_hue(image, factors[3])

    if float(torch.rand((), generator=generator)) < config.grayscale_p:
        image = TF.rgb_to_grayscale(image, num_output_channels=3)

    return image.clamp(0.0, 1.0)


def _render(
    image: torch.Tensor,
    region: CropRegion,
    size: int,
    config: AugmentationConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    view = TF.resized_crop(
        image, region.top, region.left, region.height, region.width, [size, size], antialias=True
    )
    return _photometric(view, config, generator).contiguous()


def make_views(
    sample: Sample,
    config: AugmentationConfig,
    n_local: int,
    overlap_threshold: float,
    generator: torch.Generator,
) -> ViewBundle:
    if n_local < 0:
        raise InvalidConfigError(f"n_local must be >= 0, got {n_local}")
    if not 0.0 <= overlap_threshold <= 1.0:
        raise InvalidConfigError(f"overlap_threshold must lie in [0, 1], got {overlap_threshold}")

    image = sample.image
    if image.ndim != 3:
        raise InvalidInputError(f"Expected a C x H x W image, got shape {tuple(image.shape)}")
    height, width = int(image.shape[-2]), int(image.shape[-1])
    full = CropRegion(top=0, left=0, height=height, width=width)
    local_size = config.local_resolution or max(1, min(height, width) // 2)

    if config.enabled:
        query_region = sample_crop(height, width, config.global_scale, config.aspect_ratio, generator)
        query = _render(image, query_region, height, config, generator)
        key_region = sample_crop(height, width, config.global_scale, config.aspect_ratio, generator)
        key = _render(image, key_region, height, config, generator)
    else:
        query_region = key_region = full
        query = image.clone()
        key = image.clone()

    locals_: list[LocalView] = []
    fallbacks = 0
    for _ in range(n_local):
        region = _overlapping_crop(height, width, query_region, config, overlap_threshold, generator)
        if region is None:
            fallbacks += 1
            region = center_subcrop(query_region, max(overlap_threshold, config.local_scale[0]))
            logger.debug("Local crop fell back to a center sub-crop of %s", query_region)
        if config.enabled:
            view = _render(image, region, local_size, config, generator)
        else:
            view = TF.resized_crop(
                image, region.top, region.left, region.height, region.width, [local_size, local_size], antialias=True
            )
        locals_.append(LocalView(image=view, region=region))

    return ViewBundle(
        query=query,
        key=key,
        query_region=query_region,
        key_region=key_region,
        locals=tuple(locals_),
        fallback_count=fallbacks,
    )


def _overlapping_crop(
    height: int,
    width: int,
    query_region: CropRegion,
    config: AugmentationConfig,
    overlap_threshold: float,
    generator: torch.Generator,
) -> CropRegion | None:
    for _ in range(config.max_overlap_retries):
        region = sample_crop(height, width, config.local_scale, config.aspect_ratio, generator)
        if region.iou(query_region) >= overlap_threshold:
            return region
    return None


class FantasyViewDataset(Dataset):
    """Expands every sample into its virtual samples and builds one view bundle per variant.

    Each item draws from a generator seeded by (seed, epoch, sample index), so the
    views do not depend on how many loader workers prefetch them.
    """

    def __init__(
        self,
        samples: SampleSet,
        fantasy: FantasySet,
        config: AugmentationConfig,
        *,
        n_local: int,
        overlap_threshold: float,
        seed: int,
    ) -> None:
        self.samples = samples
        self.fantasy = fantasy
        self.config = config
        self.n_local = n_local
        self.overlap_threshold = overlap_threshold
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict[str, Any]:
        sample = self.samples[index]
        generator = torch_generator(derive_seed(self.seed, self.epoch, index))
        queries: list[torch.Tensor] = []
        keys: list[torch.Tensor] = []
        locals_: list[torch.Tensor] = []
        virtual_labels: list[int] = []
        for variant in expand(sample, self.fantasy):
            bundle = make_views(
                Sample(image=variant.image, label=variant.real_label),
                self.config,
                self.n_local,
                self.overlap_threshold,
                generator,
            )
            queries.append(bundle.query)
            keys.append(bundle.key)
            if self.n_local:
                locals_.append(torch.stack([view.image for view in bundle.locals]))
            virtual_labels.append(variant.virtual_label)

        item: dict[str, Any] = {
            "query": torch.stack(queries),
            "key": torch.stack(keys),
            "virtual_labels": torch.tensor(virtual_labels, dtype=torch.long),
            "label": sample.label,
        }
        if self.n_local:
            item["locals"] = torch.stack(locals_)
        return item


def build_train_loader(
    samples: SampleSet,
    fantasy: FantasySet,
    config: AugmentationConfig,
    *,
    n_local: int,
    overlap_threshold: float,
    batch_size: int,
    seed: int,
    num_workers: int = 0,
) -> tuple[FantasyViewDataset, DataLoader]:
    dataset = FantasyViewDataset(
        samples,
        fantasy,
        config,
        n_local=n_local,
        overlap_threshold=overlap_threshold,
        seed=seed,
    )
    loader = DataLoader(
        dataset,
        batch_size=min(batch_size, len(dataset)),
        shuffle=True,
        # BatchNorm needs more than one value per channel.
        drop_last=len(dataset) > batch_size and len(dataset) % batch_size == 1,
        num_workers=num_workers,
        generator=torch_generator(derive_seed(seed, 3)),
        persistent_workers=False,
    )
    return dataset, loader
