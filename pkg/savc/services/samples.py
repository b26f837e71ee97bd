from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import torch

from savc.core.errors import InvalidInputError
from savc.services.fantasy import Sample


@dataclass(frozen=True)
class SampleSet:
    """Labelled images held as one ``N x C x H x W`` tensor (uint8 or float in [0, 1])."""

    images: torch.Tensor
    labels: torch.Tensor
    sample_ids: torch.Tensor

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise InvalidInputError(f"Expected N x C x H x W images, got shape {tuple(self.images.shape)}")
        if not (len(self.images) == len(self.labels) == len(self.sample_ids)):
            raise InvalidInputError("images, labels and sample_ids must have the same length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> Sample:
        return Sample(image=self.image(index), label=int(self.labels[index]))

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def image(self, index: int) -> torch.Tensor:
        return as_float(self.images[index])

    def float_images(self) -> torch.Tensor:
        return as_float(self.images)

    def classes(self) -> list[int]:
        return sorted({int(label) for label in self.labels.tolist()})

    def subset(self, indices: Sequence[int] | torch.Tensor) -> "SampleSet":
        index = torch.as_tensor(indices, dtype=torch.long)
        return SampleSet(images=self.images[index], labels=self.labels[index], sample_ids=self.sample_ids[index])

    def for_classes(self, class_ids: Sequence[int]) -> "SampleSet":
        mask = torch.isin(self.labels, torch.as_tensor(list(class_ids), dtype=self.labels.dtype))
        return self.subset(torch.nonzero(mask, as_tuple=False).flatten())

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            images=torch.cat([self.images, other.images]),
            labels=torch.cat([self.labels, other.labels]),
            sample_ids=torch.cat([self.sample_ids, other.sample_ids]),
        )


def as_float(images: torch.Tensor) -> torch.Tensor:
    if images.dtype == torch.uint8:
        return images.to(torch.float32) / 255.0
    return images.to(torch.float32)
