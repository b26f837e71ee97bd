"""Virtual-class construction: the discrete transform set and its label algebra.

Images are ``C x H x W`` tensors. Rotations are counter-clockwise on the
spatial axes, so a 90 degree turn maps ``out[i][j] = in[j][W - 1 - i]``.
Channel permutations name the source channel of each output channel:
``GBR`` yields ``(G, B, R)``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import torch

from savc.core.errors import InvalidConfigError, InvalidInputError
from savc.schemas.enums import ChannelPermutation, FantasySetName
from savc.schemas.experiment import TransformDescriptor

_PERMUTATION_INDEX: dict[ChannelPermutation, tuple[int, int, int]] = {
    ChannelPermutation.RGB: (0, 1, 2),
    ChannelPermutation.GBR: (1, 2, 0),
    ChannelPermutation.BRG: (2, 0, 1),
}

_INVERSE_PERMUTATION: dict[ChannelPermutation, ChannelPermutation] = {
    ChannelPermutation.RGB: ChannelPermutation.RGB,
    ChannelPermutation.GBR: ChannelPermutation.BRG,
    ChannelPermutation.BRG: ChannelPermutation.GBR,
}


@dataclass(frozen=True)
class Sample:
    image: torch.Tensor
    label: int


@dataclass(frozen=True)
class VirtualSample:
    image: torch.Tensor
    real_label: int
    fantasy_index: int
    virtual_label: int


@dataclass(frozen=True)
class FantasySet:
    name: FantasySetName
    transforms: tuple[TransformDescriptor, ...]

    def __post_init__(self) -> None:
        if not self.transforms:
            raise InvalidConfigError("FantasySet must contain at least one transform")
        if not self.transforms[0].is_identity:
            raise InvalidConfigError("The first fantasy transform must be the identity")

    @property
    def size(self) -> int:
        return len(self.transforms)

    @property
    def has_rotation(self) -> bool:
        return any(descriptor.rotation != 0 for descriptor in self.transforms)

    def describe(self) -> list[dict[str, object]]:
        return [descriptor.model_dump(mode="json") for descriptor in self.transforms]


def _descriptors(rotations: Sequence[int], permutations: Sequence[ChannelPermutation]) -> tuple[TransformDescriptor, ...]:
    # Rotation-major order keeps the conditional prototype subsets reproducible.
    return tuple(
        TransformDescriptor(rotation=rotation, channel_permutation=permutation)
        for rotation in rotations
        for permutation in permutations
    )


_FANTASY_REGISTRY: dict[str, tuple[TransformDescriptor, ...]] = {
    FantasySetName.TWO_FOLD_ROTATIONS.value: _descriptors((0, 180), (ChannelPermutation.RGB,)),
    FantasySetName.FOUR_FOLD_ROTATIONS.value: _descriptors((0, 90, 180, 270), (ChannelPermutation.RGB,)),
    FantasySetName.TWELVE_AUGMENTATIONS.value: _descriptors(
        (0, 90, 180, 270),
        (ChannelPermutation.RGB, ChannelPermutation.GBR, ChannelPermutation.BRG),
    ),
}
_NAMED_SETS = frozenset(_FANTASY_REGISTRY)


def register_fantasy_set(name: str, descriptors: Sequence[TransformDescriptor]) -> None:
    if name in _FANTASY_REGISTRY or name == FantasySetName.CUSTOM.value:
        raise InvalidConfigError(f"Fantasy set {name!r} is already registered")
    FantasySet(name=FantasySetName.CUSTOM, transforms=tuple(descriptors))
    _FANTASY_REGISTRY[name] = tuple(descriptors)


def identity_fantasy_set() -> FantasySet:
    return FantasySet(name=FantasySetName.CUSTOM, transforms=(TransformDescriptor(),))


def build_fantasy_set(
    spec: FantasySetName | str | Sequence[TransformDescriptor | dict[str, object]],
) -> FantasySet:
    if isinstance(spec, (FantasySetName, str)):
        key = spec.value if isinstance(spec, FantasySetName) else spec
        descriptors = _FANTASY_REGISTRY.get(key)
        if descriptors is None:
            raise InvalidConfigError(f"Unknown fantasy set {key!r}")
        try:
            name = FantasySetName(key)
        except ValueError:
            name = FantasySetName.CUSTOM
        return FantasySet(name=name, transforms=descriptors)

    transforms = tuple(
        item if isinstance(item, TransformDescriptor) else TransformDescriptor.model_validate(item)
        for item in spec
    )
    for name, registered in _FANTASY_REGISTRY.items():
        if registered == transforms and name in _NAMED_SETS:
            return FantasySet(name=FantasySetName(name), transforms=transforms)
    return FantasySet(name=FantasySetName.CUSTOM, transforms=transforms)


def inverse_permutation(permutation: ChannelPermutation) -> ChannelPermutation:
    return _INVERSE_PERMUTATION[permutation]


def rotate(image: torch.Tensor, degrees: int) -> torch.Tensor:
    if degrees % 90 != 0:
        raise InvalidInputError(f"Rotation must be a multiple of 90 degrees, got {degrees}")
    turns = (degrees // 90) % 4
    if turns == 0:
        return image
    return torch.rot90(image, k=turns, dims=(-2, -1))


def permute_channels(image: torch.Tensor, permutation: ChannelPermutation) -> torch.Tensor:
    if permutation == ChannelPermutation.RGB:
        return image
    return image[..., list(_PERMUTATION_INDEX[permutation]), :, :]


def apply_transform(image: torch.Tensor, descriptor: TransformDescriptor) -> torch.Tensor:
    return permute_channels(rotate(image, descriptor.rotation), descriptor.channel_permutation)


def _validate_image(image: torch.Tensor, fantasy: FantasySet) -> None:
    if image.ndim < 3 or image.shape[-3] != 3:
        raise InvalidInputError(f"Expected a 3-channel image, got shape {tuple(image.shape)}")
    if fantasy.has_rotation and image.shape[-1] != image.shape[-2]:
        raise InvalidInputError(
            f"Rotation fantasy sets require square images, got {image.shape[-2]}x{image.shape[-1]}"
        )


def expand(sample: Sample, fantasy: FantasySet) -> list[VirtualSample]:
    _validate_image(sample.image, fantasy)
    size = fantasy.size
    return [
        VirtualSample(
            image=sample.image if index == 0 else apply_transform(sample.image, descriptor).contiguous(),
            real_label=sample.label,
            fantasy_index=index,
            virtual_label=virtual_label(sample.label, index, size),
        )
        for index, descriptor in enumerate(fantasy.transforms)
    ]


def expand_batch(images: torch.Tensor, fantasy: FantasySet) -> torch.Tensor:
    """Stack the M variants of a ``B x C x H x W`` batch into ``M x B x C x H x W``."""
    _validate_image(images, fantasy)
    return torch.stack([apply_transform(images, descriptor) for descriptor in fantasy.transforms], dim=0)


def expand_labels(labels: torch.Tensor, fantasy_size: int) -> torch.Tensor:
    """Virtual labels ``M x B`` for real labels ``B``."""
    offsets = torch.arange(fantasy_size, dtype=labels.dtype, device=labels.device)
    return labels.unsqueeze(0) * fantasy_size + offsets.unsqueeze(1)


def virtual_label(y: int, m: int, fantasy_size: int) -> int:
    if fantasy_size < 1:
        raise InvalidConfigError(f"Fantasy size must be >= 1, got {fantasy_size}")
    if y < 0:
        raise InvalidInputError(f"Class id must be >= 0, got {y}")
    if not 0 <= m < fantasy_size:
        raise InvalidInputError(f"Fantasy index {m} outside [0, {fantasy_size})")
    return y * fantasy_size + m


def original_label(virtual_y: int, fantasy_size: int) -> tuple[int, int]:
    if fantasy_size <= 0:
        raise InvalidConfigError(f"Fantasy size must be >= 1, got {fantasy_size}")
    if virtual_y < 0:
        raise InvalidInputError(f"Virtual label must be >= 0, got {virtual_y}")
    return divmod(virtual_y, fantasy_size)
