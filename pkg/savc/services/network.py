"""Encoder, projector, virtual-class classifier and the momentum key copy."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
import copy
import logging

import torch
from torch import nn

from savc.core.errors import InvalidConfigError, InvalidInputError
from savc.schemas.experiment import EncoderConfig

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-8

EncoderFactory = Callable[[EncoderConfig], nn.Module]
_ENCODER_REGISTRY: dict[str, EncoderFactory] = {}


def register_encoder(name: str) -> Callable[[EncoderFactory], EncoderFactory]:
    def decorator(factory: EncoderFactory) -> EncoderFactory:
        if name in _ENCODER_REGISTRY:
            raise InvalidConfigError(f"Encoder {name!r} is already registered")
        _ENCODER_REGISTRY[name] = factory
        return factory

    return decorator


def available_encoders() -> list[str]:
    return sorted(_ENCODER_REGISTRY)


def build_encoder(config: EncoderConfig) -> nn.Module:
    factory = _ENCODER_REGISTRY.get(config.architecture)
    if factory is None:
        raise InvalidConfigError(
            f"Unknown encoder {config.architecture!r}; available: {', '.join(available_encoders())}"
        )
    return factory(config)


def _conv_block(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class SmallConvEncoder(nn.Module):
    """Four strided conv blocks followed by global average pooling."""

    def __init__(self, feature_dim: int) -> None:
        super().__init__()
        widths = (feature_dim // 4, feature_dim // 2, feature_dim, feature_dim)
        self.layer1 = _conv_block(3, widths[0], stride=1)
        self.layer2 = _conv_block(widths[0], widths[1], stride=2)
        self.layer3 = _conv_block(widths[1], widths[2], stride=2)
        self.layer4 = _conv_block(widths[2], widths[3], stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(self.pool(x), 1)


class _ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.LeakyReLU(0.1),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.LeakyReLU(0.1),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.activation = nn.LeakyReLU(0.1)
        self.pool = nn.MaxPool2d(2, ceil_mode=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.activation(self.body(x) + self.shortcut(x)))


class ResNet12Encoder(nn.Module):
    def __init__(self, feature_dim: int) -> None:
        super().__init__()
        widths = (feature_dim // 4, feature_dim // 2, feature_dim, feature_dim)
        self.layer1 = _ResidualBlock(3, widths[0])
        self.layer2 = _ResidualBlock(widths[0], widths[1])
        self.layer3 = _ResidualBlock(widths[1], widths[2])
        self.layer4 = _ResidualBlock(widths[2], widths[3])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(self.pool(x), 1)


@register_encoder("small_conv")
def _small_conv(config: EncoderConfig) -> nn.Module:
    return SmallConvEncoder(config.feature_dim)


@register_encoder("resnet12")
def _resnet12(config: EncoderConfig) -> nn.Module:
    return ResNet12Encoder(config.feature_dim)


def l2_normalize(x: torch.Tensor, eps: float = NORMALIZE_EPS) -> torch.Tensor:
    """Row-wise unit normalization; rows with norm below ``eps`` map to the first basis vector."""
    norms = x.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(x)
    fallback[..., 0] = 1.0
    return torch.where(norms > eps, x / norms.clamp_min(eps), fallback)


class QueryNetwork(nn.Module):
    """Feature extractor f, projector h and the bias-free virtual-class classifier."""

    def __init__(
        self,
        config: EncoderConfig,
        *,
        num_virtual_classes: int,
        resolutions: Sequence[int],
    ) -> None:
        super().__init__()
        if num_virtual_classes <= 0:
            raise InvalidConfigError("num_virtual_classes must be > 0")
        self.config = config
        self.resolutions = tuple(sorted(set(resolutions)))
        self.encoder = build_encoder(config)
        self.projector = nn.Sequential(
            nn.Linear(config.feature_dim, config.feature_dim),
            nn.ReLU(inplace=True),
            nn.Linear(config.feature_dim, config.projection_dim),
        )
        self.classifier = nn.Linear(config.feature_dim, num_virtual_classes, bias=False)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def num_virtual_classes(self) -> int:
        return self.classifier.out_features

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images, self.resolutions)
        return self.encoder(images)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise InvalidInputError(f"Expected batch x {self.feature_dim} features, got {tuple(features.shape)}")
        return l2_normalize(self.projector(features))

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise InvalidInputError(f"Expected batch x {self.feature_dim} features, got {tuple(features.shape)}")
        return self.classifier(features)


class KeyNetwork(nn.Module):
    """Momentum copy of g = h o f; receives no gradient."""

    def __init__(self, query: QueryNetwork) -> None:
        super().__init__()
        self.resolutions = query.resolutions
        self.encoder = copy.deepcopy(query.encoder)
        self.projector = copy.deepcopy(query.projector)
        for parameter in self.parameters():
            parameter.requires_grad = False

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images, self.resolutions)
        return l2_normalize(self.projector(self.encoder(images)))


def _check_images(images: torch.Tensor, resolutions: Sequence[int]) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvalidInputError(f"Expected batch x 3 x H x W images, got {tuple(images.shape)}")
    if images.shape[-1] != images.shape[-2] or images.shape[-1] not in resolutions:
        raise InvalidInputError(
            f"Image resolution {images.shape[-2]}x{images.shape[-1]} not in configured {list(resolutions)}"
        )


class ModelPair(nn.Module):
    def __init__(self, query: QueryNetwork, *, momentum: float = 0.999) -> None:
        super().__init__()
        _check_momentum(momentum)
        self.query = query
        self.key = KeyNetwork(query)
        self.momentum = momentum

    def key_parameter_pairs(self) -> Iterable[tuple[str, nn.Parameter, nn.Parameter]]:
        query_parameters = dict(self.query.named_parameters())
        for name, key_parameter in self.key.named_parameters():
            yield name, query_parameters[name], key_parameter


def build_model_pair(
    config: EncoderConfig,
    *,
    num_base_classes: int,
    fantasy_size: int,
    resolution: int,
    local_resolution: int | None = None,
    momentum: float = 0.999,
) -> ModelPair:
    resolutions = [resolution] if local_resolution is None else [resolution, local_resolution]
    query = QueryNetwork(config, num_virtual_classes=num_base_classes * fantasy_size, resolutions=resolutions)
    logger.info(
        "Built %s encoder (d=%d, p=%d) with %d virtual classes",
        config.architecture,
        config.feature_dim,
        config.projection_dim,
        query.num_virtual_classes,
    )
    return ModelPair(query, momentum=momentum)


def _check_momentum(momentum: float) -> None:
    if not 0.0 <= momentum <= 1.0:
        raise InvalidConfigError(f"Momentum must lie in [0, 1], got {momentum}")


def in_layers(name: str, layers: Sequence[str] | None) -> bool:
    if layers is None:
        return True
    return any(name == layer or name.startswith(f"{layer}.") for layer in layers)


@torch.no_grad()
def momentum_update(pair: ModelPair, momentum: float | None = None, *, layers: Sequence[str] | None = None) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, optionally restricted to named layers."""
    value = pair.momentum if momentum is None else momentum
    _check_momentum(value)
    for name, query_parameter, key_parameter in pair.key_parameter_pairs():
        if in_layers(name, layers):
            key_parameter.mul_(value).add_(query_parameter.detach(), alpha=1.0 - value)


def layer_names(network: QueryNetwork) -> list[str]:
    encoder_layers = [
        f"encoder.{name}" for name, module in network.encoder.named_children() if any(True for _ in module.parameters())
    ]
    return [*encoder_layers, "projector", "classifier"]


def validate_layers(network: QueryNetwork, layers: Sequence[str]) -> list[str]:
    known = layer_names(network)
    unknown = [layer for layer in layers if layer not in known]
    if unknown:
        raise InvalidConfigError(f"Unknown trainable layers {unknown}; known layers: {known}", details={"known": known})
    return list(layers)


@torch.no_grad()
def extract_features(
    network: QueryNetwork,
    images: torch.Tensor,
    *,
    batch_size: int = 256,
    transform: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Extractor outputs ``f(x)`` for ``N x C x H x W`` images, in evaluation mode."""
    was_training = network.training
    network.eval()
    try:
        chunks = []
        for start in range(0, len(images), batch_size):
            batch = images[start : start + batch_size]
            if transform is not None:
                batch = transform(batch)
            chunks.append(network.encode(batch.contiguous()))
        if not chunks:
            return torch.zeros(0, network.feature_dim)
        return torch.cat(chunks, dim=0)
    finally:
        network.train(was_training)
