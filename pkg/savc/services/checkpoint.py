"""Per-session checkpoint archive: model pair, queue, prototype bank and the resolved config."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Any

import torch

from savc.core.errors import DatasetIOError, InvalidStateError
from savc.schemas.experiment import ExperimentConfig
from savc.services.contrast import ContrastQueue
from savc.services.fantasy import FantasySet, build_fantasy_set
from savc.services.network import ModelPair, build_model_pair
from savc.services.prototypes import PrototypeBank

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    session: int
    config: ExperimentConfig
    config_hash: str
    fantasy: FantasySet
    pair: ModelPair
    queue: ContrastQueue
    bank: PrototypeBank
    num_base_classes: int
    resolution: int


def save_checkpoint(
    path: Path,
    *,
    session: int,
    config: ExperimentConfig,
    config_hash: str,
    fantasy: FantasySet,
    pair: ModelPair,
    queue: ContrastQueue,
    bank: PrototypeBank,
    num_base_classes: int,
    resolution: int,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "session": session,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash,
        "fantasy": fantasy.describe(),
        "momentum": pair.momentum,
        "query": pair.query.state_dict(),
        "key": pair.key.state_dict(),
        "queue": queue.state_dict(),
        "bank": bank.state_dict(),
        "num_base_classes": num_base_classes,
        "resolution": resolution,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.debug("Saved session %d checkpoint to %s", session, path)


def load_checkpoint(path: Path) -> Checkpoint:
    if not path.exists():
        raise DatasetIOError(f"Missing checkpoint: {path}")
    payload: dict[str, Any] = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidStateError(f"Unsupported checkpoint version {payload.get('version')!r} in {path}")

    config = ExperimentConfig.model_validate(payload["config"])
    fantasy = build_fantasy_set(payload["fantasy"])
    local_resolution = None
    if config.augmentation.n_local > 0:
        local_resolution = config.augmentation.local_resolution or payload["resolution"] // 2
    pair = build_model_pair(
        config.encoder,
        num_base_classes=payload["num_base_classes"],
        fantasy_size=fantasy.size,
        resolution=payload["resolution"],
        local_resolution=local_resolution,
        momentum=payload["momentum"],
    )
    pair.query.load_state_dict(payload["query"])
    pair.key.load_state_dict(payload["key"])
    pair.eval()
    return Checkpoint(
        session=int(payload["session"]),
        config=config,
        config_hash=payload["config_hash"],
        fantasy=fantasy,
        pair=pair,
        queue=ContrastQueue.from_state_dict(payload["queue"]),
        bank=PrototypeBank.from_state_dict(payload["bank"]),
        num_base_classes=int(payload["num_base_classes"]),
        resolution=int(payload["resolution"]),
    )
