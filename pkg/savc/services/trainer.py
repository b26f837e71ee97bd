from __future__ import annotations

from collections.abc import Callable, Sequence
import copy
from dataclasses import dataclass, field
import hashlib
import logging
from pathlib import Path
from types import TracebackType
from typing import Any

import torch
from torch.optim import SGD
from torch.optim.lr_scheduler import CosineAnnealingLR

from savc.core.errors import InvalidConfigError, InvalidStateError, TrainingDivergenceError
from savc.core.reproducibility import derive_seed
from savc.schemas.experiment import AugmentationConfig, ContrastConfig, ExperimentConfig, LossWeights, TrainConfig
from savc.schemas.reports import StepMetrics
from savc.services.contrast import ContrastQueue, supervised_contrastive_loss
from savc.services.fantasy import FantasySet
from savc.services.network import ModelPair, l2_normalize, layer_names, momentum_update, validate_layers
from savc.services.objective import LossBreakdown, breakdown, ce_fantasy_loss, total_loss
from savc.services.prototypes import PrototypeBank, compute_prototypes, extend_classifier
from savc.services.samples import SampleSet
from savc.services.views import build_train_loader

logger = logging.getLogger(__name__)

Classifier = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class TrainingSettings:
    weights: LossWeights
    augmentation: AugmentationConfig
    contrast: ContrastConfig
    train: TrainConfig
    seed: int
    num_workers: int = 0

    @property
    def n_local(self) -> int:
        return self.augmentation.n_local

    @property
    def uses_contrast(self) -> bool:
        return self.weights.alpha > 0 or self.weights.beta > 0

    @classmethod
    def from_experiment(cls, config: ExperimentConfig, *, num_workers: int = 0) -> "TrainingSettings":
        return cls(
            weights=config.loss,
            augmentation=config.augmentation,
            contrast=config.contrast,
            train=config.train,
            seed=config.seed,
            num_workers=num_workers,
        )


@dataclass
class TrainingOutcome:
    session: int
    steps: int = 0
    losses: list[LossBreakdown] = field(default_factory=list)
    skipped: bool = False


class MetricsStream:
    """Append-only JSON-lines log of per-step loss components."""

    def __init__(self, path: Path | None) -> None:
        self.path = path
        self._handle = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = path.open("a", encoding="utf-8")

    def write(self, record: StepMetrics) -> None:
        if self._handle is None:
            return
        self._handle.write(record.model_dump_json() + "\n")
        self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "MetricsStream":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        self.close()


def snapshot_state(pair: ModelPair, queue: ContrastQueue) -> dict[str, Any]:
    return {"model": copy.deepcopy(pair.state_dict()), "queue": queue.state_dict()}


def _flatten_variants(views: torch.Tensor) -> torch.Tensor:
    # B x M x ... -> (M * B) x ..., variant-major.
    return views.transpose(0, 1).reshape(-1, *views.shape[2:])


def train_step(
    pair: ModelPair,
    queue: ContrastQueue,
    batch: dict[str, Any],
    *,
    classify: Classifier,
    optimizer: torch.optim.Optimizer,
    settings: TrainingSettings,
    momentum_layers: Sequence[str] | None = None,
    freeze_queue: bool = False,
    step: int | None = None,
) -> LossBreakdown:
    """One optimizer step: classification plus global and local contrast, then key update and enqueue."""
    virtual_labels = batch["virtual_labels"].transpose(0, 1)
    fantasy_size, batch_size = virtual_labels.shape
    flat_labels = virtual_labels.reshape(-1)

    features = pair.query.encode(_flatten_variants(batch["query"]))
    logits = classify(features).reshape(fantasy_size, batch_size, -1)
    cls = ce_fantasy_loss(logits, virtual_labels)

    cont_global: torch.Tensor | float = 0.0
    cont_local: torch.Tensor | float = 0.0
    keys = None
    if settings.uses_contrast:
        keys = pair.key.embed(_flatten_variants(batch["key"]))
        queue_features, queue_labels = (tensor.clone() for tensor in queue.contents())
        tau = settings.weights.tau
        if settings.weights.alpha > 0:
            queries = pair.query.project(features)
            cont_global = supervised_contrastive_loss(queries, keys, flat_labels, queue_features, queue_labels, tau)
        if settings.weights.beta > 0 and "locals" in batch:
            locals_ = batch["locals"].transpose(0, 1)
            n_local = locals_.shape[2]
            local_queries = pair.query.project(pair.query.encode(locals_.reshape(-1, *locals_.shape[3:])))
            cont_local = supervised_contrastive_loss(
                local_queries,
                keys.repeat_interleave(n_local, dim=0),
                flat_labels.repeat_interleave(n_local),
                queue_features,
                queue_labels,
                tau,
            )

    total = total_loss(cls, cont_global, cont_local, settings.weights, step=step)
    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        optimizer.step()

    momentum_update(pair, layers=momentum_layers)
    if keys is not None and not freeze_queue:
        queue.enqueue(keys, flat_labels)
    return breakdown(cls, cont_global, cont_local, total)


def _check_queue_capacity(queue: ContrastQueue, batch_size: int, fantasy: FantasySet) -> None:
    if batch_size * fantasy.size >= queue.length:
        raise InvalidConfigError(
            f"Queue length {queue.length} must exceed the keys per step ({batch_size} x {fantasy.size})",
            details={"queue_length": queue.length, "keys_per_step": batch_size * fantasy.size},
        )


def _run_epochs(
    pair: ModelPair,
    queue: ContrastQueue,
    samples: SampleSet,
    fantasy: FantasySet,
    settings: TrainingSettings,
    *,
    session: int,
    epochs: int,
    lr: float,
    classify: Classifier,
    momentum_layers: Sequence[str] | None,
    freeze_queue: bool,
    stream: MetricsStream | None,
) -> TrainingOutcome:
    dataset, loader = build_train_loader(
        samples,
        fantasy,
        settings.augmentation,
        n_local=settings.n_local,
        overlap_threshold=settings.augmentation.overlap_threshold,
        batch_size=settings.train.batch_size,
        seed=derive_seed(settings.seed, session),
        num_workers=settings.num_workers,
    )
    _check_queue_capacity(queue, loader.batch_size or 1, fantasy)

    parameters = [parameter for parameter in pair.query.parameters() if parameter.requires_grad]
    if not parameters:
        raise InvalidStateError("No trainable parameters")
    optimizer = SGD(
        parameters,
        lr=lr,
        momentum=settings.train.optimizer_momentum,
        weight_decay=settings.train.weight_decay,
    )
    scheduler = CosineAnnealingLR(optimizer, T_max=max(1, epochs * len(loader)))

    outcome = TrainingOutcome(session=session)
    last_good = snapshot_state(pair, queue)
    for epoch in range(epochs):
        dataset.set_epoch(epoch)
        for batch in loader:
            current_lr = optimizer.param_groups[0]["lr"]
            try:
                losses = train_step(
                    pair,
                    queue,
                    batch,
                    classify=classify,
                    optimizer=optimizer,
                    settings=settings,
                    momentum_layers=momentum_layers,
                    freeze_queue=freeze_queue,
                    step=outcome.steps,
                )
            except TrainingDivergenceError as exc:
                logger.error("Session %d diverged at step %d: %s", session, outcome.steps, exc.message)
                raise TrainingDivergenceError(exc.message, last_good_state=last_good, step=outcome.steps) from exc
            scheduler.step()
            outcome.losses.append(losses)
            if stream is not None:
                stream.write(
                    StepMetrics(session=session, epoch=epoch, step=outcome.steps, lr=current_lr, **losses.as_dict())
                )
            outcome.steps += 1
        last_good = snapshot_state(pair, queue)
        logger.info(
            "Session %d epoch %d/%d: total=%.4f",
            session,
            epoch + 1,
            epochs,
            outcome.losses[-1].total if outcome.losses else float("nan"),
        )
    return outcome


def train_base(
    pair: ModelPair,
    samples: SampleSet,
    fantasy: FantasySet,
    settings: TrainingSettings,
    *,
    queue: ContrastQueue | None = None,
    stream: MetricsStream | None = None,
) -> tuple[TrainingOutcome, ContrastQueue]:
    """Train every layer on the base session with the linear virtual-class head."""
    expected = len(samples.classes()) * fantasy.size
    if pair.query.num_virtual_classes != expected:
        raise InvalidStateError(
            f"Classifier has {pair.query.num_virtual_classes} outputs, base session needs {expected}"
        )
    queue = queue or ContrastQueue(settings.contrast.queue_length, pair.query.config.projection_dim)
    _set_trainable(pair, None)
    pair.train()
    outcome = _run_epochs(
        pair,
        queue,
        samples,
        fantasy,
        settings,
        session=0,
        epochs=settings.train.base_epochs,
        lr=settings.train.base_lr,
        classify=pair.query.classify,
        momentum_layers=None,
        freeze_queue=False,
        stream=stream,
    )
    pair.eval()
    return outcome, queue


def cosine_classifier(prototypes: torch.Tensor, scale: float) -> Classifier:
    weights = l2_normalize(prototypes.detach().to(torch.float32))

    def classify(features: torch.Tensor) -> torch.Tensor:
        return scale * l2_normalize(features) @ weights.T

    return classify


def _set_trainable(pair: ModelPair, layers: Sequence[str] | None) -> None:
    """Freeze every query layer outside ``layers`` and keep frozen modules in eval mode."""
    for name in layer_names(pair.query):
        trainable = layers is None or name in layers
        query_module = pair.query.get_submodule(name)
        query_module.train(trainable)
        for parameter in query_module.parameters():
            parameter.requires_grad = trainable
        if name != "classifier":
            pair.key.get_submodule(name).train(trainable)


def finetune_incremental(
    pair: ModelPair,
    samples: SampleSet,
    queue: ContrastQueue,
    fantasy: FantasySet,
    settings: TrainingSettings,
    *,
    bank: PrototypeBank,
    session: int,
    class_ids: Sequence[int],
    stream: MetricsStream | None = None,
) -> TrainingOutcome:
    """Finetune only the configured layers on a few-shot session.

    Classification uses a cosine head over every encountered virtual class, built
    from the bank plus this session's prototypes under the current extractor.
    """
    if session < 1:
        raise InvalidStateError("Incremental finetuning starts at session 1")
    layers = settings.train.trainable_layers
    if not layers:
        logger.warning("Session %d: no trainable layers configured; finetuning skipped", session)
        return TrainingOutcome(session=session, skipped=True)
    validate_layers(pair.query, layers)

    pair.eval()
    current = compute_prototypes(
        pair.query,
        samples,
        class_ids,
        session,
        fantasy,
        batch_size=settings.train.eval_batch_size,
        normalize_features=settings.train.normalize_prototype_features,
    )
    head = cosine_classifier(
        extend_classifier(bank, current).virtual_class_matrix(), settings.train.finetune_logit_scale
    )

    pair.train()
    _set_trainable(pair, layers)
    try:
        outcome = _run_epochs(
            pair,
            queue,
            samples,
            fantasy,
            settings,
            session=session,
            epochs=settings.train.incremental_epochs,
            lr=settings.train.effective_incremental_lr,
            classify=head,
            momentum_layers=layers,
            freeze_queue=settings.contrast.freeze_queue_during_finetune,
            stream=stream,
        )
    finally:
        _set_trainable(pair, None)
        pair.eval()
    return outcome


def parameter_checksums(module: torch.nn.Module) -> dict[str, str]:
    """Exact per-tensor fingerprints of parameters and buffers."""
    checksums = {}
    for name, tensor in [*module.named_parameters(), *module.named_buffers()]:
        data = tensor.detach().cpu().contiguous().numpy().tobytes()
        checksums[name] = hashlib.sha256(data).hexdigest()
    return checksums
