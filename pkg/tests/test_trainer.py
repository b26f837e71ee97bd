from __future__ import annotations

from dataclasses import replace
from pathlib import Path
import statistics

import pytest
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import CosineAnnealingLR

from savc.core.errors import InvalidConfigError, InvalidStateError, TrainingDivergenceError
from savc.core.reproducibility import derive_seed
from savc.schemas.experiment import (
    AugmentationConfig,
    ContrastConfig,
    EncoderConfig,
    LossWeights,
    TrainConfig,
)
from savc.schemas.reports import StepMetrics
from savc.services.contrast import ContrastQueue
from savc.services.fantasy import FantasySet, build_fantasy_set, identity_fantasy_set
from savc.services.network import ModelPair, build_model_pair, in_layers
from savc.services.prototypes import PrototypeBank, compute_prototypes
from savc.services.samples import SampleSet
from savc.services.synthetic import synthetic_dataset
from savc.services.trainer import (
    MetricsStream,
    TrainingSettings,
    _flatten_variants,
    cosine_classifier,
    finetune_incremental,
    parameter_checksums,
    train_base,
    train_step,
)
from savc.services.views import build_train_loader

TRAINABLE = ["encoder.layer4", "projector"]


def _settings(**train_overrides) -> TrainingSettings:
    train = {"base_lr": 0.05, "base_epochs": 1, "incremental_epochs": 2, "batch_size": 8, "eval_batch_size": 16}
    train.update(train_overrides)
    return TrainingSettings(
        weights=LossWeights(),
        augmentation=AugmentationConfig(n_local=1, local_resolution=8),
        contrast=ContrastConfig(queue_length=64, key_momentum=0.9),
        train=TrainConfig(**train),
        seed=0,
    )


def _pair(num_base_classes: int = 3, fantasy_size: int = 2) -> ModelPair:
    torch.manual_seed(0)
    return build_model_pair(
        EncoderConfig(feature_dim=16, projection_dim=8),
        num_base_classes=num_base_classes,
        fantasy_size=fantasy_size,
        resolution=16,
        local_resolution=8,
        momentum=0.9,
    )


def _data() -> tuple[SampleSet, SampleSet]:
    pool = synthetic_dataset(5, 4, 16, seed=0)
    base = pool.for_classes([0, 1, 2])
    novel = pool.subset([12, 13, 16, 17])
    return base, novel


def _fantasy() -> FantasySet:
    return build_fantasy_set("two_fold_rotations")


def _first_batch(samples: SampleSet, settings: TrainingSettings) -> dict:
    _, loader = build_train_loader(
        samples,
        _fantasy(),
        settings.augmentation,
        n_local=settings.n_local,
        overlap_threshold=0.3,
        batch_size=settings.train.batch_size,
        seed=0,
    )
    return next(iter(loader))


def _base_trained() -> tuple[ModelPair, ContrastQueue, PrototypeBank, SampleSet, TrainingSettings]:
    base, novel = _data()
    settings = _settings(trainable_layers=TRAINABLE)
    pair = _pair()
    _, queue = train_base(pair, base, _fantasy(), settings)
    bank = PrototypeBank(2, 16)
    bank.extend(compute_prototypes(pair.query, base, [0, 1, 2], 0, _fantasy()))
    return pair, queue, bank, novel, settings


def test_flatten_variants_is_variant_major() -> None:
    views = torch.arange(6).reshape(3, 2)
    assert _flatten_variants(views).tolist() == [0, 2, 4, 1, 3, 5]


def test_train_step_updates_query_key_and_queue() -> None:
    settings = _settings()
    pair = _pair()
    base, _ = _data()
    batch = _first_batch(base, settings)
    queue = ContrastQueue(64, 8)
    optimizer = torch.optim.SGD([p for p in pair.query.parameters() if p.requires_grad], lr=0.1)
    query_before = parameter_checksums(pair.query)
    key_before = [parameter.clone() for parameter in pair.key.parameters()]

    pair.train()
    losses = train_step(pair, queue, batch, classify=pair.query.classify, optimizer=optimizer, settings=settings)

    assert len(queue) == 8 * 2
    assert losses.cls > 0.0
    assert losses.total == pytest.approx(losses.cls + 0.2 * losses.cont_global + 0.8 * losses.cont_local, rel=1e-5)
    assert parameter_checksums(pair.query) != query_before
    assert any(not torch.equal(a, b) for a, b in zip(key_before, pair.key.parameters()))
    assert all(parameter.grad is None for parameter in pair.key.parameters())
    _, labels = queue.chronological()
    assert sorted(labels.tolist()) == sorted(batch["virtual_labels"].reshape(-1).tolist())


def test_train_step_can_freeze_the_queue() -> None:
    settings = _settings()
    pair = _pair()
    base, _ = _data()
    queue = ContrastQueue(64, 8)
    optimizer = torch.optim.SGD(pair.query.parameters(), lr=0.1)
    pair.train()
    train_step(
        pair, queue, _first_batch(base, settings), classify=pair.query.classify, optimizer=optimizer,
        settings=settings, freeze_queue=True,
    )
    assert len(queue) == 0


def test_train_step_without_contrast_skips_the_key_network() -> None:
    settings = _settings()
    settings = TrainingSettings(
        weights=LossWeights(alpha=0.0, beta=0.0),
        augmentation=settings.augmentation,
        contrast=settings.contrast,
        train=settings.train,
        seed=0,
    )
    pair = _pair()
    base, _ = _data()
    queue = ContrastQueue(64, 8)
    optimizer = torch.optim.SGD(pair.query.parameters(), lr=0.1)
    pair.train()
    losses = train_step(
        pair, queue, _first_batch(base, settings), classify=pair.query.classify, optimizer=optimizer, settings=settings
    )
    assert len(queue) == 0
    assert losses.cont_global == 0.0 and losses.cont_local == 0.0
    assert losses.total == pytest.approx(losses.cls)


def test_train_base_runs_every_batch_and_streams_metrics(tmp_path: Path) -> None:
    base, _ = _data()
    pair = _pair()
    path = tmp_path / "metrics.jsonl"
    with MetricsStream(path) as stream:
        outcome, queue = train_base(pair, base, _fantasy(), _settings(), stream=stream)

    assert outcome.steps == 2
    assert len(outcome.losses) == 2
    assert len(queue) == 12 * 2
    records = [StepMetrics.model_validate_json(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert [record.step for record in records] == [0, 1]
    assert records[0].session == 0
    assert not pair.training


def test_train_base_checks_classifier_width_and_queue_capacity() -> None:
    base, _ = _data()
    with pytest.raises(InvalidStateError):
        train_base(_pair(num_base_classes=4), base, _fantasy(), _settings())

    settings = _settings()
    small_queue = TrainingSettings(
        weights=settings.weights,
        augmentation=settings.augmentation,
        contrast=ContrastConfig(queue_length=16),
        train=settings.train,
        seed=0,
    )
    with pytest.raises(InvalidConfigError):
        train_base(_pair(), base, _fantasy(), small_queue)


def test_divergence_carries_the_last_good_state() -> None:
    base, _ = _data()
    pair = _pair()
    with torch.no_grad():
        pair.query.classifier.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergenceError) as excinfo:
        train_base(pair, base, _fantasy(), _settings())
    assert excinfo.value.step == 0
    assert excinfo.value.last_good_state is not None
    assert {"model", "queue"} <= set(excinfo.value.last_good_state)


def test_base_training_lowers_the_loss_over_two_hundred_steps() -> None:
    samples = synthetic_dataset(4, 10, 16, seed=0)
    settings = _settings(base_epochs=40)
    outcome, _ = train_base(_pair(num_base_classes=4), samples, _fantasy(), settings)

    assert outcome.steps == 200
    totals = [losses.total for losses in outcome.losses]
    assert statistics.median(totals[-10:]) < statistics.median(totals[:10])


def test_single_variant_without_contrast_matches_plain_cross_entropy() -> None:
    base, _ = _data()
    fantasy = identity_fantasy_set()
    settings = replace(
        _settings(base_epochs=2),
        weights=LossWeights(alpha=0.0, beta=0.0),
        augmentation=AugmentationConfig(n_local=0, local_resolution=8),
    )
    trained = _pair(fantasy_size=1)
    outcome, _ = train_base(trained, base, fantasy, settings)

    reference = _pair(fantasy_size=1)
    reference.train()
    dataset, loader = build_train_loader(
        base,
        fantasy,
        settings.augmentation,
        n_local=0,
        overlap_threshold=settings.augmentation.overlap_threshold,
        batch_size=settings.train.batch_size,
        seed=derive_seed(settings.seed, 0),
    )
    optimizer = torch.optim.SGD(
        [parameter for parameter in reference.query.parameters() if parameter.requires_grad],
        lr=settings.train.base_lr,
        momentum=settings.train.optimizer_momentum,
        weight_decay=settings.train.weight_decay,
    )
    scheduler = CosineAnnealingLR(optimizer, T_max=settings.train.base_epochs * len(loader))
    plain_losses = []
    for epoch in range(settings.train.base_epochs):
        dataset.set_epoch(epoch)
        for batch in loader:
            logits = reference.query.classify(reference.query.encode(batch["query"][:, 0]))
            loss = F.cross_entropy(logits, batch["label"])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            plain_losses.append(float(loss))

    assert len(plain_losses) == outcome.steps
    assert [losses.cls for losses in outcome.losses] == pytest.approx(plain_losses, abs=1e-5)
    assert [losses.total for losses in outcome.losses] == pytest.approx(plain_losses, abs=1e-5)
    trained_state = trained.query.state_dict()
    for name, tensor in reference.query.state_dict().items():
        assert torch.allclose(trained_state[name].double(), tensor.double(), atol=1e-5), name


def test_cosine_classifier_scales_cosine_similarity() -> None:
    classify = cosine_classifier(torch.tensor([[2.0, 0.0], [0.0, 1.0]]), 16.0)
    logits = classify(torch.tensor([[3.0, 0.0]]))
    assert torch.allclose(logits, torch.tensor([[16.0, 0.0]]))


def test_finetune_leaves_frozen_layers_untouched() -> None:
    pair, queue, bank, novel, settings = _base_trained()
    query_before = parameter_checksums(pair.query)
    key_before = parameter_checksums(pair.key)

    outcome = finetune_incremental(
        pair, novel, queue, _fantasy(), settings, bank=bank, session=1, class_ids=[3, 4]
    )

    assert outcome.steps == 2
    assert not outcome.skipped
    query_after = parameter_checksums(pair.query)
    key_after = parameter_checksums(pair.key)
    for name, checksum in query_before.items():
        if in_layers(name, TRAINABLE):
            continue
        assert query_after[name] == checksum, name
    for name, checksum in key_before.items():
        if not in_layers(name, TRAINABLE):
            assert key_after[name] == checksum, name
    changed = [name for name in query_before if in_layers(name, TRAINABLE) and query_after[name] != query_before[name]]
    assert any(name.startswith("encoder.layer4.") for name in changed)
    assert all(parameter.requires_grad for parameter in pair.query.parameters())
    assert not pair.training


def test_finetune_without_trainable_layers_is_skipped() -> None:
    pair, queue, bank, novel, _ = _base_trained()
    settings = _settings(trainable_layers=[])
    before = parameter_checksums(pair)
    outcome = finetune_incremental(pair, novel, queue, _fantasy(), settings, bank=bank, session=1, class_ids=[3, 4])
    assert outcome.skipped
    assert outcome.steps == 0
    assert parameter_checksums(pair) == before


def test_finetune_validates_session_and_layers() -> None:
    pair, queue, bank, novel, _ = _base_trained()
    with pytest.raises(InvalidStateError):
        finetune_incremental(
            pair, novel, queue, _fantasy(), _settings(trainable_layers=TRAINABLE), bank=bank, session=0, class_ids=[3, 4]
        )
    with pytest.raises(InvalidConfigError):
        finetune_incremental(
            pair, novel, queue, _fantasy(), _settings(trainable_layers=["head"]), bank=bank, session=1, class_ids=[3, 4]
        )


def test_finetune_does_not_modify_the_bank() -> None:
    pair, queue, bank, novel, settings = _base_trained()
    finetune_incremental(pair, novel, queue, _fantasy(), settings, bank=bank, session=1, class_ids=[3, 4])
    assert bank.sessions() == [0]
    assert len(bank) == 3 * 2


def test_metrics_stream_without_path_is_a_no_op() -> None:
    with MetricsStream(None) as stream:
        stream.write(StepMetrics(session=0, epoch=0, step=0, lr=0.1, cls=1.0, cont_global=0.0, cont_local=0.0, total=1.0))
