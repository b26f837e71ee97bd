"""Experiment orchestration: config resolution, the session loop, reports and run comparison.

Run directory layout::

    <output_dir>/
      manifest.json  splits.json  metrics.jsonl  accuracy.csv  session_table.json
      FAILED.json  last_good.pt          (only after divergence)
      sessions/session_00/
        report.json  separation.json  predictions.csv  confusion.csv
        cdf_inter.csv  cdf_intra.csv  checkpoint.pt
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
import hashlib
import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import ValidationError
import torch

from savc.core.config import Settings, get_settings
from savc.core.constants import (
    ACCURACY_FILE,
    CDF_INTER_FILE,
    CDF_INTRA_FILE,
    CHECKPOINT_FILE,
    CONFUSION_FILE,
    FAILURE_MARKER_FILE,
    MANIFEST_FILE,
    METRICS_STREAM_FILE,
    PREDICTIONS_FILE,
    SEPARATION_FILE,
    SERVICE_NAME,
    SESSION_REPORT_FILE,
    SESSION_TABLE_FILE,
    SESSIONS_DIR,
    SPLITS_FILE,
    session_dir_name,
)
from savc.core.errors import (
    ConfigSchemaError,
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    TrainingDivergenceError,
    error_response,
)
from savc.core.reproducibility import derive_seed, seed_everything
from savc.schemas.experiment import ExperimentConfig, TransformDescriptor
from savc.schemas.reports import ComparisonRow, ComparisonTable, RunManifest, SessionReport, SessionResult
from savc.schemas.session import SessionSpec
from savc.services.checkpoint import load_checkpoint, save_checkpoint
from savc.services.contrast import ContrastQueue
from savc.services.fantasy import FantasySet, apply_transform, build_fantasy_set, expand_labels
from savc.services.inference import PredictionBatch, confusion_matrix, predict_samples, write_predictions
from savc.services.metrics import cdf_export, embedding_dump, separation_report, session_table, write_confusion
from savc.services.network import ModelPair, build_model_pair, extract_features
from savc.services.prototypes import PrototypeBank, compute_prototypes
from savc.services.samples import SampleSet
from savc.services.sessions import SessionSplit, benchmark_resolution, build_schedule, build_sessions
from savc.services.trainer import MetricsStream, TrainingSettings, finetune_incremental, train_base

logger = logging.getLogger(__name__)

_HASH_EXCLUDED_FIELDS = {"name", "output_dir", "dataset_root", "toggles"}


def _set_dotted(target: dict[str, Any], dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = target
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise InvalidConfigError(f"Cannot override {dotted_key!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(assignment: str) -> tuple[str, Any]:
    """``dotted.key=<json>``; values that are not valid JSON are taken as strings."""
    key, separator, raw = assignment.partition("=")
    if not separator or not key.strip():
        raise InvalidConfigError(f"Override {assignment!r} must look like dotted.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_experiment_config(raw: Mapping[str, Any], overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    document = json.loads(json.dumps(raw))
    for key, value in (overrides or {}).items():
        _set_dotted(document, key, value)
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigSchemaError.from_validation_error(exc) from exc


def load_experiment_config(path: Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    if not path.exists():
        raise InvalidConfigError(f"Config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"Config file {path} must contain a JSON object")
    return build_experiment_config(raw, overrides)


def resolve_config(config: ExperimentConfig) -> ExperimentConfig:
    """Apply the ablation toggles; each toggle only touches its own parameters."""
    loss = config.loss
    augmentation = config.augmentation
    train = config.train
    fantasy: Any = config.fantasy
    toggles = config.toggles

    if not toggles.scl:
        loss = loss.model_copy(update={"alpha": 0.0, "beta": 0.0})
    if not toggles.fantasy:
        fantasy = [TransformDescriptor()]
    if not toggles.multicrop:
        loss = loss.model_copy(update={"beta": 0.0})
        augmentation = augmentation.model_copy(update={"n_local": 0})
    if not toggles.finetune:
        train = train.model_copy(update={"trainable_layers": []})

    return config.model_copy(
        update={"loss": loss, "augmentation": augmentation, "train": train, "fantasy": fantasy}
    )


def config_hash(config: ExperimentConfig) -> str:
    resolved = resolve_config(config)
    document = resolved.model_dump(mode="json", exclude=_HASH_EXCLUDED_FIELDS)
    document["fantasy"] = build_fantasy_set(resolved.fantasy).describe()
    document["train"]["incremental_lr"] = resolved.train.effective_incremental_lr
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunPlan:
    config: ExperimentConfig
    config_hash: str
    fantasy: FantasySet
    schedule: list[SessionSpec]
    output_dir: Path

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.config.name,
            "benchmark": self.config.benchmark.value,
            "config_hash": self.config_hash,
            "fantasy_size": self.fantasy.size,
            "resolution": benchmark_resolution(self.config.benchmark, self.config.synthetic),
            "output_dir": str(self.output_dir),
            "sessions": [
                {"index": spec.index, "ways": spec.ways, "shots": spec.shots, "classes": [spec.class_ids[0], spec.class_ids[-1]]}
                for spec in self.schedule
            ],
        }


@dataclass
class RunResult:
    output_dir: Path
    config_hash: str
    reports: list[SessionReport] = field(default_factory=list)
    session_result: SessionResult | None = None

    @property
    def accuracies(self) -> list[float]:
        return [report.accuracy for report in self.reports]


def plan_run(config: ExperimentConfig, *, settings: Settings | None = None) -> RunPlan:
    settings = settings or get_settings()
    resolved = resolve_config(config)
    digest = config_hash(config)
    schedule = build_schedule(resolved.benchmark, resolved.synthetic)
    baseline = resolved.report.baseline
    if baseline is not None and len(baseline.accuracies) != len(schedule):
        raise InvalidConfigError(
            f"Baseline {baseline.name!r} has {len(baseline.accuracies)} sessions, schedule has {len(schedule)}"
        )
    output_dir = resolved.output_dir or settings.output_root / f"{resolved.name}-{digest[:8]}"
    return RunPlan(
        config=resolved,
        config_hash=digest,
        fantasy=build_fantasy_set(resolved.fantasy),
        schedule=schedule,
        output_dir=Path(output_dir),
    )


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _local_resolution(config: ExperimentConfig, resolution: int) -> int | None:
    if config.augmentation.n_local == 0:
        return None
    return config.augmentation.local_resolution or max(1, resolution // 2)


def _session_of_class(split_sessions: Sequence[SessionSpec], upto: int) -> dict[int, int]:
    return {class_id: spec.index for spec in split_sessions[: upto + 1] for class_id in spec.class_ids}


def _separation_inputs(
    network_pair: ModelPair,
    test: SampleSet,
    fantasy: FantasySet,
    bank: PrototypeBank,
    *,
    fantasy_space: bool,
    batch_size: int,
) -> tuple[torch.Tensor, torch.Tensor, dict[int, torch.Tensor]]:
    classes = {class_id: session for session, class_id in bank.class_keys()}
    if not fantasy_space:
        features = extract_features(network_pair.query, test.float_images(), batch_size=batch_size)
        prototypes = {class_id: bank.entries[(session, class_id, 0)] for class_id, session in classes.items()}
        return features, test.labels, prototypes

    blocks = [
        extract_features(
            network_pair.query,
            test.float_images(),
            batch_size=batch_size,
            transform=lambda batch, d=descriptor: apply_transform(batch, d),
        )
        for descriptor in fantasy.transforms
    ]
    labels = expand_labels(test.labels, fantasy.size).reshape(-1)
    prototypes = {
        class_id * fantasy.size + m: bank.entries[(session, class_id, m)]
        for class_id, session in classes.items()
        for m in range(fantasy.size)
    }
    return torch.cat(blocks), labels, prototypes


def evaluate_session(
    pair: ModelPair,
    split: SessionSplit,
    fantasy: FantasySet,
    bank: PrototypeBank,
    session: int,
    config: ExperimentConfig,
    digest: str,
    session_dir: Path | None = None,
) -> tuple[SessionReport, PredictionBatch]:
    """Aggregated accuracy on all encountered classes plus separation diagnostics."""
    encountered = split.encountered_classes(session)
    test = split.test_for_session(session)
    batch_size = config.train.eval_batch_size
    pair.eval()
    predictions = predict_samples(pair.query, test, fantasy, bank, batch_size=batch_size)

    base_ids = split.base_classes
    base_set = set(base_ids)
    novel_ids = [class_id for class_id in encountered if class_id not in base_set]
    features, labels, prototypes = _separation_inputs(
        pair, test, fantasy, bank, fantasy_space=config.metrics.fantasy_space, batch_size=batch_size
    )
    if config.metrics.fantasy_space:
        base_ids = [c * fantasy.size + m for c in base_ids for m in range(fantasy.size)]
        novel_ids = [c * fantasy.size + m for c in novel_ids for m in range(fantasy.size)]
    separation = separation_report(
        features, labels, prototypes, base_ids, novel_ids, fantasy_space=config.metrics.fantasy_space
    )

    report = SessionReport(
        session=session,
        accuracy=predictions.accuracy,
        base_accuracy=predictions.accuracy_for(split.base_classes),
        novel_accuracy=predictions.accuracy_for([class_id for class_id in encountered if class_id not in base_set]),
        num_test_samples=len(predictions),
        encountered_classes=encountered,
        prototype_entries=len(bank),
        separation=separation,
        config_hash=digest,
    )

    if session_dir is not None:
        session_dir.mkdir(parents=True, exist_ok=True)
        (session_dir / SESSION_REPORT_FILE).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        (session_dir / SEPARATION_FILE).write_text(separation.model_dump_json(indent=2) + "\n", encoding="utf-8")
        write_predictions(session_dir / PREDICTIONS_FILE, predictions)
        write_confusion(
            session_dir / CONFUSION_FILE,
            confusion_matrix(predictions.predicted, predictions.labels, len(encountered)),
        )
        cdf_export(separation.d_inter).to_csv(session_dir / CDF_INTER_FILE, index=False, float_format="%.10f")
        if separation.d_intra:
            cdf_export(list(separation.d_intra.values())).to_csv(
                session_dir / CDF_INTRA_FILE, index=False, float_format="%.10f"
            )
    logger.info(
        "Session %d: accuracy %.2f%% over %d classes (%d prototypes)",
        session,
        report.accuracy,
        len(encountered),
        len(bank),
    )
    return report, predictions


def _write_accuracy_table(path: Path, reports: Sequence[SessionReport]) -> None:
    frame = pd.DataFrame(
        {
            "session": [report.session for report in reports],
            "accuracy": [report.accuracy for report in reports],
            "base_accuracy": [report.base_accuracy for report in reports],
            "novel_accuracy": [report.novel_accuracy for report in reports],
        }
    )
    frame.to_csv(path, index=False, float_format="%.6f")


def _session_prototypes(
    pair: ModelPair, split: SessionSplit, fantasy: FantasySet, config: ExperimentConfig, session: int
) -> list:
    return compute_prototypes(
        pair.query,
        split.train[session],
        split.sessions[session].class_ids,
        session,
        fantasy,
        batch_size=config.train.eval_batch_size,
        normalize_features=config.train.normalize_prototype_features,
    )


def run_experiment(
    config: ExperimentConfig,
    *,
    settings: Settings | None = None,
    dry_run: bool = False,
) -> RunPlan | RunResult:
    settings = settings or get_settings()
    plan = plan_run(config, settings=settings)
    if dry_run:
        logger.info("Dry run for %s: %d sessions", plan.config.name, len(plan.schedule))
        return plan

    resolved = plan.config
    fantasy = plan.fantasy
    seed_everything(resolved.seed, num_threads=settings.num_threads)
    split = build_sessions(
        resolved.benchmark,
        dataset_root=resolved.dataset_root or settings.data_root,
        synthetic=resolved.synthetic,
        seed=resolved.seed,
    )

    output_dir = plan.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    for stale in (METRICS_STREAM_FILE, FAILURE_MARKER_FILE):
        (output_dir / stale).unlink(missing_ok=True)
    manifest = RunManifest(
        name=resolved.name,
        service=SERVICE_NAME,
        config_hash=plan.config_hash,
        seed=resolved.seed,
        fantasy_size=fantasy.size,
        schedule=[spec.model_dump(mode="json") for spec in plan.schedule],
        config=resolved.model_dump(mode="json"),
    )
    (output_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    _write_json(output_dir / SPLITS_FILE, split.manifest())

    resolution = split.resolution
    torch.manual_seed(derive_seed(resolved.seed, 101))
    pair = build_model_pair(
        resolved.encoder,
        num_base_classes=len(split.base_classes),
        fantasy_size=fantasy.size,
        resolution=resolution,
        local_resolution=_local_resolution(resolved, resolution),
        momentum=resolved.contrast.key_momentum,
    )
    training = TrainingSettings.from_experiment(resolved, num_workers=settings.num_workers)
    bank = PrototypeBank(fantasy.size, resolved.encoder.feature_dim)
    queue: ContrastQueue | None = None
    result = RunResult(output_dir=output_dir, config_hash=plan.config_hash)

    with MetricsStream(output_dir / METRICS_STREAM_FILE) as stream:
        for spec in split.sessions:
            session = spec.index
            try:
                if spec.is_base:
                    _, queue = train_base(pair, split.train[0], fantasy, training, stream=stream)
                else:
                    if queue is None:
                        raise InvalidStateError("Incremental session started before base training")
                    finetune_incremental(
                        pair,
                        split.train[session],
                        queue,
                        fantasy,
                        training,
                        bank=bank,
                        session=session,
                        class_ids=spec.class_ids,
                        stream=stream,
                    )
            except TrainingDivergenceError as exc:
                _mark_failure(output_dir, session, exc)
                raise

            bank.extend(_session_prototypes(pair, split, fantasy, resolved, session))
            if resolved.train.recompute_old_prototypes and session > 0:
                for previous in range(session):
                    bank.replace_session(previous, _session_prototypes(pair, split, fantasy, resolved, previous))

            session_dir = output_dir / SESSIONS_DIR / session_dir_name(session)
            report, _ = evaluate_session(pair, split, fantasy, bank, session, resolved, plan.config_hash, session_dir)
            save_checkpoint(
                session_dir / CHECKPOINT_FILE,
                session=session,
                config=resolved,
                config_hash=plan.config_hash,
                fantasy=fantasy,
                pair=pair,
                queue=queue,
                bank=bank,
                num_base_classes=len(split.base_classes),
                resolution=resolution,
            )
            result.reports.append(report)
            _write_accuracy_table(output_dir / ACCURACY_FILE, result.reports)

    result.session_result = session_table(result.accuracies, resolved.report.baseline)
    (output_dir / SESSION_TABLE_FILE).write_text(
        result.session_result.model_dump_json(indent=2) + "\n", encoding="utf-8"
    )
    logger.info("Run %s finished: last-session accuracy %.2f%%", resolved.name, result.accuracies[-1])
    return result


def _mark_failure(output_dir: Path, session: int, exc: TrainingDivergenceError) -> None:
    payload = error_response(exc).model_dump(mode="json")
    payload["session"] = session
    _write_json(output_dir / FAILURE_MARKER_FILE, payload)
    if exc.last_good_state is not None:
        torch.save(exc.last_good_state, output_dir / "last_good.pt")
    logger.error("Run diverged in session %d; partial results kept in %s", session, output_dir)


def _read_run(run_dir: Path) -> tuple[RunManifest, list[float]]:
    manifest_path = run_dir / MANIFEST_FILE
    accuracy_path = run_dir / ACCURACY_FILE
    if not manifest_path.exists() or not accuracy_path.exists():
        raise InvalidInputError(f"{run_dir} is not a completed run directory")
    manifest = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    frame = pd.read_csv(accuracy_path).sort_values("session")
    return manifest, [float(value) for value in frame["accuracy"]]


def compare_runs(run_dirs: Sequence[Path], baseline_name: str) -> ComparisonTable:
    if not run_dirs:
        raise InvalidInputError("compare needs at least one run directory")
    runs = [_read_run(Path(run_dir)) for run_dir in run_dirs]
    schedules = {json.dumps(manifest.schedule, sort_keys=True) for manifest, _ in runs}
    if len(schedules) != 1:
        raise InvalidInputError("Runs do not share the same session schedule")
    lengths = {len(accuracies) for _, accuracies in runs}
    if len(lengths) != 1:
        raise InvalidInputError("Runs have different numbers of completed sessions")

    baselines = [accuracies for manifest, accuracies in runs if manifest.name == baseline_name]
    if not baselines:
        raise InvalidInputError(
            f"No run named {baseline_name!r}; available: {[manifest.name for manifest, _ in runs]}"
        )
    baseline_last = baselines[0][-1]
    return ComparisonTable(
        baseline_name=baseline_name,
        rows=[
            ComparisonRow(
                name=manifest.name,
                accuracies=accuracies,
                delta_last=round(accuracies[-1] - baseline_last, 2),
            )
            for manifest, accuracies in runs
        ],
    )


def _split_for_checkpoint(config: ExperimentConfig, settings: Settings) -> SessionSplit:
    return build_sessions(
        config.benchmark,
        dataset_root=config.dataset_root or settings.data_root,
        synthetic=config.synthetic,
        seed=config.seed,
    )


def run_metrics(checkpoint_path: Path, output_dir: Path, *, settings: Settings | None = None) -> SessionReport:
    """Re-run evaluation and separation analytics on a stored session checkpoint."""
    settings = settings or get_settings()
    checkpoint = load_checkpoint(checkpoint_path)
    split = _split_for_checkpoint(checkpoint.config, settings)
    report, _ = evaluate_session(
        checkpoint.pair,
        split,
        checkpoint.fantasy,
        checkpoint.bank,
        checkpoint.session,
        checkpoint.config,
        checkpoint.config_hash,
        output_dir,
    )
    return report


def dump_embeddings(
    checkpoint_path: Path,
    output_path: Path,
    *,
    partition: str = "test",
    settings: Settings | None = None,
) -> pd.DataFrame:
    """Identity-variant features of the encountered classes' test (or train) samples."""
    settings = settings or get_settings()
    checkpoint = load_checkpoint(checkpoint_path)
    split = _split_for_checkpoint(checkpoint.config, settings)
    if partition == "test":
        samples = split.test_for_session(checkpoint.session)
    elif partition == "train":
        samples = split.train[0]
        for session in range(1, checkpoint.session + 1):
            samples = samples.concat(split.train[session])
    else:
        raise InvalidInputError(f"partition must be 'test' or 'train', got {partition!r}")
    output_path.parent.mkdir(parents=True, exist_ok=True)
    return embedding_dump(
        checkpoint.pair.query,
        samples,
        output_path,
        session_of_class=_session_of_class(split.sessions, checkpoint.session),
        batch_size=checkpoint.config.train.eval_batch_size,
    )

