from __future__ import annotations

import os
from pathlib import Path
import sys

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from savc.core.config import Settings  # noqa: E402
from savc.schemas.experiment import (  # noqa: E402
    AugmentationConfig,
    ContrastConfig,
    EncoderConfig,
    ExperimentConfig,
    SyntheticConfig,
    TrainConfig,
)
from savc.services.experiment import RunResult, run_experiment  # noqa: E402


def pytest_configure(config: pytest.Config) -> None:
    torch.set_num_threads(1)
    config.addinivalue_line("markers", "slow: long directional reproductions (set SAVC_RUN_SLOW=1)")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if os.environ.get("SAVC_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set SAVC_RUN_SLOW=1 to run slow tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_tiny_config(output_dir: Path, **updates) -> ExperimentConfig:
    config = ExperimentConfig(
        name="tiny",
        synthetic=SyntheticConfig(
            base_classes=4,
            incremental_sessions=1,
            ways=2,
            shots=2,
            train_per_class=6,
            test_per_class=3,
            resolution=16,
        ),
        contrast=ContrastConfig(queue_length=64, key_momentum=0.9),
        augmentation=AugmentationConfig(n_local=1, local_resolution=8),
        encoder=EncoderConfig(feature_dim=16, projection_dim=8),
        train=TrainConfig(base_lr=0.05, base_epochs=1, incremental_epochs=1, batch_size=8, eval_batch_size=16),
        output_dir=output_dir,
    )
    return config.model_copy(update=updates)


def make_settings(root: Path) -> Settings:
    return Settings(SAVC_DATA_ROOT=root / "data", SAVC_OUTPUT_ROOT=root / "runs")


@pytest.fixture
def tiny_config(tmp_path: Path) -> ExperimentConfig:
    return make_tiny_config(tmp_path / "run")


@pytest.fixture(scope="session")
def completed_run(tmp_path_factory: pytest.TempPathFactory) -> RunResult:
    root = tmp_path_factory.mktemp("completed")
    result = run_experiment(make_tiny_config(root / "run"), settings=make_settings(root))
    assert isinstance(result, RunResult)
    return result


@pytest.fixture
def settings(tmp_path: Path) -> Settings:
    return make_settings(tmp_path)
