from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator


class SeparationReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_inter: list[float]
    d_intra: dict[int, float]
    r2_base: float | None = None
    r2_novel: float | None = None
    r2_mutual: float | None = None
    base_ids: list[int]
    novel_ids: list[int] = Field(default_factory=list)
    fantasy_space: bool = False
    subsampled: bool = False
    undefined_metrics: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_ranges(self) -> "SeparationReport":
        if any(value < 0.0 or value > 2.0 for value in self.d_inter):
            raise ValueError("d_inter values must lie in [0, 2]")
        if any(value < 0.0 or value > 2.0 for value in self.d_intra.values()):
            raise ValueError("d_intra values must lie in [0, 2]")
        if set(self.base_ids) & set(self.novel_ids):
            raise ValueError("base_ids and novel_ids must be disjoint")
        return self


class SessionResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    accuracies: list[float] = Field(min_length=1)
    baseline_name: str | None = None
    baseline_accuracies: list[float] | None = None
    delta_last: float | None = None

    @model_validator(mode="after")
    def validate_accuracies(self) -> "SessionResult":
        for value in [*self.accuracies, *(self.baseline_accuracies or [])]:
            if value < 0.0 or value > 100.0:
                raise ValueError("accuracies must lie in [0, 100]")
        if (self.baseline_accuracies is None) != (self.delta_last is None):
            raise ValueError("delta_last requires baseline accuracies")
        return self

    def render(self, name: str = "run") -> str:
        header = ["Method", *[str(index) for index in range(len(self.accuracies))], "delta_last"]
        rows = [[name, *[f"{value:.2f}" for value in self.accuracies], _format_delta(self.delta_last)]]
        if self.baseline_accuracies is not None:
            rows.insert(0, [self.baseline_name or "baseline", *[f"{v:.2f}" for v in self.baseline_accuracies], "-"])
        return _render_rows(header, rows)


class SessionReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    session: int = Field(ge=0)
    accuracy: float = Field(ge=0.0, le=100.0)
    base_accuracy: float | None = Field(default=None, ge=0.0, le=100.0)
    novel_accuracy: float | None = Field(default=None, ge=0.0, le=100.0)
    num_test_samples: int = Field(ge=0)
    encountered_classes: list[int]
    prototype_entries: int = Field(ge=0)
    separation: SeparationReport
    config_hash: str


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    service: str
    config_hash: str
    seed: int
    fantasy_size: int
    schedule: list[dict[str, Any]]
    config: dict[str, Any]


class ComparisonRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    accuracies: list[float]
    delta_last: float


class ComparisonTable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    baseline_name: str
    rows: list[ComparisonRow]

    def render(self) -> str:
        sessions = len(self.rows[0].accuracies) if self.rows else 0
        header = ["Method", *[str(index) for index in range(sessions)], "delta_last"]
        rows = [
            [row.name, *[f"{value:.2f}" for value in row.accuracies], _format_delta(row.delta_last)]
            for row in self.rows
        ]
        return _render_rows(header, rows)


def _format_delta(value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value:+.2f}"


def _render_rows(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(line[column]) for line in [header, *rows]) for column in range(len(header))]
    lines = [" | ".join(cell.ljust(width) for cell, width in zip(line, widths)) for line in [header, *rows]]
    lines.insert(1, "-+-".join("-" * width for width in widths))
    return "\n".join(lines)


class StepMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    session: int
    epoch: int
    step: int
    lr: float
    cls: float
    cont_global: float
    cont_local: float
    total: float
