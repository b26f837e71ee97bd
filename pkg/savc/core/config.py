from functools import lru_cache
import logging
from pathlib import Path

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

DEFAULT_DATA_ROOT = Path("data")
DEFAULT_OUTPUT_ROOT = Path("runs")


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        populate_by_name=True,
    )

    data_root: Path = Field(default=DEFAULT_DATA_ROOT, alias="SAVC_DATA_ROOT")
    output_root: Path = Field(default=DEFAULT_OUTPUT_ROOT, alias="SAVC_OUTPUT_ROOT")
    log_level: str = Field(default="INFO", alias="SAVC_LOG_LEVEL")
    num_threads: int = Field(default=1, alias="SAVC_NUM_THREADS")
    num_workers: int = Field(default=0, alias="SAVC_NUM_WORKERS")

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, value: str) -> str:
        normalized = value.strip().upper()
        if normalized not in logging.getLevelNamesMapping():
            raise ValueError("SAVC_LOG_LEVEL must be a logging level name")
        return normalized

    @field_validator("num_threads")
    @classmethod
    def validate_num_threads(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("SAVC_NUM_THREADS must be > 0")
        return value

    @field_validator("num_workers")
    @classmethod
    def validate_num_workers(cls, value: int) -> int:
        if value < 0:
            raise ValueError("SAVC_NUM_WORKERS must be >= 0")
        return value


@lru_cache
def get_settings() -> Settings:
    return Settings()
