# config.py
from __future__ import annotations
from typing import Literal
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, AliasChoices, model_validator

class Settings(BaseSettings):
    # Read .env; ignore extra env vars to avoid crashes
    model_config = SettingsConfigDict(
        env_file=".env",
        extra="ignore",
        env_nested_delimiter="__",
        env_prefix="",  # no automatic prefix
    )

    # --- Runtime env / debugging ---
    APP_ENV: Literal["development", "staging", "production"] = Field(
        default="development",
        validation_alias=AliasChoices("APP_ENV", "app_env"),
    )
    DEBUG: bool = Field(
        default=False,
        validation_alias=AliasChoices("DEBUG", "debug"),
    )

    # --- Logging ---
    LOG_LEVEL: str = Field(
        default="INFO",
        validation_alias=AliasChoices("LOG_LEVEL", "log_level"),
    )

    # --- Experiment outputs ---
    # The only environment variable the CLI honours directly.
    OUTPUT_ROOT: str = Field(
        default="runs",
        validation_alias=AliasChoices("GPSELECT_OUTPUT_ROOT", "gpselect_output_root", "OUTPUT_ROOT"),
    )
    DEFAULT_JOBS: int = Field(
        default=1,
        ge=1,
        validation_alias=AliasChoices("DEFAULT_JOBS", "default_jobs"),
    )

    # --- Numerics ---
    # Memory budget (float64 elements) for one chunk of a batched E-step.
    CHUNK_ELEMENTS: int = Field(
        default=4_000_000,
        ge=10_000,
        validation_alias=AliasChoices("CHUNK_ELEMENTS", "chunk_elements"),
    )

    @model_validator(mode="after")
    def _validate_log_level(self) -> "Settings":
        level = self.LOG_LEVEL.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"LOG_LEVEL must be a logging level name, got {self.LOG_LEVEL!r}")
        self.LOG_LEVEL = level
        return self

    @property
    def log_level(self) -> str:
        return "DEBUG" if self.DEBUG else self.LOG_LEVEL

settings = Settings()
