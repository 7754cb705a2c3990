"""
Configuration management for the probability matrix toolkit
"""
import logging
import sys
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional

import structlog
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from models import (
    Alternative,
    CalibratorKind,
    DecompositionScheme,
    DiscriminationAxis,
    Metric,
    QuadrantRule,
)

TOOL_NAME = "probability-matrix"
TOOL_VERSION = "1.0.0"


class RunConfig(BaseSettings):
    """Run configuration: defaults < config file < environment < flags"""

    model_config = SettingsConfigDict(
        env_prefix="PMATRIX_",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Invocation
    command: Optional[str] = None
    inputs: List[str] = Field(default_factory=list)
    calibration_input: Optional[str] = None
    ranks_input: Optional[str] = None
    output: str = "out"

    # Calibration
    calibrator_kinds: List[CalibratorKind] = Field(default_factory=lambda: [CalibratorKind.VENN_ABERS])
    platt_smoothing: bool = True
    split_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    fast_venn_abers: bool = True

    # Matrix
    quadrant_rule: QuadrantRule = QuadrantRule.MEDIAN
    z_threshold: float = Field(default=1.96, gt=0.0)
    discrimination_axis: DiscriminationAxis = DiscriminationAxis.AUC

    # Metrics
    decomposition_scheme: DecompositionScheme = DecompositionScheme.UNIQUE_VALUE
    bins: int = Field(default=10, ge=1)
    clip_eps: float = Field(default=1e-15, gt=0.0, lt=0.5)

    # Statistics
    bootstrap_resamples: int = Field(default=10_000, ge=1_000)
    bootstrap_level: float = Field(default=0.95, gt=0.0, lt=1.0)
    seed: int = 0
    compare_metric: Metric = Metric.LOGLOSS
    compare_models: List[str] = Field(default_factory=list)
    wilcoxon_alternative: Alternative = Alternative.TWO_SIDED

    # Synthetic cohorts
    synth_archetypes: List[str] = Field(default_factory=lambda: ["eagle", "bull", "sloth", "mole"])
    synth_n: int = Field(default=1_000, ge=2)
    synth_datasets: int = Field(default=30, ge=1)
    synth_folds: int = Field(default=5, ge=1)
    synth_base_rate: float = Field(default=0.3, gt=0.0, lt=1.0)

    # Ingestion
    strict: bool = True
    delimiter: Optional[str] = None
    column_map: Dict[str, str] = Field(default_factory=dict)

    # Execution
    workers: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    log_format: str = "console"


def load_run_config(config_file: Optional[str] = None, **overrides) -> RunConfig:
    """
    Build the configuration for one invocation

    Args:
        config_file: optional KEY=value file (dotenv syntax, PMATRIX_ prefix)
        overrides: values given explicitly on the command line

    Returns:
        Validated RunConfig
    """
    if config_file is not None:
        return RunConfig(_env_file=config_file, **overrides)
    return RunConfig(**overrides)


@lru_cache()
def get_settings() -> RunConfig:
    """Get cached settings instance"""
    # Try to find .env file in the script's directory
    env_file = Path(__file__).parent / ".env"
    if env_file.exists():
        return RunConfig(_env_file=str(env_file))
    return RunConfig()


def configure_logging(level: str = "INFO", fmt: str = "console") -> None:
    """Route structlog events to stderr; stdout is reserved for summaries"""
    if fmt == "json":
        renderer = structlog.processors.JSONRenderer(sort_keys=True)
    else:
        renderer = structlog.dev.ConsoleRenderer(colors=False)

    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelName(level.upper())
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
