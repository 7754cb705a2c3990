"""
Domain types for the probability matrix pipeline
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from errors import InvalidInputError


class CalibratorKind(str, Enum):
    PLATT = "platt"
    ISOTONIC = "isotonic"
    BETA = "beta"
    TEMPERATURE = "temperature"
    VENN_ABERS = "venn-abers"


class DecompositionScheme(str, Enum):
    UNIQUE_VALUE = "unique-value"
    EQUAL_WIDTH = "equal-width"
    EQUAL_MASS = "equal-mass"


class QuadrantRule(str, Enum):
    MEDIAN = "median"
    ABSOLUTE = "absolute"


class DiscriminationAxis(str, Enum):
    AUC = "auc"
    BRIER_RESOLUTION = "brier-resolution"


class Alternative(str, Enum):
    TWO_SIDED = "two-sided"
    GREATER = "greater"
    LESS = "less"


class Metric(str, Enum):
    """Per-cell metrics that can be ranked"""
    LOGLOSS = "logloss"
    BRIER = "brier"
    AUC = "auc"
    ABS_Z = "abs_z"
    RESOLUTION = "resolution"

    @property
    def higher_is_better(self) -> bool:
        return self in (Metric.AUC, Metric.RESOLUTION)


class Quadrant(str, Enum):
    EAGLE = "Eagle"
    BULL = "Bull"
    SLOTH = "Sloth"
    MOLE = "Mole"

    @property
    def type_label(self) -> str:
        return _TYPE_LABELS[self]

    @property
    def prescription(self) -> "Prescription":
        return PRESCRIPTIONS[self]

    @classmethod
    def from_axes(cls, discrimination_good: bool, calibration_good: bool) -> "Quadrant":
        if discrimination_good:
            return cls.EAGLE if calibration_good else cls.BULL
        return cls.SLOTH if calibration_good else cls.MOLE


class Prescription(str, Enum):
    SHIP_IT = "ship-it"
    APPLY_VENN_ABERS = "apply-venn-abers"
    RETRAIN = "retrain"
    START_OVER = "start-over"


_TYPE_LABELS = {
    Quadrant.EAGLE: "Type I",
    Quadrant.BULL: "Type II",
    Quadrant.SLOTH: "Type III",
    Quadrant.MOLE: "Type IV",
}

PRESCRIPTIONS = {
    Quadrant.EAGLE: Prescription.SHIP_IT,
    Quadrant.BULL: Prescription.APPLY_VENN_ABERS,
    Quadrant.SLOTH: Prescription.RETRAIN,
    Quadrant.MOLE: Prescription.START_OVER,
}


class Archetype(str, Enum):
    """Generation profiles for synthetic cohorts"""
    EAGLE = "eagle"
    BULL = "bull"
    SLOTH = "sloth"
    MOLE = "mole"

    @property
    def quadrant(self) -> Quadrant:
        return Quadrant(self.value.capitalize())


# ---------------------------------------------------------------------------
# Metric inputs and outputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FoldSeries:
    """Aligned labels and predicted probabilities for one (dataset, fold, model) cell"""
    labels: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        probs = np.asarray(self.probs, dtype=float)
        if labels.ndim != 1 or probs.ndim != 1:
            raise InvalidInputError("labels and probs must be one-dimensional")
        if labels.shape[0] != probs.shape[0]:
            raise InvalidInputError(
                f"length mismatch: {labels.shape[0]} labels vs {probs.shape[0]} probabilities"
            )
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0) or np.any(probs > 1.0):
            raise InvalidInputError("probabilities must be finite and within [0, 1]")
        if labels.size and not np.all(np.isin(labels, (0, 1))):
            raise InvalidInputError("labels must be 0 or 1")

        labels = labels.astype(np.int8)
        labels.setflags(write=False)
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    @property
    def has_both_classes(self) -> bool:
        return self.n_positive > 0 and self.n_negative > 0

    def with_probs(self, probs: Sequence[float]) -> "FoldSeries":
        """Same labels, new probabilities (e.g. after calibration)"""
        return FoldSeries(self.labels, np.asarray(probs, dtype=float))


@dataclass(frozen=True)
class DecompositionResult:
    reliability: float
    resolution: float
    uncertainty: float
    residual: float
    bin_count: int
    scheme: DecompositionScheme

    @property
    def brier(self) -> float:
        return self.reliability - self.resolution + self.uncertainty + self.residual


@dataclass(frozen=True)
class ZResult:
    z: float
    significant: bool

    @property
    def abs_z(self) -> float:
        return abs(self.z)


@dataclass(frozen=True)
class CellMetrics:
    """All per-fold metrics for one cell; AUC/Z are None when undefined"""
    logloss: float
    brier: float
    auc: Optional[float]
    z: Optional[float]
    reliability: float
    resolution: float
    uncertainty: float
    n: int
    positives: int

    @property
    def abs_z(self) -> Optional[float]:
        return None if self.z is None else abs(self.z)


@dataclass(frozen=True)
class VennAbersOutput:
    p0: float
    p1: float
    merged: float


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

class PredictionRecord(BaseModel):
    """One (dataset, fold, model, label, probability) observation"""

    model_config = ConfigDict(frozen=True)

    dataset_id: str
    fold_id: int
    model_id: str
    y: int
    p: float

    @field_validator("dataset_id", "model_id")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("identifier must be non-empty")
        return value

    @field_validator("fold_id")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("fold must be a non-negative integer")
        return value

    @field_validator("y")
    @classmethod
    def _binary(cls, value: int) -> int:
        if value not in (0, 1):
            raise ValueError("y must be 0 or 1")
        return value

    @field_validator("p")
    @classmethod
    def _probability(cls, value: float) -> float:
        if not math.isfinite(value) or not 0.0 <= value <= 1.0:
            raise ValueError("p must be a finite probability in [0, 1]")
        return value


CellKey = Tuple[str, int, str]  # (dataset, fold, model)


# ---------------------------------------------------------------------------
# Ranking and quadrants
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["logloss", "brier", "auc", "z", "abs_z", "reliability", "resolution", "uncertainty"]


@dataclass(frozen=True, eq=False)
class MetricTable:
    """
    Per-cell metric values

    ``cells`` has one row per (model, dataset, fold) with the columns of
    METRIC_COLUMNS plus ``n`` and ``positives``; undefined AUC/Z are NaN.
    """
    cells: pd.DataFrame

    @property
    def models(self) -> List[str]:
        return sorted(self.cells["model"].unique().tolist())

    @property
    def datasets(self) -> List[str]:
        return sorted(self.cells["dataset"].unique().tolist())

    @property
    def folds_per_dataset(self) -> Dict[str, int]:
        counts = self.cells.groupby("dataset")["fold"].nunique()
        return {str(k): int(v) for k, v in counts.items()}

    def has_metric(self, metric: str) -> bool:
        return metric in self.cells.columns

    def pivot(self, metric: str) -> pd.DataFrame:
        """Cells as rows (dataset, fold), models as columns"""
        if not self.has_metric(metric):
            raise InvalidInputError(f"metric '{metric}' is not in the table")
        wide = self.cells.set_index(["dataset", "fold", "model"])[metric].unstack("model")
        return wide.sort_index(axis=0).sort_index(axis=1)

    def restrict(self, models: Sequence[str]) -> "MetricTable":
        return MetricTable(self.cells[self.cells["model"].isin(list(models))].reset_index(drop=True))


@dataclass(frozen=True, eq=False)
class RankSummary:
    """Expected (mean within-cell fractional) rank per model for one metric"""
    metric: str
    expected: Dict[str, float]
    cell_counts: Dict[str, int]
    excluded: Dict[str, int]
    cell_ranks: pd.DataFrame

    @property
    def models(self) -> List[str]:
        return sorted(self.expected)


@dataclass
class ModelPlacement:
    model: str
    auc_rank: float
    z_rank: Optional[float]
    mean_abs_z: Optional[float]
    discrimination_good: bool
    calibration_good: bool
    quadrant: Quadrant
    prescription: Prescription
    ci: Dict[str, Tuple[float, float]] = field(default_factory=dict)


@dataclass
class QuadrantReport:
    """Per-model placements plus the thresholds that produced them"""
    placements: List[ModelPlacement]
    rule: QuadrantRule
    discrimination_threshold: float
    calibration_threshold: float
    discrimination_axis: DiscriminationAxis = DiscriminationAxis.AUC

    def by_model(self) -> Dict[str, ModelPlacement]:
        return {p.model: p for p in self.placements}

    def quadrant_of(self, model: str) -> Quadrant:
        return self.by_model()[model].quadrant

    def quadrants(self) -> Dict[str, Quadrant]:
        return {p.model: p.quadrant for p in self.placements}


@dataclass(frozen=True)
class StabilityEntry:
    frequencies: Dict[Quadrant, float]
    modal_quadrant: Quadrant
    modal_agreement: float
    datasets: int
    global_agreement: Optional[float] = None


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    w_statistic: float
    n_effective: int
    p_value: float
    method: str  # "exact" or "normal-approx"
    tie_count: int
    alternative: Alternative = Alternative.TWO_SIDED


@dataclass(frozen=True)
class MetricEffect:
    mean_pct_delta: float
    improved_fraction: float
    cells: int
    excluded_zero_base: int = 0


@dataclass(frozen=True)
class EffectSummary:
    model: str
    metrics: Dict[str, MetricEffect]
    calibrator: Optional[str] = None


@dataclass(frozen=True)
class MiscalibrationSummary:
    mean_abs_z: float
    median_abs_z: float
    pct_significant: float
    cells: int


@dataclass(frozen=True)
class HeadToHeadResult:
    metric: str
    wins: Dict[str, int]
    ties: int
    datasets: int
    winners: Dict[str, Optional[str]]


@dataclass(frozen=True)
class AxisConcordance:
    """Agreement between two discrimination axes over the same models"""
    rho: float
    p_value: float
    label_agreement: float
    disagreements: List[str]
