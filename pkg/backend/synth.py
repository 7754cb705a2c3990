"""
Seeded synthetic prediction cohorts

Each model sees a latent score x with x | y ~ N(y * separation, 1). The
exact posterior at base rate pi is

    p* = sigmoid(logit(pi) + separation * x - separation^2 / 2)

and the reported probability is distort(p*, gamma), optionally computed
from a noise-corrupted score and shrunk toward the base rate. gamma = 1
with no noise and no shrink gives perfectly calibrated forecasts.
"""
import zlib
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.special import expit, logit

from errors import InvalidInputError
from models import Archetype, CellKey, FoldSeries

logger = structlog.get_logger(__name__)

DISTORT_CLIP = 1e-12
WEAK_SEPARATION = 1.0

# Stream ids for SeedSequence entropy
_TEST_LABELS = 0
_CALIBRATION_LABELS = 1
_TEST_SCORES = 2
_CALIBRATION_SCORES = 3


class SyntheticSpec(BaseModel):
    """Generation profile for one synthetic model"""

    model_config = ConfigDict(frozen=True)

    archetype: Optional[Archetype] = None
    n: int = Field(default=1_000, ge=2)
    datasets: int = Field(default=30, ge=1)
    folds: int = Field(default=5, ge=1)
    base_rate: float = Field(default=0.3, gt=0.0, lt=1.0)
    separation: float = Field(default=2.0, ge=0.0)
    distortion_gamma: float = Field(default=1.0, gt=0.0)
    noise: float = Field(default=0.0, ge=0.0)
    shrink: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_archetype(self) -> "SyntheticSpec":
        archetype = self.archetype
        if archetype is None:
            return self
        distorted = self.distortion_gamma != 1.0
        weak = self.separation <= WEAK_SEPARATION
        if archetype == Archetype.EAGLE and (distorted or self.noise > 0 or self.separation <= 0):
            raise ValueError("eagle needs gamma = 1, no noise and positive separation")
        if archetype == Archetype.BULL and (not distorted or self.separation <= 0):
            raise ValueError("bull needs gamma != 1 and positive separation")
        if archetype == Archetype.SLOTH and (distorted or not weak):
            raise ValueError(f"sloth needs gamma = 1 and separation <= {WEAK_SEPARATION}")
        if archetype == Archetype.MOLE and (not distorted or not (weak or self.noise >= self.separation)):
            raise ValueError("mole needs gamma != 1 and weak or noise-dominated separation")
        return self


_PRESETS = {
    Archetype.EAGLE: {"separation": 2.0, "distortion_gamma": 1.0},
    Archetype.BULL: {"separation": 2.0, "distortion_gamma": 2.5},
    Archetype.SLOTH: {"separation": 0.5, "distortion_gamma": 1.0},
    Archetype.MOLE: {"separation": 0.5, "distortion_gamma": 2.5},
}


def make_spec(**fields) -> SyntheticSpec:
    """SyntheticSpec with pydantic errors surfaced as InvalidInputError"""
    try:
        return SyntheticSpec(**fields)
    except ValidationError as exc:
        raise InvalidInputError("invalid synthetic spec", details=str(exc)) from None


def archetype_spec(archetype, **overrides) -> SyntheticSpec:
    """Preset profile for an archetype, with any field overridden"""
    try:
        archetype = Archetype(archetype)
    except ValueError:
        raise InvalidInputError(f"unknown archetype '{archetype}'") from None
    fields = {"archetype": archetype, **_PRESETS[archetype], **overrides}
    return make_spec(**fields)


def distort(p, gamma: float):
    """
    Logit-linear extremity distortion p^g / (p^g + (1-p)^g)

    Strictly increasing for every gamma > 0; gamma > 1 is overconfident.
    Inputs are clamped to [1e-12, 1 - 1e-12].
    """
    if gamma <= 0:
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    clipped = np.clip(np.asarray(p, dtype=float), DISTORT_CLIP, 1.0 - DISTORT_CLIP)
    result = expit(gamma * logit(clipped))
    return float(result) if np.ndim(result) == 0 else result


def _posterior(x: np.ndarray, base_rate: float, separation: float) -> np.ndarray:
    return expit(logit(base_rate) + separation * x - separation ** 2 / 2.0)


def _rng(seed: int, dataset: int, fold: int, stream: int, model: str = "") -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, dataset, fold, stream, zlib.crc32(model.encode("utf-8"))]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _labels(rng: np.random.Generator, n: int, base_rate: float) -> np.ndarray:
    return (rng.random(n) < base_rate).astype(np.int8)


def _forecast(rng: np.random.Generator, labels: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    x = rng.standard_normal(labels.shape[0]) + labels * spec.separation
    if spec.noise > 0:
        x = x + spec.noise * rng.standard_normal(labels.shape[0])
    p = distort(_posterior(x, spec.base_rate, spec.separation), spec.distortion_gamma)
    if spec.shrink > 0:
        p = (1.0 - spec.shrink) * p + spec.shrink * spec.base_rate
    return np.clip(p, 0.0, 1.0)


def simulate_calibrated_fold(
    rng: np.random.Generator,
    n: int,
    base_rate: float = 0.3,
    separation: float = 1.0,
) -> FoldSeries:
    """One perfectly calibrated fold (gamma = 1, no noise); for null checks"""
    labels = _labels(rng, n, base_rate)
    x = rng.standard_normal(n) + labels * separation
    return FoldSeries(labels, _posterior(x, base_rate, separation))


@dataclass(frozen=True)
class SyntheticCohort:
    """Test predictions and a disjoint calibration split, keyed by (dataset, fold, model)"""
    test: Dict[CellKey, FoldSeries]
    calibration: Dict[CellKey, FoldSeries]


def dataset_name(index: int) -> str:
    return f"synth-{index:03d}"


def generate_multi_cohort(
    profiles: Mapping[str, SyntheticSpec],
    calibration_n: Optional[int] = None,
) -> SyntheticCohort:
    """
    Several models evaluated on shared instances

    Grid size (n, datasets, folds), base rate and seed come from the first
    profile in sorted model order; every profile must agree on them. Labels
    of a (dataset, fold) cell are shared by all models; each model draws its
    own latent scores from a per-model stream.
    """
    if not profiles:
        raise InvalidInputError("at least one model profile is required")
    names = sorted(profiles)
    grid = profiles[names[0]]
    for name in names[1:]:
        other = profiles[name]
        if (other.n, other.datasets, other.folds, other.base_rate, other.seed) != \
                (grid.n, grid.datasets, grid.folds, grid.base_rate, grid.seed):
            raise InvalidInputError(f"profile '{name}' disagrees on grid size, base rate or seed")
    cal_n = grid.n if calibration_n is None else calibration_n
    if cal_n < 2:
        raise InvalidInputError(f"calibration split needs at least 2 instances, got {cal_n}")

    test: Dict[CellKey, FoldSeries] = {}
    calibration: Dict[CellKey, FoldSeries] = {}
    for d in range(grid.datasets):
        dataset = dataset_name(d)
        for fold in range(grid.folds):
            test_labels = _labels(_rng(grid.seed, d, fold, _TEST_LABELS), grid.n, grid.base_rate)
            cal_labels = _labels(_rng(grid.seed, d, fold, _CALIBRATION_LABELS), cal_n, grid.base_rate)
            for name in names:
                spec = profiles[name]
                test_probs = _forecast(_rng(grid.seed, d, fold, _TEST_SCORES, name), test_labels, spec)
                cal_probs = _forecast(_rng(grid.seed, d, fold, _CALIBRATION_SCORES, name), cal_labels, spec)
                test[(dataset, fold, name)] = FoldSeries(test_labels, test_probs)
                calibration[(dataset, fold, name)] = FoldSeries(cal_labels, cal_probs)

    logger.info(
        "synthetic_cohort_generated",
        models=len(names),
        datasets=grid.datasets,
        folds=grid.folds,
        n=grid.n,
    )
    return SyntheticCohort(test=test, calibration=calibration)


def generate_cohort(spec: SyntheticSpec, model: Optional[str] = None) -> Dict[CellKey, FoldSeries]:
    """Test predictions of one synthetic model over its dataset/fold grid"""
    name = model or (spec.archetype.value if spec.archetype is not None else "synthetic")
    return generate_multi_cohort({name: spec}).test
