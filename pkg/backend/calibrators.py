"""
Post-hoc calibration maps

Five calibrators fitted on raw predicted probabilities of a calibration
split and applied to test-fold probabilities: Platt scaling, isotonic
regression, beta calibration, temperature scaling and inductive
Venn-Abers predictors. Fitted models are immutable pydantic models that
serialise to JSON with a ``kind`` tag.
"""
import math
from typing import Annotated, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator
from scipy.optimize import minimize
from scipy.special import expit, logit
from sklearn.isotonic import isotonic_regression

from errors import FitError, InvalidInputError, UsageError
from models import CalibratorKind, FoldSeries, VennAbersOutput

logger = structlog.get_logger(__name__)

# Probabilities are clipped only while fitting; prediction keeps 0/1 exact
FIT_CLIP = 1e-12
BETA_CLIP = 1e-6
MIN_PLATT_SLOPE = 1e-6


def _softplus(values: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, values)


def _logistic_nll(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean NLL of sigmoid(scores) against (possibly soft) targets"""
    return float(np.mean(targets * _softplus(-scores) + (1.0 - targets) * _softplus(scores)))


def _fit_logits(probs: np.ndarray) -> np.ndarray:
    return logit(np.clip(probs, FIT_CLIP, 1.0 - FIT_CLIP))


def _as_probs(probs: Sequence[float]) -> np.ndarray:
    values = np.asarray(probs, dtype=float).reshape(-1)
    if not np.all(np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
        raise InvalidInputError("probabilities must be finite and within [0, 1]")
    return values


def _require_both_classes(cal: FoldSeries, kind: CalibratorKind) -> None:
    if len(cal) == 0:
        raise FitError(f"{kind.value}: calibration set is empty")
    if not cal.has_both_classes:
        raise FitError(f"{kind.value}: calibration set contains a single class")


def _require_nonempty(cal: FoldSeries, kind: CalibratorKind) -> None:
    if len(cal) == 0:
        raise FitError(f"{kind.value}: calibration set is empty")


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------

class _FittedModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    def predict(self, probs: Sequence[float]) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def to_json(self) -> str:
        return self.model_dump_json()


class PlattModel(_FittedModel):
    """sigmoid(a * logit(p) + b)"""
    kind: Literal["platt"] = "platt"
    a: float = Field(gt=0.0)
    b: float
    iterations: int = 0
    converged: bool = True

    def predict(self, probs: Sequence[float]) -> np.ndarray:
        p = _as_probs(probs)
        with np.errstate(divide="ignore"):
            return expit(self.a * logit(p) + self.b)


class IsotonicModel(_FittedModel):
    """Non-decreasing step function over the unique calibration scores"""
    kind: Literal["isotonic"] = "isotonic"
    thresholds: List[float]
    values: List[float]

    @model_validator(mode="after")
    def _check_monotone(self) -> "IsotonicModel":
        if len(self.thresholds) != len(self.values) or not self.thresholds:
            raise ValueError("thresholds and values must be non-empty and equally long")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(np.diff(self.values) < 0):
            raise ValueError("values must be non-decreasing")
        return self

    def predict(self, probs: Sequence[float]) -> np.ndarray:
        return _step_predict(np.asarray(self.thresholds), np.asarray(self.values), _as_probs(probs))


class BetaModel(_FittedModel):
    """sigmoid(a * ln p - b * ln(1 - p) + c) with a, b >= 0"""
    kind: Literal["beta"] = "beta"
    a: float = Field(ge=0.0)
    b: float = Field(ge=0.0)
    c: float
    iterations: int = 0
    converged: bool = True

    def predict(self, probs: Sequence[float]) -> np.ndarray:
        p = _as_probs(probs)
        scores = np.full_like(p, self.c, dtype=float)
        # A zero coefficient contributes nothing, including at p = 0 or 1
        with np.errstate(divide="ignore"):
            if self.a > 0:
                scores += self.a * np.log(p)
            if self.b > 0:
                scores -= self.b * np.log1p(-p)
        return expit(scores)


class TemperatureModel(_FittedModel):
    """sigmoid(logit(p) / T)"""
    kind: Literal["temperature"] = "temperature"
    temperature: float = Field(gt=0.0)

    def predict(self, probs: Sequence[float]) -> np.ndarray:
        p = _as_probs(probs)
        with np.errstate(divide="ignore"):
            return expit(logit(p) / self.temperature)


class VennAbersModel(_FittedModel):
    """Retains the calibration pairs; every prediction refits two isotonic maps"""
    kind: Literal["venn-abers"] = "venn-abers"
    scores: List[float]
    labels: List[int]
    fast: bool = True

    @model_validator(mode="after")
    def _check_pairs(self) -> "VennAbersModel":
        if len(self.scores) != len(self.labels) or not self.scores:
            raise ValueError("scores and labels must be non-empty and equally long")
        return self

    def calibration_series(self) -> FoldSeries:
        return FoldSeries(np.asarray(self.labels), np.asarray(self.scores))

    def intervals(self, probs: Sequence[float]) -> List[VennAbersOutput]:
        return venn_abers_predict(self.calibration_series(), probs, fast=self.fast)

    def predict(self, probs: Sequence[float]) -> np.ndarray:
        return np.array([out.merged for out in self.intervals(probs)], dtype=float)


CalibratorModel = Annotated[
    Union[PlattModel, IsotonicModel, BetaModel, TemperatureModel, VennAbersModel],
    Field(discriminator="kind"),
]
_MODEL_ADAPTER = TypeAdapter(CalibratorModel)
_FITTED_TYPES = (PlattModel, IsotonicModel, BetaModel, TemperatureModel, VennAbersModel)


def load_calibrator(text: str) -> _FittedModel:
    """Rebuild a fitted model from its JSON form"""
    return _MODEL_ADAPTER.validate_json(text)


# ---------------------------------------------------------------------------
# Platt scaling
# ---------------------------------------------------------------------------

def _newton_logistic(
    design: np.ndarray,
    targets: np.ndarray,
    offset: np.ndarray,
    init: np.ndarray,
    max_iter: int,
    tol: float,
) -> Tuple[np.ndarray, int, bool]:
    """Damped Newton for logistic NLL with scores = design @ params + offset"""
    params = init.astype(float).copy()
    loss = _logistic_nll(design @ params + offset, targets)
    ridge = 1e-12 * np.eye(design.shape[1])

    for iteration in range(1, max_iter + 1):
        q = expit(design @ params + offset)
        grad = design.T @ (q - targets) / targets.shape[0]
        if np.linalg.norm(grad) < tol:
            return params, iteration, True

        weights = q * (1.0 - q)
        hessian = (design.T * weights) @ design / targets.shape[0] + ridge
        step = np.linalg.solve(hessian, grad)

        scale = 1.0
        while scale > 1e-10:
            candidate = params - scale * step
            candidate_loss = _logistic_nll(design @ candidate + offset, targets)
            if candidate_loss <= loss - 1e-4 * scale * float(grad @ step):
                break
            scale *= 0.5
        else:
            # Line search stalled at the floating-point floor
            return params, iteration, True

        params, loss = candidate, candidate_loss

    return params, max_iter, False


def fit_platt(
    cal: FoldSeries,
    smoothing: bool = True,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> PlattModel:
    """
    Fit sigmoid(A * logit(p) + B) by Newton iterations

    Targets are smoothed to (N+ + 1)/(N+ + 2) and 1/(N- + 2) unless
    ``smoothing`` is off. The slope is kept strictly positive so the map
    stays strictly increasing.
    """
    _require_both_classes(cal, CalibratorKind.PLATT)
    x = _fit_logits(cal.probs)
    y = cal.labels.astype(float)
    if smoothing:
        n_pos, n_neg = cal.n_positive, cal.n_negative
        targets = np.where(y == 1.0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    else:
        targets = y

    design = np.column_stack([x, np.ones_like(x)])
    params, iterations, converged = _newton_logistic(
        design, targets, np.zeros_like(x), np.array([1.0, 0.0]), max_iter, tol
    )
    a, b = float(params[0]), float(params[1])

    if a <= 0.0:
        logger.warning("platt_slope_clamped", fitted_slope=a, clamped_to=MIN_PLATT_SLOPE)
        a = MIN_PLATT_SLOPE
        intercept, extra, converged = _newton_logistic(
            np.ones((x.shape[0], 1)), targets, a * x, np.array([b]), max_iter, tol
        )
        b = float(intercept[0])
        iterations += extra

    if not converged:
        logger.warning("platt_not_converged", iterations=iterations)
    return PlattModel(a=a, b=b, iterations=iterations, converged=converged)


# ---------------------------------------------------------------------------
# Isotonic regression
# ---------------------------------------------------------------------------

def _grouped(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    thresholds, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse.reshape(-1), weights=labels.astype(float))
    return thresholds, sums, counts.astype(float)


def _pav(sums: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return isotonic_regression(sums / counts, sample_weight=counts, increasing=True)


def _step_predict(thresholds: np.ndarray, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Left-continuous step lookup, clamped to the end values outside the range"""
    index = np.searchsorted(thresholds, x, side="right") - 1
    return values[np.clip(index, 0, thresholds.shape[0] - 1)]


def fit_isotonic(cal: FoldSeries) -> IsotonicModel:
    """Pool-adjacent-violators least-squares fit, predicted as a pure step function"""
    _require_nonempty(cal, CalibratorKind.ISOTONIC)
    thresholds, sums, counts = _grouped(cal.probs, cal.labels)
    values = _pav(sums, counts)
    return IsotonicModel(thresholds=thresholds.tolist(), values=values.tolist())


# ---------------------------------------------------------------------------
# Beta calibration
# ---------------------------------------------------------------------------

def fit_beta(cal: FoldSeries, max_iter: int = 5000, tol: float = 1e-8) -> BetaModel:
    """
    Fit sigmoid(a ln p - b ln(1 - p) + c) with a = exp(alpha), b = exp(beta)

    Non-convergence is flagged on the model; the best iterate is kept.
    """
    _require_both_classes(cal, CalibratorKind.BETA)
    p = np.clip(cal.probs, BETA_CLIP, 1.0 - BETA_CLIP)
    log_p = np.log(p)
    neg_log_q = -np.log1p(-p)
    y = cal.labels.astype(float)

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        a, b, c = math.exp(theta[0]), math.exp(theta[1]), theta[2]
        scores = a * log_p + b * neg_log_q + c
        residual = expit(scores) - y
        grad = np.array([
            np.mean(residual * log_p) * a,
            np.mean(residual * neg_log_q) * b,
            np.mean(residual),
        ])
        return _logistic_nll(scores, y), grad

    result = minimize(
        objective,
        x0=np.zeros(3),
        jac=True,
        method="L-BFGS-B",
        bounds=[(-20.0, 10.0), (-20.0, 10.0), (None, None)],
        options={"gtol": tol, "maxiter": max_iter},
    )
    if not result.success:
        logger.warning("beta_not_converged", message=str(result.message), iterations=int(result.nit))

    return BetaModel(
        a=math.exp(result.x[0]),
        b=math.exp(result.x[1]),
        c=float(result.x[2]),
        iterations=int(result.nit),
        converged=bool(result.success),
    )


# ---------------------------------------------------------------------------
# Temperature scaling
# ---------------------------------------------------------------------------

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section(func, lower: float, upper: float, tol: float) -> float:
    a, b = lower, upper
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = func(d)
    return (a + b) / 2.0


def fit_temperature(
    cal: FoldSeries,
    lower: float = 0.05,
    upper: float = 20.0,
    tol: float = 1e-6,
) -> TemperatureModel:
    """Golden-section search for T on the log scale over [lower, upper]"""
    _require_both_classes(cal, CalibratorKind.TEMPERATURE)
    x = _fit_logits(cal.probs)
    y = cal.labels.astype(float)

    log_t = _golden_section(
        lambda u: _logistic_nll(x / math.exp(u), y), math.log(lower), math.log(upper), tol
    )
    return TemperatureModel(temperature=math.exp(log_t))


# ---------------------------------------------------------------------------
# Venn-Abers
# ---------------------------------------------------------------------------

def _merge(p0: float, p1: float) -> VennAbersOutput:
    return VennAbersOutput(p0=p0, p1=p1, merged=p1 / (1.0 - p0 + p1))


def _augmented_value(
    thresholds: np.ndarray, sums: np.ndarray, counts: np.ndarray, score: float, label: int
) -> float:
    """Isotonic fit over calibration + {(score, label)} evaluated at score"""
    position = int(np.searchsorted(thresholds, score, side="left"))
    exact = position < thresholds.shape[0] and thresholds[position] == score
    if exact:
        new_sums = sums.copy()
        new_counts = counts.copy()
        new_sums[position] += label
        new_counts[position] += 1.0
    else:
        new_sums = np.insert(sums, position, float(label))
        new_counts = np.insert(counts, position, 1.0)
    return float(_pav(new_sums, new_counts)[position])


def _venn_abers_naive(cal: FoldSeries, score: float) -> VennAbersOutput:
    bounds = []
    for label in (0, 1):
        scores = np.append(cal.probs, score)
        labels = np.append(cal.labels, label)
        thresholds, sums, counts = _grouped(scores, labels)
        fitted = _pav(sums, counts)
        bounds.append(float(_step_predict(thresholds, fitted, np.array([score]))[0]))
    return _merge(bounds[0], bounds[1])


def venn_abers_predict(
    cal: FoldSeries,
    test_scores: Sequence[float],
    fast: bool = True,
) -> List[VennAbersOutput]:
    """
    Inductive Venn-Abers probability intervals

    For each test score s, p0 (p1) is the isotonic fit over the calibration
    pairs plus (s, 0) (resp. (s, 1)) evaluated at s. The fast path caches
    results per slot: the augmented fit depends only on where s falls among
    the calibration scores (strictly between two of them, or equal to one).
    """
    if len(cal) == 0:
        raise FitError("venn-abers: calibration set is empty")
    scores = _as_probs(test_scores)
    if scores.size == 0:
        return []

    if not fast:
        return [_venn_abers_naive(cal, float(s)) for s in scores]

    thresholds, sums, counts = _grouped(cal.probs, cal.labels)
    cache: Dict[Tuple[int, bool], VennAbersOutput] = {}
    outputs = []
    for s in scores:
        position = int(np.searchsorted(thresholds, s, side="left"))
        slot = (position, bool(position < thresholds.shape[0] and thresholds[position] == s))
        if slot not in cache:
            p0 = _augmented_value(thresholds, sums, counts, float(s), 0)
            p1 = _augmented_value(thresholds, sums, counts, float(s), 1)
            cache[slot] = _merge(p0, p1)
        outputs.append(cache[slot])
    return outputs


def fit_venn_abers(cal: FoldSeries, fast: bool = True) -> VennAbersModel:
    _require_nonempty(cal, CalibratorKind.VENN_ABERS)
    return VennAbersModel(scores=cal.probs.tolist(), labels=cal.labels.astype(int).tolist(), fast=fast)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def fit_calibrator(
    kind: Union[CalibratorKind, str],
    cal: FoldSeries,
    platt_smoothing: bool = True,
    fast_venn_abers: bool = True,
) -> _FittedModel:
    kind = CalibratorKind(kind)
    if kind == CalibratorKind.PLATT:
        return fit_platt(cal, smoothing=platt_smoothing)
    if kind == CalibratorKind.ISOTONIC:
        return fit_isotonic(cal)
    if kind == CalibratorKind.BETA:
        return fit_beta(cal)
    if kind == CalibratorKind.TEMPERATURE:
        return fit_temperature(cal)
    return fit_venn_abers(cal, fast=fast_venn_abers)


def apply_calibrator(model: Optional[_FittedModel], probs: Sequence[float]) -> np.ndarray:
    """Element-wise application of a fitted map; outputs stay in [0, 1]"""
    if model is None or not isinstance(model, _FITTED_TYPES):
        raise UsageError("calibrator is not fitted")
    return np.clip(model.predict(probs), 0.0, 1.0)


def calibration_subset(cal: FoldSeries, fraction: float, seed: int) -> FoldSeries:
    """Seeded held-out share of the calibration split; fraction 1 keeps everything"""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"split fraction must lie in (0, 1], got {fraction}")
    if fraction >= 1.0:
        return cal
    size = max(2, int(round(fraction * len(cal))))
    rng = np.random.default_rng(seed)
    index = np.sort(rng.choice(len(cal), size=min(size, len(cal)), replace=False))
    return FoldSeries(cal.labels[index], cal.probs[index])


class PostHocCalibrator:
    """Fit-then-predict wrapper around the five calibration maps"""

    def __init__(
        self,
        kind: Union[CalibratorKind, str],
        platt_smoothing: bool = True,
        fast_venn_abers: bool = True,
        split_fraction: float = 1.0,
        seed: int = 0,
    ):
        self.kind = CalibratorKind(kind)
        self.platt_smoothing = platt_smoothing
        self.fast_venn_abers = fast_venn_abers
        self.split_fraction = split_fraction
        self.seed = seed
        self.model_: Optional[_FittedModel] = None

    def fit(self, cal: FoldSeries) -> "PostHocCalibrator":
        subset = calibration_subset(cal, self.split_fraction, self.seed)
        self.model_ = fit_calibrator(
            self.kind, subset,
            platt_smoothing=self.platt_smoothing,
            fast_venn_abers=self.fast_venn_abers,
        )
        return self

    def predict(self, probs: Sequence[float]) -> np.ndarray:
        if self.model_ is None:
            raise UsageError(f"{self.kind.value} calibrator used before fit()")
        return apply_calibrator(self.model_, probs)
