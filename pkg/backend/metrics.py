"""
Per-fold probability metrics

Brier score, log-loss, AUC-ROC, the Spiegelhalter Z-statistic and the
reliability/resolution/uncertainty decomposition of the Brier score. All
functions are pure and deterministic.
"""
import numpy as np
import structlog
from scipy.stats import rankdata

from errors import DegenerateVarianceError, InvalidInputError, UndefinedAUCError
from models import CellMetrics, DecompositionResult, DecompositionScheme, FoldSeries, ZResult

logger = structlog.get_logger(__name__)

Z_CRITICAL = 1.96
DEFAULT_CLIP_EPS = 1e-15


def _require_nonempty(series: FoldSeries) -> None:
    if len(series) == 0:
        raise InvalidInputError("series is empty")


def brier_score(series: FoldSeries) -> float:
    """Mean squared error between predicted probabilities and outcomes"""
    _require_nonempty(series)
    return float(np.mean((series.probs - series.labels) ** 2))


def log_loss(series: FoldSeries, clip_eps: float = DEFAULT_CLIP_EPS) -> float:
    """Mean negative log-likelihood with probabilities clipped to [eps, 1-eps]"""
    _require_nonempty(series)
    if not 0.0 < clip_eps < 0.5:
        raise InvalidInputError(f"clip_eps must lie in (0, 0.5), got {clip_eps}")
    p = np.clip(series.probs, clip_eps, 1.0 - clip_eps)
    y = series.labels
    return float(-np.mean(np.where(y == 1, np.log(p), np.log1p(-p))))


def auc_roc(series: FoldSeries) -> float:
    """
    Concordance probability via the rank-sum (Mann-Whitney) identity

    Tied scores get average ranks, which counts each tied
    positive/negative pair as one half.

    Raises:
        UndefinedAUCError: if only one class is present
    """
    _require_nonempty(series)
    n_pos = series.n_positive
    n_neg = series.n_negative
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined for a single-class series")

    ranks = rankdata(series.probs, method="average")
    u_statistic = ranks[series.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def spiegelhalter_z(series: FoldSeries) -> ZResult:
    """
    Bin-free calibration test statistic

    z = sum((y - p)(1 - 2p)) / sqrt(sum((1 - 2p)^2 p (1 - p)))

    Raises:
        DegenerateVarianceError: when every p is 0, 0.5 or 1
    """
    _require_nonempty(series)
    p = series.probs
    y = series.labels
    weight = 1.0 - 2.0 * p
    variance = float(np.sum(weight ** 2 * p * (1.0 - p)))
    if variance <= 0.0:
        raise DegenerateVarianceError("Z denominator is zero (all p in {0, 0.5, 1})")

    z = float(np.sum((y - p) * weight) / np.sqrt(variance))
    return ZResult(z=z, significant=abs(z) > Z_CRITICAL)


def _bin_assignments(probs: np.ndarray, scheme: DecompositionScheme, bin_count: int) -> np.ndarray:
    if scheme == DecompositionScheme.UNIQUE_VALUE:
        _, inverse = np.unique(probs, return_inverse=True)
        return inverse.reshape(-1)

    if bin_count < 1:
        raise InvalidInputError(f"bin_count must be >= 1, got {bin_count}")

    if scheme == DecompositionScheme.EQUAL_WIDTH:
        # Right edge 1.0 belongs to the last bin
        return np.minimum((probs * bin_count).astype(np.int64), bin_count - 1)

    # Equal mass: contiguous chunks of the stably sorted probabilities
    order = np.argsort(probs, kind="stable")
    assignment = np.empty(probs.shape[0], dtype=np.int64)
    for index, chunk in enumerate(np.array_split(order, min(bin_count, probs.shape[0]))):
        assignment[chunk] = index
    return assignment


def brier_decomposition(
    series: FoldSeries,
    scheme: DecompositionScheme = DecompositionScheme.UNIQUE_VALUE,
    bin_count: int = 10,
) -> DecompositionResult:
    """
    Reliability / resolution / uncertainty split of the Brier score

    Under unique-value grouping the identity BS = REL - RES + UNC is exact;
    binned schemes report the within-bin remainder as ``residual``.
    """
    _require_nonempty(series)
    scheme = DecompositionScheme(scheme)
    p = series.probs
    y = series.labels.astype(float)
    n = p.shape[0]

    groups = _bin_assignments(p, scheme, bin_count)
    # Drop empty bins so bin_count reports occupied groups only
    _, groups = np.unique(groups, return_inverse=True)
    groups = groups.reshape(-1)
    counts = np.bincount(groups).astype(float)
    mean_p = np.bincount(groups, weights=p) / counts
    mean_y = np.bincount(groups, weights=y) / counts
    base_rate = float(y.mean())

    reliability = float(np.sum(counts * (mean_p - mean_y) ** 2) / n)
    resolution = float(np.sum(counts * (mean_y - base_rate) ** 2) / n)
    uncertainty = base_rate * (1.0 - base_rate)
    residual = brier_score(series) - (reliability - resolution + uncertainty)

    return DecompositionResult(
        reliability=reliability,
        resolution=resolution,
        uncertainty=uncertainty,
        residual=residual,
        bin_count=int(counts.shape[0]),
        scheme=scheme,
    )


def compute_cell_metrics(
    series: FoldSeries,
    clip_eps: float = DEFAULT_CLIP_EPS,
    scheme: DecompositionScheme = DecompositionScheme.UNIQUE_VALUE,
    bin_count: int = 10,
) -> CellMetrics:
    """All metrics for one cell; undefined AUC/Z become None"""
    try:
        auc = auc_roc(series)
    except UndefinedAUCError:
        auc = None
    try:
        z = spiegelhalter_z(series).z
    except DegenerateVarianceError:
        z = None

    decomposition = brier_decomposition(series, scheme, bin_count)
    return CellMetrics(
        logloss=log_loss(series, clip_eps),
        brier=brier_score(series),
        auc=auc,
        z=z,
        reliability=decomposition.reliability,
        resolution=decomposition.resolution,
        uncertainty=decomposition.uncertainty,
        n=len(series),
        positives=series.n_positive,
    )
