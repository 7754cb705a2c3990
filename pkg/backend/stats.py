"""
Statistical comparison of models

Wilcoxon signed-rank tests, bootstrap intervals on expected ranks,
head-to-head dataset wins, miscalibration rates and calibration effects.
"""
import itertools
import zlib
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.stats import norm, rankdata, spearmanr

from errors import InsufficientDataError, InvalidInputError
from matrix import assign_quadrants_median
from models import (
    Alternative,
    AxisConcordance,
    EffectSummary,
    HeadToHeadResult,
    Metric,
    MetricEffect,
    MetricTable,
    MiscalibrationSummary,
    RankSummary,
    WilcoxonResult,
    ZResult,
)

logger = structlog.get_logger(__name__)

EXACT_LIMIT = 25
MIN_WILCOXON_PAIRS = 5
MIN_BOOTSTRAP_RESAMPLES = 1_000
BOOTSTRAP_CHUNK = 1_000
Z_CRITICAL = 1.96
EFFECT_METRICS = (Metric.LOGLOSS, Metric.BRIER, Metric.AUC, Metric.ABS_Z)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _signed_rank_distribution(n: int) -> np.ndarray:
    """Number of sign assignments giving each W+ in 0..n(n+1)/2 (integer ranks 1..n)"""
    counts = np.zeros(n * (n + 1) // 2 + 1, dtype=np.float64)
    counts[0] = 1.0
    for rank in range(1, n + 1):
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:-rank]
        counts = counts + shifted
    return counts


def _exact_p(w_plus: float, n: int, alternative: Alternative) -> float:
    counts = _signed_rank_distribution(n)
    total = counts.sum()
    w = int(round(w_plus))
    lower = counts[: w + 1].sum() / total
    upper = counts[w:].sum() / total
    if alternative == Alternative.GREATER:
        return float(upper)
    if alternative == Alternative.LESS:
        return float(lower)
    return float(min(1.0, 2.0 * min(lower, upper)))


def _normal_p(w_plus: float, n: int, tie_sizes: np.ndarray, alternative: Alternative) -> float:
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes ** 3 - tie_sizes) / 48.0
    if variance <= 0.0:
        return 1.0
    sd = np.sqrt(variance)
    if alternative == Alternative.GREATER:
        return float(norm.sf((w_plus - mean - 0.5) / sd))
    if alternative == Alternative.LESS:
        return float(norm.cdf((w_plus - mean + 0.5) / sd))
    z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(
    a: Sequence[float],
    b: Sequence[float],
    alternative: Union[Alternative, str] = Alternative.TWO_SIDED,
    min_pairs: int = MIN_WILCOXON_PAIRS,
) -> WilcoxonResult:
    """
    Paired signed-rank test on the differences a - b

    Zero differences are dropped. The exact null distribution is used when
    at most 25 differences remain and no |difference| is tied; otherwise a
    normal approximation with tie-corrected variance and a 0.5 continuity
    correction.

    Args:
        a: first sample
        b: second sample, paired with a
        alternative: "two-sided", "greater" (a tends to exceed b) or "less"
        min_pairs: minimum nonzero differences required

    Returns:
        WilcoxonResult; the statistic is min(W+, W-) for two-sided tests and W+ otherwise
    """
    alternative = Alternative(alternative)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"paired samples must have equal length, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("paired samples must be finite")

    differences = a - b
    differences = differences[differences != 0.0]
    n = int(differences.shape[0])
    if n < min_pairs:
        raise InsufficientDataError(
            f"Wilcoxon test needs at least {min_pairs} nonzero differences, got {n}"
        )

    magnitudes = np.abs(differences)
    ranks = rankdata(magnitudes, method="average")
    w_plus = float(ranks[differences > 0].sum())
    w_minus = float(ranks[differences < 0].sum())

    _, tie_sizes = np.unique(magnitudes, return_counts=True)
    tie_sizes = tie_sizes[tie_sizes > 1].astype(float)
    tie_count = int(tie_sizes.shape[0])

    if n <= EXACT_LIMIT and tie_count == 0:
        method = "exact"
        p_value = _exact_p(w_plus, n, alternative)
    else:
        method = "normal-approx"
        p_value = _normal_p(w_plus, n, tie_sizes, alternative)

    statistic = min(w_plus, w_minus) if alternative == Alternative.TWO_SIDED else w_plus
    return WilcoxonResult(
        w_statistic=statistic,
        n_effective=n,
        p_value=float(np.clip(p_value, 0.0, 1.0)),
        method=method,
        tie_count=tie_count,
        alternative=alternative,
    )


def pairwise_wilcoxon(
    table: MetricTable,
    models: Sequence[str],
    metric: Union[Metric, str] = Metric.LOGLOSS,
    alternative: Union[Alternative, str] = Alternative.TWO_SIDED,
    min_pairs: int = MIN_WILCOXON_PAIRS,
) -> Dict[Tuple[str, str], WilcoxonResult]:
    """
    Signed-rank test for every unordered model pair, paired on shared cells

    Pairs with too few usable cells are skipped with a warning.
    """
    metric = Metric(metric)
    models = sorted(set(models))
    _require_models(table, models)
    wide = table.pivot(metric.value)

    results: Dict[Tuple[str, str], WilcoxonResult] = {}
    for first, second in itertools.combinations(models, 2):
        paired = wide[[first, second]].dropna()
        try:
            results[(first, second)] = wilcoxon_signed_rank(
                paired[first].to_numpy(), paired[second].to_numpy(),
                alternative=alternative, min_pairs=min_pairs,
            )
        except InsufficientDataError as exc:
            logger.warning("wilcoxon_pair_skipped", first=first, second=second, reason=str(exc))
    return results


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def _model_seed(seed: int, model: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(model.encode("utf-8"))])


def bootstrap_ci(
    values_per_cell: Mapping[str, Sequence[float]],
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> Dict[str, Tuple[float, float]]:
    """
    Percentile interval of the mean over cells resampled with replacement

    Each model draws from its own PCG64 stream seeded by (seed, crc32(model)),
    split into fixed-size chunks of resamples, so results depend only on the
    seed and the multiset of values.
    """
    if resamples < MIN_BOOTSTRAP_RESAMPLES:
        raise InvalidInputError(f"bootstrap needs at least {MIN_BOOTSTRAP_RESAMPLES} resamples, got {resamples}")
    if not 0.0 < level < 1.0:
        raise InvalidInputError(f"confidence level must lie in (0, 1), got {level}")

    alpha = (1.0 - level) / 2.0
    intervals: Dict[str, Tuple[float, float]] = {}
    for model in sorted(values_per_cell):
        values = np.sort(np.asarray(values_per_cell[model], dtype=float))
        if values.size == 0:
            raise InvalidInputError(f"no values to bootstrap for '{model}'")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(f"non-finite values in bootstrap input for '{model}'")

        n = values.shape[0]
        chunks = -(-resamples // BOOTSTRAP_CHUNK)
        means = np.empty(resamples)
        for index, child in enumerate(_model_seed(seed, model).spawn(chunks)):
            start = index * BOOTSTRAP_CHUNK
            size = min(BOOTSTRAP_CHUNK, resamples - start)
            draws = np.random.Generator(np.random.PCG64(child)).integers(0, n, size=(size, n))
            means[start:start + size] = values[draws].mean(axis=1)

        low, high = np.quantile(means, [alpha, 1.0 - alpha])
        intervals[model] = (float(low), float(high))
    return intervals


def rank_intervals(
    summary: RankSummary,
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> Dict[str, Tuple[float, float]]:
    """Bootstrap intervals on the expected ranks held in a RankSummary"""
    if summary.cell_ranks.empty:
        return {}
    values = {
        str(model): summary.cell_ranks[model].dropna().to_numpy()
        for model in summary.cell_ranks.columns
    }
    return bootstrap_ci(values, resamples=resamples, level=level, seed=seed)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def miscalibration_rate(z_per_cell: Sequence[Union[ZResult, float]]) -> MiscalibrationSummary:
    """Mean and median |Z| plus the percentage of cells with |Z| > 1.96"""
    values = np.array(
        [abs(item.z) if isinstance(item, ZResult) else abs(float(item)) for item in z_per_cell],
        dtype=float,
    )
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise InvalidInputError("miscalibration rate needs at least one Z value")
    return MiscalibrationSummary(
        mean_abs_z=float(values.mean()),
        median_abs_z=float(np.median(values)),
        pct_significant=float(100.0 * np.mean(values > Z_CRITICAL)),
        cells=int(values.size),
    )


def _require_models(table: MetricTable, models: Sequence[str]) -> None:
    if not models:
        raise InvalidInputError("at least one model is required")
    missing = sorted(set(models) - set(table.models))
    if missing:
        raise InvalidInputError(f"models not in the table: {', '.join(missing)}")


def head_to_head_wins(
    table: MetricTable,
    models: Sequence[str],
    metric: Union[Metric, str] = Metric.LOGLOSS,
) -> HeadToHeadResult:
    """
    Dataset-level wins: the model with the strictly best fold-mean wins

    A dataset where the best mean is shared by several models counts as a
    tie and awards no win. A model with no value on a dataset does not
    compete there.
    """
    metric = Metric(metric)
    models = sorted(set(models))
    _require_models(table, models)
    if not table.datasets:
        raise InvalidInputError("head-to-head comparison needs at least one dataset")

    cells = table.restrict(models).cells
    means = cells.groupby(["dataset", "model"])[metric.value].mean().unstack("model")
    wins = {model: 0 for model in models}
    winners: Dict[str, Optional[str]] = {}
    ties = 0
    for dataset, row in means.sort_index().iterrows():
        row = row.dropna()
        if row.empty:
            winners[str(dataset)] = None
            ties += 1
            continue
        best = row.max() if metric.higher_is_better else row.min()
        leaders = row.index[row == best].tolist()
        if len(leaders) == 1:
            wins[str(leaders[0])] += 1
            winners[str(dataset)] = str(leaders[0])
        else:
            winners[str(dataset)] = None
            ties += 1

    return HeadToHeadResult(
        metric=metric.value,
        wins=wins,
        ties=ties,
        datasets=len(winners),
        winners=winners,
    )


def calibration_effect(
    base: MetricTable,
    calibrated: MetricTable,
    model: str,
    calibrator: Optional[str] = None,
) -> EffectSummary:
    """
    Per-metric percentage change after calibration, cell by cell

    delta = 100 * (calibrated - base) / |base|, averaged over cells; cells
    with base = 0 are excluded and counted. ``improved_fraction`` is the
    share of cells that strictly improved in the metric's direction.
    """
    _require_models(base, [model])
    _require_models(calibrated, [model])
    columns = ["dataset", "fold"] + [m.value for m in EFFECT_METRICS]
    before = base.cells[base.cells["model"] == model][columns].set_index(["dataset", "fold"]).sort_index()
    after = calibrated.cells[calibrated.cells["model"] == model][columns].set_index(["dataset", "fold"]).sort_index()
    if not before.index.equals(after.index):
        raise InvalidInputError(f"base and calibrated tables cover different cells for '{model}'")

    effects: Dict[str, MetricEffect] = {}
    for metric in EFFECT_METRICS:
        pair = np.column_stack([before[metric.value].to_numpy(float), after[metric.value].to_numpy(float)])
        pair = pair[np.all(np.isfinite(pair), axis=1)]
        old, new = pair[:, 0], pair[:, 1]
        improved = new > old if metric.higher_is_better else new < old
        nonzero = old != 0.0
        deltas = 100.0 * (new[nonzero] - old[nonzero]) / np.abs(old[nonzero])
        effects[metric.value] = MetricEffect(
            mean_pct_delta=float(deltas.mean()) if deltas.size else float("nan"),
            improved_fraction=float(improved.mean()) if improved.size else 0.0,
            cells=int(old.size),
            excluded_zero_base=int((~nonzero).sum()),
        )
    return EffectSummary(model=model, metrics=effects, calibrator=calibrator)


def axis_concordance(
    discrimination: RankSummary,
    alternative: RankSummary,
    calibration: RankSummary,
) -> AxisConcordance:
    """
    Spearman correlation of two discrimination axes and quadrant-label agreement

    Both axes are paired with the same calibration ranks and median split.
    """
    if set(discrimination.expected) != set(alternative.expected):
        raise InvalidInputError("rank summaries cover different models")
    models = sorted(discrimination.expected)
    if len(models) < 3:
        raise InsufficientDataError("rank correlation needs at least three models")

    rho, p_value = spearmanr(
        [discrimination.expected[m] for m in models],
        [alternative.expected[m] for m in models],
    )
    primary = assign_quadrants_median(discrimination, calibration).quadrants()
    swapped = assign_quadrants_median(alternative, calibration).quadrants()
    disagreements = [m for m in models if primary[m] != swapped[m]]
    return AxisConcordance(
        rho=float(rho),
        p_value=float(p_value),
        label_agreement=1.0 - len(disagreements) / len(models),
        disagreements=disagreements,
    )
