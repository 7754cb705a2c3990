"""
Expected ranks and quadrant assignment

Per-cell metrics are ranked within each (dataset, fold) cell, averaged
into expected ranks, and split at the median (or at an absolute |Z|
threshold) into the four archetypes.
"""
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd
import structlog

from errors import InvalidInputError
from metrics import compute_cell_metrics
from models import (
    CellKey,
    DecompositionScheme,
    DiscriminationAxis,
    FoldSeries,
    Metric,
    MetricTable,
    ModelPlacement,
    Quadrant,
    QuadrantReport,
    QuadrantRule,
    RankSummary,
    StabilityEntry,
)

logger = structlog.get_logger(__name__)

_QUADRANT_ORDER = [Quadrant.EAGLE, Quadrant.BULL, Quadrant.SLOTH, Quadrant.MOLE]


def build_metric_table(
    groups: Mapping[CellKey, FoldSeries],
    clip_eps: float = 1e-15,
    scheme: DecompositionScheme = DecompositionScheme.UNIQUE_VALUE,
    bin_count: int = 10,
    workers: int = 1,
) -> MetricTable:
    """
    Compute every metric for every (dataset, fold, model) group

    Within one (dataset, fold) all models must share the instance set;
    this is checked through the instance count and the positive count.
    """
    keys = sorted(groups)
    shapes: Dict[tuple, tuple] = {}
    for dataset, fold, model in keys:
        series = groups[(dataset, fold, model)]
        shape = (len(series), series.n_positive)
        expected = shapes.setdefault((dataset, fold), shape)
        if shape != expected:
            raise InvalidInputError(
                f"models disagree on the instance set of dataset '{dataset}' fold {fold}",
                details=f"model '{model}' has (n, positives) = {shape}, expected {expected}",
            )

    def evaluate(key: CellKey):
        return compute_cell_metrics(groups[key], clip_eps, scheme, bin_count)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, keys))
    else:
        results = [evaluate(key) for key in keys]

    rows = []
    for (dataset, fold, model), cell in zip(keys, results):
        if cell.auc is None:
            logger.warning("auc_undefined", dataset=dataset, fold=fold, model=model)
        if cell.z is None:
            logger.warning("z_degenerate", dataset=dataset, fold=fold, model=model)
        rows.append({
            "model": model,
            "dataset": dataset,
            "fold": fold,
            "logloss": cell.logloss,
            "brier": cell.brier,
            "auc": np.nan if cell.auc is None else cell.auc,
            "z": np.nan if cell.z is None else cell.z,
            "abs_z": np.nan if cell.abs_z is None else cell.abs_z,
            "reliability": cell.reliability,
            "resolution": cell.resolution,
            "uncertainty": cell.uncertainty,
            "n": cell.n,
            "positives": cell.positives,
        })

    columns = ["model", "dataset", "fold", "logloss", "brier", "auc", "z", "abs_z",
               "reliability", "resolution", "uncertainty", "n", "positives"]
    return MetricTable(pd.DataFrame(rows, columns=columns))


def _as_metric(metric: Union[Metric, str]) -> Metric:
    try:
        return Metric(metric)
    except ValueError:
        raise InvalidInputError(f"unknown metric '{metric}'") from None


def expected_ranks(
    table: MetricTable,
    metric: Union[Metric, str],
    higher_is_better: Optional[bool] = None,
) -> RankSummary:
    """
    Mean within-cell fractional rank per model (rank 1 = best)

    Cells where a model's metric is missing (e.g. single-class folds for
    AUC) are excluded from that model's mean and counted in ``excluded``.
    """
    metric = _as_metric(metric)
    if not table.has_metric(metric.value):
        raise InvalidInputError(f"metric '{metric.value}' is not in the table")
    wide = table.pivot(metric.value)
    if wide.shape[1] < 2:
        raise InvalidInputError("ranking needs at least two models")

    if higher_is_better is None:
        higher_is_better = metric.higher_is_better
    ranks = wide.rank(axis=1, method="average", ascending=not higher_is_better, na_option="keep")

    excluded = {str(m): int(v) for m, v in wide.isna().sum().items()}
    if any(excluded.values()):
        logger.warning(
            "cells_excluded_from_ranking",
            metric=metric.value,
            excluded={m: n for m, n in excluded.items() if n},
        )

    expected = {str(m): float(v) for m, v in ranks.mean(axis=0, skipna=True).items()}
    counts = {str(m): int(v) for m, v in ranks.notna().sum().items()}
    return RankSummary(
        metric=metric.value,
        expected=expected,
        cell_counts=counts,
        excluded=excluded,
        cell_ranks=ranks,
    )


def rank_summary_from_mapping(metric: Union[Metric, str], expected: Mapping[str, float]) -> RankSummary:
    """Wrap published expected ranks (no per-cell detail) as a RankSummary"""
    metric = _as_metric(metric)
    return RankSummary(
        metric=metric.value,
        expected={str(k): float(v) for k, v in expected.items()},
        cell_counts={str(k): 0 for k in expected},
        excluded={str(k): 0 for k in expected},
        cell_ranks=pd.DataFrame(),
    )


def _check_expected(summary: RankSummary) -> None:
    missing = [m for m, v in summary.expected.items() if not np.isfinite(v)]
    if missing:
        raise InvalidInputError(
            f"no rankable cells for {', '.join(sorted(missing))} on metric '{summary.metric}'"
        )


def assign_quadrants_median(
    discrimination: RankSummary,
    calibration: RankSummary,
    axis: DiscriminationAxis = DiscriminationAxis.AUC,
    mean_abs_z: Optional[Mapping[str, float]] = None,
) -> QuadrantReport:
    """
    Median split on both axes; rank <= median is the good side

    With an even model count the median is the mean of the two middle
    ranks (numpy convention).
    """
    if set(discrimination.expected) != set(calibration.expected):
        raise InvalidInputError("discrimination and calibration rank summaries cover different models")
    if len(discrimination.expected) < 2:
        raise InvalidInputError("quadrant assignment needs at least two models")
    _check_expected(discrimination)
    _check_expected(calibration)

    d_threshold = float(np.median(list(discrimination.expected.values())))
    c_threshold = float(np.median(list(calibration.expected.values())))

    placements = []
    for model in sorted(discrimination.expected):
        d_rank = discrimination.expected[model]
        c_rank = calibration.expected[model]
        d_good = d_rank <= d_threshold
        c_good = c_rank <= c_threshold
        quadrant = Quadrant.from_axes(d_good, c_good)
        placements.append(ModelPlacement(
            model=model,
            auc_rank=d_rank,
            z_rank=c_rank,
            mean_abs_z=None if mean_abs_z is None else mean_abs_z.get(model),
            discrimination_good=d_good,
            calibration_good=c_good,
            quadrant=quadrant,
            prescription=quadrant.prescription,
        ))

    return QuadrantReport(
        placements=placements,
        rule=QuadrantRule.MEDIAN,
        discrimination_threshold=d_threshold,
        calibration_threshold=c_threshold,
        discrimination_axis=axis,
    )


def assign_quadrants_absolute(
    discrimination: RankSummary,
    mean_abs_z: Mapping[str, float],
    z_threshold: float = 1.96,
    calibration: Optional[RankSummary] = None,
    axis: DiscriminationAxis = DiscriminationAxis.AUC,
) -> QuadrantReport:
    """
    Calibration axis by mean |Z| <= z_threshold; discrimination keeps the median split
    """
    if set(discrimination.expected) != set(mean_abs_z):
        raise InvalidInputError("mean |Z| values must cover exactly the ranked models")
    if calibration is not None and set(calibration.expected) != set(mean_abs_z):
        raise InvalidInputError("calibration rank summary covers different models")
    if len(discrimination.expected) < 2:
        raise InvalidInputError("quadrant assignment needs at least two models")
    if z_threshold <= 0:
        raise InvalidInputError(f"z_threshold must be positive, got {z_threshold}")
    _check_expected(discrimination)

    d_threshold = float(np.median(list(discrimination.expected.values())))
    placements = []
    for model in sorted(discrimination.expected):
        d_rank = discrimination.expected[model]
        z_value = float(mean_abs_z[model])
        if not np.isfinite(z_value):
            raise InvalidInputError(f"mean |Z| for '{model}' is not finite")
        d_good = d_rank <= d_threshold
        c_good = z_value <= z_threshold
        quadrant = Quadrant.from_axes(d_good, c_good)
        placements.append(ModelPlacement(
            model=model,
            auc_rank=d_rank,
            z_rank=None if calibration is None else calibration.expected[model],
            mean_abs_z=z_value,
            discrimination_good=d_good,
            calibration_good=c_good,
            quadrant=quadrant,
            prescription=quadrant.prescription,
        ))

    return QuadrantReport(
        placements=placements,
        rule=QuadrantRule.ABSOLUTE,
        discrimination_threshold=d_threshold,
        calibration_threshold=float(z_threshold),
        discrimination_axis=axis,
    )


def mean_abs_z_by_model(table: MetricTable) -> Dict[str, float]:
    """Mean |Z| over each model's cells (degenerate cells skipped)"""
    means = table.cells.groupby("model")["abs_z"].mean()
    return {str(m): float(v) for m, v in means.items()}


def per_dataset_stability(
    table: MetricTable,
    discrimination_metric: Union[Metric, str] = Metric.AUC,
    calibration_metric: Union[Metric, str] = Metric.ABS_Z,
    global_report: Optional[QuadrantReport] = None,
) -> Dict[str, StabilityEntry]:
    """
    Quadrant of every model on every dataset separately

    Metrics are averaged over folds within a dataset, models ranked, and a
    median split applied. Returns per-model quadrant frequencies, the modal
    quadrant with its share, and (if a global report is given) the share of
    datasets agreeing with the global quadrant.
    """
    d_metric = _as_metric(discrimination_metric)
    c_metric = _as_metric(calibration_metric)
    datasets = table.datasets
    if not datasets:
        raise InvalidInputError("stability needs at least one dataset")

    assignments: Dict[str, List[Quadrant]] = {m: [] for m in table.models}
    for dataset in datasets:
        subset = table.cells[table.cells["dataset"] == dataset]
        means = subset.groupby("model")[[d_metric.value, c_metric.value]].mean().dropna()
        if len(means) < 2:
            logger.warning("dataset_skipped_for_stability", dataset=dataset, rankable_models=len(means))
            continue

        d_rank = means[d_metric.value].rank(method="average", ascending=not d_metric.higher_is_better)
        c_rank = means[c_metric.value].rank(method="average", ascending=not c_metric.higher_is_better)
        d_threshold = d_rank.median()
        c_threshold = c_rank.median()
        for model in means.index:
            quadrant = Quadrant.from_axes(d_rank[model] <= d_threshold, c_rank[model] <= c_threshold)
            assignments[str(model)].append(quadrant)

    global_quadrants = global_report.quadrants() if global_report is not None else {}
    result: Dict[str, StabilityEntry] = {}
    for model, quadrants in assignments.items():
        if not quadrants:
            continue
        counts = Counter(quadrants)
        total = len(quadrants)
        frequencies = {q: counts.get(q, 0) / total for q in _QUADRANT_ORDER}
        # Ties resolved in Eagle, Bull, Sloth, Mole order
        modal = max(_QUADRANT_ORDER, key=lambda q: (counts.get(q, 0), -_QUADRANT_ORDER.index(q)))
        global_agreement = None
        if model in global_quadrants:
            global_agreement = frequencies[global_quadrants[model]]
        result[model] = StabilityEntry(
            frequencies=frequencies,
            modal_quadrant=modal,
            modal_agreement=frequencies[modal],
            datasets=total,
            global_agreement=global_agreement,
        )
    return result
