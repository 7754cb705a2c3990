"""
Main analysis orchestration service
Implements each workflow from prediction logs to report artifacts
"""
import csv
import io
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from calibrators import PostHocCalibrator
from config import RunConfig, get_settings
from errors import InsufficientDataError, InvalidInputError, PipelineError, UsageError
from matrix import (
    assign_quadrants_absolute,
    assign_quadrants_median,
    build_metric_table,
    expected_ranks,
    mean_abs_z_by_model,
    per_dataset_stability,
    rank_summary_from_mapping,
)
from metrics import brier_decomposition
from models import (
    CalibratorKind,
    CellKey,
    DecompositionScheme,
    DiscriminationAxis,
    FoldSeries,
    Metric,
    MetricTable,
    QuadrantReport,
    QuadrantRule,
)
from report_io import (
    emit_report,
    read_prediction_files,
    read_rank_table,
    render_matrix_svg,
    write_predictions,
)
from stats import (
    axis_concordance,
    calibration_effect,
    head_to_head_wins,
    miscalibration_rate,
    pairwise_wilcoxon,
    rank_intervals,
)
from synth import archetype_spec, generate_multi_cohort

logger = structlog.get_logger(__name__)


def _csv_text(header: List[str], rows: List[list]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else repr(float(v)) if isinstance(v, float) else v for v in row])
    return buffer.getvalue()


def _predictions_text(groups: Dict[CellKey, FoldSeries]) -> str:
    buffer = io.StringIO()
    write_predictions(groups, buffer)
    return buffer.getvalue()


class AnalysisService:
    """
    Orchestrates the pipeline for one invocation

    Every public method returns ``{'success': True, 'data': {...}}`` or the
    failure payload of the PipelineError that stopped it. ``data`` always
    carries ``artifacts`` (file name -> text) so the caller decides where
    they are written.
    """

    def __init__(self, config: Optional[RunConfig] = None):
        self.config = config or get_settings()

    # ------------------------------------------------------------------
    # Public workflows
    # ------------------------------------------------------------------

    def diagnose(self) -> Dict:
        """Per-model metric summaries over every cell"""
        return self._guard("diagnose", self._diagnose)

    def build_matrix(self) -> Dict:
        """Expected ranks, quadrants, intervals, stability and the SVG figure"""
        return self._guard("matrix", self._build_matrix)

    def calibrate(self) -> Dict:
        """Fit on the calibration split, apply to the test split, report effects"""
        return self._guard("calibrate", self._calibrate)

    def compare(self) -> Dict:
        """Head-to-head dataset wins and pairwise signed-rank tests"""
        return self._guard("compare", self._compare)

    def decompose(self) -> Dict:
        """Brier components per (dataset, fold, model) group"""
        return self._guard("decompose", self._decompose)

    def synthesize(self) -> Dict:
        """Seeded synthetic cohort written as prediction logs"""
        return self._guard("synth", self._synthesize)

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _guard(self, command: str, workflow) -> Dict:
        log = logger.bind(command=command)
        log.info("workflow_started")
        try:
            data = workflow()
        except PipelineError as exc:
            log.error("workflow_failed", error_code=exc.error_code, error=exc.message)
            return exc.to_payload()
        log.info("workflow_finished", artifacts=sorted(data.get("artifacts", {})))
        return {'success': True, 'data': data}

    def _load_groups(self, paths: List[str]) -> Dict[CellKey, FoldSeries]:
        if not paths:
            raise UsageError("no prediction logs given")
        parsed = read_prediction_files(
            paths,
            strict=self.config.strict,
            column_map=self.config.column_map,
            delimiter=self.config.delimiter,
        )
        if not parsed.groups:
            raise InvalidInputError("prediction logs contain no usable groups")
        return parsed.groups

    def _table(self, groups: Dict[CellKey, FoldSeries], scheme: Optional[DecompositionScheme] = None) -> MetricTable:
        return build_metric_table(
            groups,
            clip_eps=self.config.clip_eps,
            scheme=scheme or self.config.decomposition_scheme,
            bin_count=self.config.bins,
            workers=self.config.workers,
        )

    def _resolution_table(self, groups: Dict[CellKey, FoldSeries], table: MetricTable) -> MetricTable:
        """Table whose resolution column can rank models"""
        # Unique-value resolution equals uncertainty for continuous forecasts
        if self.config.decomposition_scheme != DecompositionScheme.UNIQUE_VALUE:
            return table
        return self._table(groups, scheme=DecompositionScheme.EQUAL_MASS)

    def _discrimination_metric(self) -> Metric:
        if self.config.discrimination_axis == DiscriminationAxis.BRIER_RESOLUTION:
            return Metric.RESOLUTION
        return Metric.AUC

    def _model_summaries(self, table: MetricTable) -> Dict[str, Dict]:
        summaries = {}
        means = table.cells.groupby("model")[["logloss", "brier", "auc", "abs_z", "resolution"]].mean()
        for model in table.models:
            z_values = table.cells.loc[table.cells["model"] == model, "z"].dropna().tolist()
            row = means.loc[model]
            summaries[model] = {
                "cells": int((table.cells["model"] == model).sum()),
                "mean_logloss": float(row["logloss"]),
                "mean_brier": float(row["brier"]),
                "mean_auc": float(row["auc"]),
                "mean_resolution": float(row["resolution"]),
                "miscalibration": miscalibration_rate(z_values) if z_values else None,
            }
        return summaries

    # ------------------------------------------------------------------
    # Workflows
    # ------------------------------------------------------------------

    def _diagnose(self) -> Dict:
        # Step 1: Parse and evaluate
        table = self._table(self._load_groups(self.config.inputs))

        # Step 2: Summaries per model
        summaries = self._model_summaries(table)

        # Step 3: Artifacts
        columns = list(table.cells.columns)
        rows = table.cells.sort_values(["model", "dataset", "fold"]).itertuples(index=False, name=None)
        clean_rows = [[None if isinstance(v, float) and np.isnan(v) else v for v in row] for row in rows]
        report = emit_report(config=self.config, command="diagnose", stats={
            "datasets": table.datasets,
            "folds_per_dataset": table.folds_per_dataset,
            "model_summaries": summaries,
        })
        return {
            'models': summaries,
            'table': table,
            'artifacts': {
                'report.json': report,
                'metrics.csv': _csv_text(columns, clean_rows),
            },
        }

    def _matrix_from_ranks(self) -> Tuple[QuadrantReport, Dict]:
        try:
            with open(self.config.ranks_input, encoding="utf-8-sig", newline="") as handle:
                ranks = read_rank_table(handle, delimiter=self.config.delimiter)
        except OSError as exc:
            raise InvalidInputError(f"cannot read '{self.config.ranks_input}': {exc.strerror}") from None
        except UnicodeDecodeError as exc:
            raise InvalidInputError(f"{self.config.ranks_input}: not valid UTF-8 at byte {exc.start}") from None

        discrimination = rank_summary_from_mapping(Metric.AUC, ranks.auc)
        calibration = rank_summary_from_mapping(Metric.ABS_Z, ranks.z)
        if self.config.quadrant_rule == QuadrantRule.ABSOLUTE:
            if ranks.mean_abs_z is None:
                raise InvalidInputError("absolute rule needs a mean_abs_z column in the rank table")
            report = assign_quadrants_absolute(
                discrimination, ranks.mean_abs_z, self.config.z_threshold, calibration=calibration,
            )
        else:
            report = assign_quadrants_median(discrimination, calibration, mean_abs_z=ranks.mean_abs_z)
        return report, {"source": "rank-table"}

    def _matrix_from_logs(self) -> Tuple[QuadrantReport, Dict]:
        # Step 1: Parse and evaluate
        groups = self._load_groups(self.config.inputs)
        table = self._table(groups)
        resolution_table = self._resolution_table(groups, table)

        # Step 2: Expected ranks on both axes
        d_metric = self._discrimination_metric()
        if d_metric == Metric.RESOLUTION:
            table = resolution_table
        discrimination = expected_ranks(table, d_metric)
        calibration = expected_ranks(table, Metric.ABS_Z)
        mean_abs_z = mean_abs_z_by_model(table)

        # Step 3: Quadrants
        if self.config.quadrant_rule == QuadrantRule.ABSOLUTE:
            report = assign_quadrants_absolute(
                discrimination, mean_abs_z, self.config.z_threshold,
                calibration=calibration, axis=self.config.discrimination_axis,
            )
        else:
            report = assign_quadrants_median(
                discrimination, calibration,
                axis=self.config.discrimination_axis, mean_abs_z=mean_abs_z,
            )

        # Step 4: Bootstrap intervals on both expected ranks
        d_ci = rank_intervals(discrimination, self.config.bootstrap_resamples,
                              self.config.bootstrap_level, self.config.seed)
        z_ci = rank_intervals(calibration, self.config.bootstrap_resamples,
                              self.config.bootstrap_level, self.config.seed)
        for placement in report.placements:
            if placement.model in d_ci:
                placement.ci["auc_rank"] = d_ci[placement.model]
            if placement.model in z_ci:
                placement.ci["z_rank"] = z_ci[placement.model]

        # Step 5: Per-dataset stability and the axis-swap check
        stability = per_dataset_stability(table, d_metric, Metric.ABS_Z, global_report=report)
        stats = {
            "source": "prediction-logs",
            "datasets": len(table.datasets),
            "cells": int(table.cells.groupby(["dataset", "fold"]).ngroups),
            "excluded_cells": {d_metric.value: discrimination.excluded, "abs_z": calibration.excluded},
            "stability": stability,
        }
        alternative_metric = Metric.RESOLUTION if d_metric == Metric.AUC else Metric.AUC
        try:
            stats["axis_concordance"] = axis_concordance(
                discrimination, expected_ranks(resolution_table, alternative_metric), calibration,
            )
        except (InsufficientDataError, InvalidInputError) as exc:
            logger.warning("axis_concordance_skipped", reason=exc.message)
        return report, stats

    def _build_matrix(self) -> Dict:
        if self.config.ranks_input:
            report, stats = self._matrix_from_ranks()
        else:
            report, stats = self._matrix_from_logs()

        ranks_rows = [
            [p.model, p.auc_rank, p.z_rank, p.mean_abs_z, p.quadrant.value, p.prescription.value]
            for p in sorted(report.placements, key=lambda p: p.model)
        ]
        return {
            'report': report,
            'stats': stats,
            'artifacts': {
                'report.json': emit_report(report, self.config, stats, command="matrix"),
                'matrix.svg': render_matrix_svg(report),
                'ranks.csv': _csv_text(
                    ["model", "auc_rank", "z_rank", "mean_abs_z", "quadrant", "prescription"], ranks_rows,
                ),
            },
        }

    def _fit_seed(self, key: CellKey) -> int:
        dataset, fold, model = key
        return (self.config.seed ^ zlib.crc32(f"{dataset}|{fold}|{model}".encode("utf-8"))) & 0xFFFFFFFF

    def _calibrate_groups(
        self,
        kind: CalibratorKind,
        test: Dict[CellKey, FoldSeries],
        calibration: Dict[CellKey, FoldSeries],
    ) -> Dict[CellKey, FoldSeries]:
        def fit_apply(key: CellKey) -> FoldSeries:
            calibrator = PostHocCalibrator(
                kind,
                platt_smoothing=self.config.platt_smoothing,
                fast_venn_abers=self.config.fast_venn_abers,
                split_fraction=self.config.split_fraction,
                seed=self._fit_seed(key),
            ).fit(calibration[key])
            return test[key].with_probs(calibrator.predict(test[key].probs))

        keys = sorted(test)
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(fit_apply, keys))
        else:
            results = [fit_apply(key) for key in keys]
        return dict(zip(keys, results))

    def _calibrate(self) -> Dict:
        # Step 1: Load both splits
        test = self._load_groups(self.config.inputs)
        if not self.config.calibration_input:
            raise UsageError("calibrate needs a calibration split (--calibration)")
        calibration = self._load_groups([self.config.calibration_input])
        missing = sorted(set(test) - set(calibration))
        if missing:
            dataset, fold, model = missing[0]
            raise InvalidInputError(
                f"no calibration data for dataset '{dataset}' fold {fold} model '{model}'",
                details=f"{len(missing)} test groups lack calibration data",
            )

        # Step 2: Fit, apply and evaluate per calibrator kind
        base = self._table(test)
        effects: Dict[str, Dict] = {}
        artifacts: Dict[str, str] = {}
        for kind in self.config.calibrator_kinds:
            kind = CalibratorKind(kind)
            calibrated_groups = self._calibrate_groups(kind, test, calibration)
            calibrated = self._table(calibrated_groups)
            effects[kind.value] = {
                model: calibration_effect(base, calibrated, model, calibrator=kind.value)
                for model in base.models
            }
            artifacts[f"calibrated-{kind.value}.csv"] = _predictions_text(calibrated_groups)
            logger.info("calibrator_applied", kind=kind.value, groups=len(calibrated_groups))

        artifacts['report.json'] = emit_report(
            config=self.config, command="calibrate", stats={"effects": effects},
        )
        return {'effects': effects, 'artifacts': artifacts}

    def _compare(self) -> Dict:
        table = self._table(self._load_groups(self.config.inputs))
        models = list(self.config.compare_models) or table.models
        metric = self.config.compare_metric

        wins = head_to_head_wins(table, models, metric)
        tests = pairwise_wilcoxon(table, models, metric, self.config.wilcoxon_alternative)
        miscalibration = {}
        for model in sorted(set(models)):
            z_values = table.cells.loc[table.cells["model"] == model, "z"].dropna().tolist()
            if z_values:
                miscalibration[model] = miscalibration_rate(z_values)

        stats = {"head_to_head": wins, "wilcoxon": tests, "miscalibration": miscalibration}
        return {
            'head_to_head': wins,
            'wilcoxon': tests,
            'miscalibration': miscalibration,
            'artifacts': {'report.json': emit_report(config=self.config, command="compare", stats=stats)},
        }

    def _decompose(self) -> Dict:
        groups = self._load_groups(self.config.inputs)
        rows = []
        components = {}
        for key in sorted(groups):
            result = brier_decomposition(groups[key], self.config.decomposition_scheme, self.config.bins)
            dataset, fold, model = key
            rows.append([dataset, fold, model, result.brier, result.reliability, result.resolution,
                         result.uncertainty, result.residual, result.bin_count])
            components[key] = result

        header = ["dataset", "fold", "model", "brier", "reliability", "resolution",
                  "uncertainty", "residual", "bins"]
        report = emit_report(config=self.config, command="decompose", stats={
            "scheme": self.config.decomposition_scheme,
            "groups": len(rows),
            "max_abs_residual": max(abs(r[7]) for r in rows),
        })
        return {
            'components': components,
            'artifacts': {'decomposition.csv': _csv_text(header, rows), 'report.json': report},
        }

    def _synthesize(self) -> Dict:
        archetypes = list(self.config.synth_archetypes)
        if not archetypes:
            raise InvalidInputError("at least one archetype is required")
        if len(set(archetypes)) != len(archetypes):
            raise InvalidInputError("archetypes must be unique (each becomes one model)")

        grid = {
            "n": self.config.synth_n,
            "datasets": self.config.synth_datasets,
            "folds": self.config.synth_folds,
            "base_rate": self.config.synth_base_rate,
            "seed": self.config.seed,
        }
        profiles = {name: archetype_spec(name, **grid) for name in archetypes}
        cohort = generate_multi_cohort(profiles)
        report = emit_report(config=self.config, command="synth", stats={
            "profiles": {name: spec.model_dump(mode="json") for name, spec in profiles.items()},
            "groups": len(cohort.test),
        })
        return {
            'cohort': cohort,
            'artifacts': {
                'predictions.csv': _predictions_text(cohort.test),
                'calibration.csv': _predictions_text(cohort.calibration),
                'report.json': report,
            },
        }
