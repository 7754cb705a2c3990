"""
Command-line entry point

    python backend/main.py <diagnose|matrix|calibrate|compare|decompose|synth> [flags]

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from analysis_service import AnalysisService
from config import TOOL_NAME, TOOL_VERSION, RunConfig, configure_logging, load_run_config
from errors import InvalidInputError, PipelineError, UsageError
from models import (
    Alternative,
    CalibratorKind,
    DecompositionScheme,
    DiscriminationAxis,
    Metric,
    Quadrant,
    QuadrantRule,
)
from report_io import parse_column_map, write_text_artifact


COMMANDS = {
    "diagnose": "per-model metric summaries",
    "matrix": "expected ranks, quadrants and the matrix figure",
    "calibrate": "fit calibrators on one split, apply to another",
    "compare": "head-to-head wins and Wilcoxon signed-rank tests",
    "decompose": "Brier reliability/resolution/uncertainty per group",
    "synth": "generate a seeded synthetic cohort",
}


def _default(name: str) -> str:
    info = RunConfig.model_fields[name]
    value = info.default_factory() if info.default_factory is not None else info.default
    if isinstance(value, list):
        value = ",".join(getattr(v, "value", v) for v in value) or "none"
    return str(getattr(value, "value", value))


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _column_map(text: str) -> Dict[str, str]:
    try:
        return parse_column_map(text)
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(exc.message) from None


def _add(parser: argparse.ArgumentParser, *flags: str, field: str, help: str, **kwargs) -> None:
    """Flag bound to a RunConfig field; omitted flags leave the field to env/file/defaults"""
    if not flags[0].startswith("-"):
        flags = (field,)
    else:
        kwargs["dest"] = field
    parser.add_argument(
        *flags,
        default=argparse.SUPPRESS,
        help=f"{help} (default: {_default(field)})",
        **kwargs,
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", dest="config_file", default=argparse.SUPPRESS, metavar="FILE",
                        help="KEY=value config file with PMATRIX_ keys (default: none)")
    _add(parser, "-o", "--output", field="output", metavar="DIR", help="output directory")
    _add(parser, "--seed", field="seed", type=int, help="random seed")
    _add(parser, "--workers", field="workers", type=int, help="worker threads for per-cell work")
    _add(parser, "--log-level", field="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
         type=str.upper, help="log level (logs go to stderr)")
    _add(parser, "--log-format", field="log_format", choices=["console", "json"], help="log renderer")


def _add_ingestion(parser: argparse.ArgumentParser, inputs_required: bool = True) -> None:
    _add(parser, "inputs", field="inputs", nargs="+" if inputs_required else "*", metavar="LOG",
         help="prediction log(s) with columns dataset, fold, model, y, p")
    _add(parser, "--lenient", field="strict", action="store_false",
         help="skip and count invalid rows instead of rejecting the file; strict")
    _add(parser, "--delimiter", field="delimiter", help="field separator, sniffed when omitted")
    _add(parser, "--columns", field="column_map", type=_column_map, metavar="MAP",
         help="column mapping, e.g. dataset=task,fold=fold_idx")


def _add_metric_options(parser: argparse.ArgumentParser) -> None:
    _add(parser, "--scheme", field="decomposition_scheme", choices=[s.value for s in DecompositionScheme],
         help="Brier decomposition grouping")
    _add(parser, "--bins", field="bins", type=int, help="bin count for binned schemes")
    _add(parser, "--clip-eps", field="clip_eps", type=float, help="log-loss probability clip")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=TOOL_NAME,
        description="Place probabilistic classifiers on a calibration x discrimination matrix.",
    )
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    diagnose = commands.add_parser("diagnose", help=COMMANDS["diagnose"])
    _add_ingestion(diagnose)
    _add_metric_options(diagnose)
    _add_common(diagnose)

    matrix = commands.add_parser("matrix", help=COMMANDS["matrix"])
    _add_ingestion(matrix, inputs_required=False)
    _add(matrix, "--ranks", field="ranks_input", metavar="FILE",
         help="expected-rank table (model, auc_rank, z_rank[, mean_abs_z]) instead of logs")
    _add(matrix, "--rule", field="quadrant_rule", choices=[r.value for r in QuadrantRule],
         help="calibration split rule")
    _add(matrix, "--z-threshold", field="z_threshold", type=float, help="mean |Z| cutoff for the absolute rule")
    _add(matrix, "--axis", field="discrimination_axis", choices=[a.value for a in DiscriminationAxis],
         help="discrimination axis")
    _add(matrix, "--resamples", field="bootstrap_resamples", type=int, help="bootstrap resamples")
    _add(matrix, "--level", field="bootstrap_level", type=float, help="bootstrap confidence level")
    _add_metric_options(matrix)
    _add_common(matrix)

    calibrate = commands.add_parser("calibrate", help=COMMANDS["calibrate"])
    _add_ingestion(calibrate)
    _add(calibrate, "--calibration", field="calibration_input", metavar="LOG",
         help="calibration split log with the same (dataset, fold, model) groups")
    _add(calibrate, "--kind", field="calibrator_kinds", type=_csv_list, metavar="KINDS",
         help=f"comma-separated calibrators from {', '.join(k.value for k in CalibratorKind)}")
    _add(calibrate, "--no-platt-smoothing", field="platt_smoothing", action="store_false",
         help="fit Platt scaling on raw 0/1 targets; smoothing on")
    _add(calibrate, "--split-fraction", field="split_fraction", type=float,
         help="share of the calibration split used for fitting")
    _add(calibrate, "--naive-venn-abers", field="fast_venn_abers", action="store_false",
         help="refit both isotonic maps for every test point; fast path on")
    _add_metric_options(calibrate)
    _add_common(calibrate)

    compare = commands.add_parser("compare", help=COMMANDS["compare"])
    _add_ingestion(compare)
    _add(compare, "--metric", field="compare_metric", choices=[m.value for m in Metric], help="metric compared")
    _add(compare, "--models", field="compare_models", type=_csv_list, metavar="MODELS",
         help="comma-separated models to compare, all when empty")
    _add(compare, "--alternative", field="wilcoxon_alternative", choices=[a.value for a in Alternative],
         help="Wilcoxon alternative hypothesis")
    _add_metric_options(compare)
    _add_common(compare)

    decompose = commands.add_parser("decompose", help=COMMANDS["decompose"])
    _add_ingestion(decompose)
    _add_metric_options(decompose)
    _add_common(decompose)

    synth = commands.add_parser("synth", help=COMMANDS["synth"])
    _add(synth, "--archetypes", field="synth_archetypes", type=_csv_list, metavar="NAMES",
         help="comma-separated archetypes, one model each")
    _add(synth, "--n", field="synth_n", type=int, help="instances per fold")
    _add(synth, "--datasets", field="synth_datasets", type=int, help="dataset count")
    _add(synth, "--folds", field="synth_folds", type=int, help="folds per dataset")
    _add(synth, "--base-rate", field="synth_base_rate", type=float, help="positive class rate")
    _add_common(synth)

    return parser


# ---------------------------------------------------------------------------
# Summaries (stdout)
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None or value != value else f"{value:.{digits}f}"


def _summary_matrix(data: Dict) -> List[str]:
    report = data['report']
    lines = [
        f"Rule: {report.rule.value}  axis: {report.discrimination_axis.value}  "
        f"thresholds: discrimination {_fmt(report.discrimination_threshold, 2)}, "
        f"calibration {_fmt(report.calibration_threshold, 2)}",
        "",
        f"{'Model':<22}{'AUC rank':>10}{'|Z| rank':>10}{'mean |Z|':>10}  {'Quadrant':<18}Prescription",
    ]
    order = {q: i for i, q in enumerate(Quadrant)}
    for p in sorted(report.placements, key=lambda p: (order[p.quadrant], p.auc_rank, p.model)):
        lines.append(
            f"{p.model:<22}{_fmt(p.auc_rank, 2):>10}{_fmt(p.z_rank, 2):>10}{_fmt(p.mean_abs_z, 2):>10}  "
            f"{p.quadrant.value + ' (' + p.quadrant.type_label + ')':<18}{p.prescription.value}"
        )
    concordance = data['stats'].get("axis_concordance")
    if concordance is not None:
        lines += ["", f"Axis swap: rho = {_fmt(concordance.rho, 3)}, "
                      f"label agreement {100 * concordance.label_agreement:.1f}%"]
    return lines


def _summary_diagnose(data: Dict) -> List[str]:
    lines = [f"{'Model':<22}{'cells':>7}{'log-loss':>10}{'Brier':>9}{'AUC':>8}{'mean |Z|':>10}{'% |Z|>1.96':>12}"]
    for model, s in data['models'].items():
        mis = s['miscalibration']
        lines.append(
            f"{model:<22}{s['cells']:>7}{_fmt(s['mean_logloss']):>10}{_fmt(s['mean_brier']):>9}"
            f"{_fmt(s['mean_auc'], 3):>8}{_fmt(mis.mean_abs_z if mis else None, 2):>10}"
            f"{_fmt(mis.pct_significant if mis else None, 1):>12}"
        )
    return lines


def _summary_calibrate(data: Dict) -> List[str]:
    lines = []
    for kind, effects in data['effects'].items():
        lines.append(f"[{kind}]  mean % change (share of cells improved)")
        for model, effect in effects.items():
            parts = [
                f"{name} {_fmt(m.mean_pct_delta, 1)}% ({100 * m.improved_fraction:.1f}%)"
                for name, m in effect.metrics.items()
            ]
            lines.append(f"  {model:<20}" + "  ".join(parts))
    return lines


def _summary_compare(data: Dict) -> List[str]:
    wins = data['head_to_head']
    lines = [f"Dataset wins on {wins.metric} ({wins.datasets} datasets, {wins.ties} tied):"]
    lines += [f"  {model:<20}{count:>4}" for model, count in wins.wins.items()]
    if data['wilcoxon']:
        lines.append("Wilcoxon signed-rank:")
        for (first, second), result in data['wilcoxon'].items():
            lines.append(
                f"  {first} vs {second}: W = {result.w_statistic:g}, n = {result.n_effective}, "
                f"p = {result.p_value:.3g} ({result.method})"
            )
    return lines


def _summary_decompose(data: Dict) -> List[str]:
    return [f"{len(data['components'])} groups decomposed"]


def _summary_synth(data: Dict) -> List[str]:
    cohort = data['cohort']
    models = sorted({key[2] for key in cohort.test})
    return [f"{len(cohort.test)} groups for models {', '.join(models)}"]


_WORKFLOWS = {
    "diagnose": ("diagnose", _summary_diagnose),
    "matrix": ("build_matrix", _summary_matrix),
    "calibrate": ("calibrate", _summary_calibrate),
    "compare": ("compare", _summary_compare),
    "decompose": ("decompose", _summary_decompose),
    "synth": ("synthesize", _summary_synth),
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand, write artifacts; returns the exit code"""
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)

    command = args.pop("command")
    config_file = args.pop("config_file", None)
    if config_file is not None and not Path(config_file).is_file():
        print(f"error: config file '{config_file}' not found", file=sys.stderr)
        return UsageError.exit_code
    try:
        config = load_run_config(config_file, command=command, **args)
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
        return UsageError.exit_code

    configure_logging(config.log_level, config.log_format)
    method, summarize = _WORKFLOWS[command]
    result = getattr(AnalysisService(config), method)()

    if not result['success']:
        print(f"error [{result['error_code']}]: {result['error']}", file=sys.stderr)
        if result.get('details'):
            print(result['details'], file=sys.stderr)
        return UsageError.exit_code if result['error_code'] == UsageError.error_code else PipelineError.exit_code

    data = result['data']
    output = Path(config.output)
    written = [write_text_artifact(output / name, text) for name, text in sorted(data['artifacts'].items())]

    print("=" * 60)
    print(f"{TOOL_NAME} {command}: {COMMANDS[command]}")
    print("=" * 60)
    for line in summarize(data):
        print(line)
    print()
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
