"""
Prediction log ingestion and report output

Reads delimiter-separated prediction logs into FoldSeries groups, writes
them back, and renders the JSON report and the SVG matrix figure.
"""
import csv
import dataclasses
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, TextIO

import matplotlib

matplotlib.use("Agg")

import numpy as np
import structlog
from matplotlib.figure import Figure
from pydantic import BaseModel, ValidationError

from config import TOOL_NAME, TOOL_VERSION
from errors import InvalidInputError, ParseError
from models import CellKey, FoldSeries, PredictionRecord, Quadrant, QuadrantReport, QuadrantRule

logger = structlog.get_logger(__name__)

CANONICAL_COLUMNS = ("dataset", "fold", "model", "y", "p")
RANK_COLUMNS = ("model", "auc_rank", "z_rank")
SNIFF_DELIMITERS = ",;\t|"

# Columns excluded from the config echo; they never change results
_ECHO_EXCLUDE = {"workers", "log_level", "log_format"}


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

@dataclass
class ParsedLog:
    """Grouped prediction series plus ingestion tallies"""
    groups: Dict[CellKey, FoldSeries]
    rows: int = 0
    invalid_rows: int = 0
    dropped_groups: List[CellKey] = field(default_factory=list)

    @property
    def counts(self) -> Dict[CellKey, int]:
        return {key: len(series) for key, series in self.groups.items()}


def parse_column_map(text: Optional[str]) -> Dict[str, str]:
    """'dataset=task,fold=fold_idx' -> {'dataset': 'task', 'fold': 'fold_idx'}"""
    mapping: Dict[str, str] = {}
    if not text:
        return mapping
    for item in text.split(","):
        if not item.strip():
            continue
        canonical, sep, source = item.partition("=")
        canonical, source = canonical.strip(), source.strip()
        if not sep or not source or canonical not in CANONICAL_COLUMNS:
            raise InvalidInputError(
                f"bad column mapping '{item}'",
                details=f"expected NAME=COLUMN with NAME in {', '.join(CANONICAL_COLUMNS)}",
            )
        mapping[canonical] = source
    return mapping


def _detect_delimiter(header: str, delimiter: Optional[str]) -> str:
    if delimiter:
        return delimiter
    try:
        return csv.Sniffer().sniff(header, delimiters=SNIFF_DELIMITERS).delimiter
    except csv.Error:
        return ","


def _column_positions(header: List[str], column_map: Mapping[str, str]) -> Dict[str, int]:
    names = [name.strip() for name in header]
    positions = {}
    missing = []
    for canonical in CANONICAL_COLUMNS:
        source = column_map.get(canonical, canonical)
        if source in names:
            positions[canonical] = names.index(source)
        else:
            missing.append(source)
    if missing:
        raise ParseError(f"missing columns: {', '.join(missing)}", row=1)
    return positions


def _first_error(exc: ValidationError) -> str:
    error = exc.errors()[0]
    location = ".".join(str(part) for part in error.get("loc", ()))
    return f"{location}: {error.get('msg', 'invalid value')}"


def parse_predictions(
    stream: TextIO,
    strict: bool = True,
    column_map: Optional[Mapping[str, str]] = None,
    delimiter: Optional[str] = None,
) -> ParsedLog:
    """
    Read a prediction log into (dataset, fold, model) groups

    The header names the columns dataset, fold, model, y, p in any order
    (renamed through ``column_map``). Rows keep file order inside a group,
    which is how instances are aligned across models. Row numbers in errors
    count the header as row 1.

    Args:
        stream: text stream positioned at the header
        strict: reject the file on the first invalid row; otherwise skip and tally
        column_map: canonical name -> column name in the file
        delimiter: field separator; sniffed from the header when None

    Returns:
        ParsedLog with groups of at least two records
    """
    header_line = stream.readline()
    if not header_line.strip():
        raise ParseError("input is empty (no header row)", row=1)

    reader = csv.reader(itertools.chain([header_line], stream), delimiter=_detect_delimiter(header_line, delimiter))
    positions = _column_positions(next(reader), column_map or {})
    width = max(positions.values()) + 1

    labels: Dict[CellKey, List[int]] = {}
    probs: Dict[CellKey, List[float]] = {}
    rows = 0
    invalid = 0
    for values in reader:
        row_number = reader.line_num
        if not values or all(not v.strip() for v in values):
            continue
        rows += 1
        try:
            if len(values) < width:
                raise ParseError(f"expected at least {width} fields, got {len(values)}", row=row_number)
            try:
                record = PredictionRecord(
                    dataset_id=values[positions["dataset"]],
                    fold_id=values[positions["fold"]].strip(),
                    model_id=values[positions["model"]],
                    y=values[positions["y"]].strip(),
                    p=values[positions["p"]].strip(),
                )
            except ValidationError as exc:
                raise ParseError(_first_error(exc), row=row_number) from None
        except ParseError as exc:
            if strict:
                raise
            invalid += 1
            logger.warning("row_skipped", row=row_number, reason=exc.message)
            continue

        key = (record.dataset_id, record.fold_id, record.model_id)
        labels.setdefault(key, []).append(record.y)
        probs.setdefault(key, []).append(record.p)

    groups: Dict[CellKey, FoldSeries] = {}
    dropped: List[CellKey] = []
    for key in sorted(labels):
        if len(labels[key]) < 2:
            if strict:
                raise ParseError(
                    f"group (dataset={key[0]}, fold={key[1]}, model={key[2]}) has fewer than 2 records"
                )
            dropped.append(key)
            logger.warning("group_dropped", dataset=key[0], fold=key[1], model=key[2])
            continue
        groups[key] = FoldSeries(np.array(labels[key], dtype=np.int8), np.array(probs[key], dtype=float))

    if invalid:
        logger.warning("invalid_rows_skipped", count=invalid)
    logger.info("predictions_parsed", rows=rows, groups=len(groups))
    return ParsedLog(groups=groups, rows=rows, invalid_rows=invalid, dropped_groups=dropped)


def read_prediction_files(
    paths: List[str],
    strict: bool = True,
    column_map: Optional[Mapping[str, str]] = None,
    delimiter: Optional[str] = None,
) -> ParsedLog:
    """Parse and merge several logs; a group may appear in only one file"""
    merged = ParsedLog(groups={})
    for path in paths:
        try:
            with open(path, encoding="utf-8-sig", newline="") as handle:
                parsed = parse_predictions(handle, strict=strict, column_map=column_map, delimiter=delimiter)
        except OSError as exc:
            raise InvalidInputError(f"cannot read '{path}': {exc.strerror}") from None
        except UnicodeDecodeError as exc:
            raise ParseError(f"{path}: not valid UTF-8 at byte {exc.start}") from None
        except ParseError as exc:
            raise ParseError(f"{path}: {exc.message}", details=exc.details) from None

        overlap = set(merged.groups) & set(parsed.groups)
        if overlap:
            dataset, fold, model = sorted(overlap)[0]
            raise InvalidInputError(
                f"group (dataset={dataset}, fold={fold}, model={model}) appears in more than one file"
            )
        merged.groups.update(parsed.groups)
        merged.rows += parsed.rows
        merged.invalid_rows += parsed.invalid_rows
        merged.dropped_groups.extend(parsed.dropped_groups)
    merged.groups = dict(sorted(merged.groups.items()))
    return merged


def write_predictions(groups: Mapping[CellKey, FoldSeries], stream: TextIO) -> None:
    """Write groups as a comma-separated log with shortest round-trip floats"""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for (dataset, fold, model) in sorted(groups):
        series = groups[(dataset, fold, model)]
        for label, prob in zip(series.labels.tolist(), series.probs.tolist()):
            writer.writerow([dataset, fold, model, label, repr(float(prob))])


@dataclass(frozen=True)
class RankTable:
    """Published expected ranks, optionally with mean |Z| per model"""
    auc: Dict[str, float]
    z: Dict[str, float]
    mean_abs_z: Optional[Dict[str, float]] = None


def read_rank_table(stream: TextIO, delimiter: Optional[str] = None) -> RankTable:
    """Read model, auc_rank, z_rank[, mean_abs_z] rows"""
    header_line = stream.readline()
    if not header_line.strip():
        raise ParseError("rank table is empty (no header row)", row=1)
    reader = csv.reader(itertools.chain([header_line], stream), delimiter=_detect_delimiter(header_line, delimiter))
    header = [name.strip() for name in next(reader)]
    missing = [name for name in RANK_COLUMNS if name not in header]
    if missing:
        raise ParseError(f"missing columns: {', '.join(missing)}", row=1)
    has_z_values = "mean_abs_z" in header

    auc: Dict[str, float] = {}
    z: Dict[str, float] = {}
    mean_abs_z: Dict[str, float] = {}
    for values in reader:
        if not values or all(not v.strip() for v in values):
            continue
        row = dict(zip(header, (v.strip() for v in values)))
        model = row.get("model", "")
        if not model:
            raise ParseError("model name is empty", row=reader.line_num)
        if model in auc:
            raise ParseError(f"model '{model}' listed twice", row=reader.line_num)
        try:
            auc[model] = float(row["auc_rank"])
            z[model] = float(row["z_rank"])
            if has_z_values:
                mean_abs_z[model] = float(row["mean_abs_z"])
        except (KeyError, ValueError):
            raise ParseError("rank values must be numeric", row=reader.line_num) from None
        if not all(math.isfinite(v) for v in (auc[model], z[model])):
            raise ParseError("rank values must be finite", row=reader.line_num)

    return RankTable(auc=auc, z=z, mean_abs_z=mean_abs_z if has_z_values else None)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def jsonable(value: Any) -> Any:
    """Plain JSON types: dataclasses, enums, numpy scalars, tuple keys; NaN -> None"""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, BaseModel):
        return jsonable(value.model_dump(mode="json"))
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Mapping):
        out = {}
        for key, item in value.items():
            if isinstance(key, tuple):
                key = "|".join(str(jsonable(part)) for part in key)
            elif isinstance(key, Enum):
                key = key.value
            out[str(key)] = jsonable(item)
        return out
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [jsonable(item) for item in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def model_entries(report: Optional[QuadrantReport]) -> List[Dict[str, Any]]:
    if report is None:
        return []
    entries = []
    for placement in sorted(report.placements, key=lambda p: p.model):
        entries.append({
            "model": placement.model,
            "auc_rank": placement.auc_rank,
            "z_rank": placement.z_rank,
            "mean_abs_z": placement.mean_abs_z,
            "discrimination_good": placement.discrimination_good,
            "calibration_good": placement.calibration_good,
            "quadrant": placement.quadrant,
            "type": placement.quadrant.type_label,
            "prescription": placement.prescription,
            "ci": {axis: list(bounds) for axis, bounds in placement.ci.items()},
        })
    return entries


def build_report(
    report: Optional[QuadrantReport] = None,
    config: Optional[BaseModel] = None,
    stats: Optional[Mapping[str, Any]] = None,
    command: Optional[str] = None,
) -> Dict[str, Any]:
    """Assemble the report document as plain JSON types"""
    thresholds = None
    if report is not None:
        thresholds = {
            "rule": report.rule,
            "discrimination_axis": report.discrimination_axis,
            "discrimination": report.discrimination_threshold,
            "calibration": report.calibration_threshold,
        }
    echo = config.model_dump(mode="json", exclude=_ECHO_EXCLUDE) if config is not None else {}
    return jsonable({
        "tool": TOOL_NAME,
        "tool_version": TOOL_VERSION,
        "command": command or echo.get("command"),
        "config": echo,
        "thresholds": thresholds,
        "models": model_entries(report),
        "stats": dict(stats or {}),
    })


def emit_report(
    report: Optional[QuadrantReport] = None,
    config: Optional[BaseModel] = None,
    stats: Optional[Mapping[str, Any]] = None,
    command: Optional[str] = None,
) -> str:
    """Report JSON with sorted keys; identical inputs give identical bytes"""
    document = build_report(report, config, stats, command)
    return json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# Figure
# ---------------------------------------------------------------------------

_MARKERS = {Quadrant.EAGLE: "^", Quadrant.BULL: "s", Quadrant.SLOTH: "o", Quadrant.MOLE: "D"}
_TINTS = {
    Quadrant.EAGLE: "#d8f0d8",
    Quadrant.BULL: "#fdf1d2",
    Quadrant.SLOTH: "#d9e6f5",
    Quadrant.MOLE: "#f6d8d8",
}
_COLORS = {
    Quadrant.EAGLE: "#2e7d32",
    Quadrant.BULL: "#b7791f",
    Quadrant.SLOTH: "#2b5c9e",
    Quadrant.MOLE: "#b23b3b",
}


def render_matrix_svg(report: QuadrantReport) -> str:
    """
    Scatter of the quadrant report as a standalone SVG document

    x is the |Z| expected rank (mean |Z| under the absolute rule), y the
    discrimination rank with the axis inverted so better is up.
    """
    if not report.placements:
        raise InvalidInputError("cannot draw a matrix without models")
    absolute = report.rule == QuadrantRule.ABSOLUTE
    xs, ys = [], []
    for placement in report.placements:
        x = placement.mean_abs_z if absolute else placement.z_rank
        if x is None:
            raise InvalidInputError(f"no calibration coordinate for '{placement.model}'")
        xs.append(float(x))
        ys.append(float(placement.auc_rank))

    x_thr = report.calibration_threshold
    y_thr = report.discrimination_threshold
    x_pad = max(1.0, 0.08 * (max(xs + [x_thr]) - min(xs + [x_thr])))
    y_pad = max(1.0, 0.08 * (max(ys + [y_thr]) - min(ys + [y_thr])))
    x_lo, x_hi = min(xs + [x_thr]) - x_pad, max(xs + [x_thr]) + x_pad
    y_lo, y_hi = min(ys + [y_thr]) - y_pad, max(ys + [y_thr]) + y_pad

    with matplotlib.rc_context({"svg.hashsalt": TOOL_NAME, "svg.fonttype": "none"}):
        fig = Figure(figsize=(8, 6.5))
        ax = fig.add_subplot(1, 1, 1)

        regions = {
            Quadrant.EAGLE: ((x_lo, x_thr), (y_lo, y_thr)),
            Quadrant.BULL: ((x_thr, x_hi), (y_lo, y_thr)),
            Quadrant.SLOTH: ((x_lo, x_thr), (y_thr, y_hi)),
            Quadrant.MOLE: ((x_thr, x_hi), (y_thr, y_hi)),
        }
        for quadrant, ((x0, x1), (y0, y1)) in regions.items():
            ax.fill_between([x0, x1], y0, y1, color=_TINTS[quadrant], zorder=0)
            ax.text((x0 + x1) / 2, (y0 + y1) / 2, f"{quadrant.value} ({quadrant.type_label})",
                    ha="center", va="center", fontsize=11, color=_COLORS[quadrant], alpha=0.35, zorder=1)

        ax.axvline(x_thr, color="#555555", linestyle="--", linewidth=1, zorder=2)
        ax.axhline(y_thr, color="#555555", linestyle="--", linewidth=1, zorder=2)

        for placement, x, y in sorted(zip(report.placements, xs, ys), key=lambda item: item[0].model):
            quadrant = placement.quadrant
            ax.scatter([x], [y], marker=_MARKERS[quadrant], color=_COLORS[quadrant],
                       edgecolors="black", linewidths=0.5, s=55, zorder=3)
            ax.annotate(placement.model, (x, y), textcoords="offset points", xytext=(5, 4),
                        fontsize=8, zorder=4)

        ax.set_xlim(x_lo, x_hi)
        ax.set_ylim(y_hi, y_lo)
        ax.set_xlabel("Mean |Z|" if absolute else "|Z| expected rank (lower = better calibrated)")
        ax.set_ylabel(
            "AUC expected rank (lower = better)" if report.discrimination_axis.value == "auc"
            else "Brier-resolution expected rank (lower = better)"
        )
        ax.set_title("Probability matrix")

        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def write_text_artifact(path: Path, text: str) -> Path:
    """Write UTF-8 text with LF line endings, creating parent directories"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    return path
