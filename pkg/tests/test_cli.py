"""
End-to-end tests of the command-line workflows
"""
import csv
import json

import pytest

from main import build_parser, run


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def quadrants_of(report):
    return {entry["model"]: entry["quadrant"] for entry in report["models"]}


@pytest.fixture
def cohort_dir(tmp_path):
    out = tmp_path / "cohort"
    code = run(["synth", "--n", "200", "--datasets", "3", "--folds", "2", "--seed", "4", "-o", str(out)])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# matrix
# ---------------------------------------------------------------------------

def test_matrix_from_published_ranks(tmp_path, published_path, published_quadrants, capsys):
    out = tmp_path / "out"
    assert run(["matrix", "--ranks", str(published_path), "-o", str(out)]) == 0
    report = read_json(out / "report.json")
    assert quadrants_of(report) == {m: q.value for m, q in published_quadrants.items()}
    assert report["thresholds"]["discrimination"] == pytest.approx(10.44)
    assert report["command"] == "matrix"
    assert (out / "matrix.svg").read_text(encoding="utf-8").lstrip().startswith("<?xml")
    with open(out / "ranks.csv", encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 21

    stdout = capsys.readouterr().out
    assert "=" * 60 in stdout
    assert "CatBoost" in stdout
    assert "ship-it" in stdout


def test_matrix_absolute_rule_from_ranks(tmp_path, published_path):
    out = tmp_path / "out"
    assert run(["matrix", "--ranks", str(published_path), "--rule", "absolute", "-o", str(out)]) == 0
    quadrants = quadrants_of(read_json(out / "report.json"))
    assert quadrants["RandomForest"] == "Bull"
    assert quadrants["CatBoost"] == "Eagle"


def test_matrix_reports_are_byte_identical(tmp_path, published_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run(["matrix", "--ranks", str(published_path), "-o", str(first)]) == 0
    assert run(["matrix", "--ranks", str(published_path), "-o", str(second), "--workers", "3"]) == 0
    for name in ("report.json", "matrix.svg", "ranks.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_matrix_from_prediction_logs(tmp_path, cohort_dir):
    out = tmp_path / "matrix"
    code = run(["matrix", str(cohort_dir / "predictions.csv"), "--resamples", "1000", "-o", str(out)])
    assert code == 0
    report = read_json(out / "report.json")
    placements = {entry["model"]: entry for entry in report["models"]}
    assert placements["eagle"]["discrimination_good"]
    assert placements["bull"]["discrimination_good"]
    assert not placements["sloth"]["discrimination_good"]
    assert not placements["mole"]["discrimination_good"]
    low, high = placements["eagle"]["ci"]["auc_rank"]
    assert low <= placements["eagle"]["auc_rank"] <= high
    assert set(report["stats"]["stability"]) == {"eagle", "bull", "sloth", "mole"}


# ---------------------------------------------------------------------------
# synth and the other workflows
# ---------------------------------------------------------------------------

def test_synth_is_deterministic(tmp_path):
    args = ["synth", "--archetypes", "eagle,mole", "--n", "50", "--datasets", "2", "--folds", "2", "--seed", "9"]
    assert run(args + ["-o", str(tmp_path / "a")]) == 0
    assert run(args + ["-o", str(tmp_path / "b")]) == 0
    for name in ("predictions.csv", "calibration.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_diagnose_writes_metric_table(tmp_path, cohort_dir):
    out = tmp_path / "diag"
    assert run(["diagnose", str(cohort_dir / "predictions.csv"), "-o", str(out)]) == 0
    with open(out / "metrics.csv", encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 4 * 3 * 2
    assert {"logloss", "brier", "auc", "z", "abs_z"} <= set(rows[0])
    summaries = read_json(out / "report.json")["stats"]["model_summaries"]
    assert summaries["eagle"]["mean_auc"] > summaries["sloth"]["mean_auc"]


def test_calibrate_applies_each_kind(tmp_path, cohort_dir):
    out = tmp_path / "cal"
    code = run([
        "calibrate", str(cohort_dir / "predictions.csv"),
        "--calibration", str(cohort_dir / "calibration.csv"),
        "--kind", "platt,venn-abers", "-o", str(out),
    ])
    assert code == 0
    assert (out / "calibrated-platt.csv").exists()
    assert (out / "calibrated-venn-abers.csv").exists()
    effects = read_json(out / "report.json")["stats"]["effects"]
    assert set(effects) == {"platt", "venn-abers"}
    assert set(effects["platt"]["bull"]["metrics"]) == {"logloss", "brier", "auc", "abs_z"}


def test_compare_and_decompose(tmp_path, cohort_dir):
    out = tmp_path / "cmp"
    code = run(["compare", str(cohort_dir / "predictions.csv"), "--models", "eagle,sloth", "-o", str(out)])
    assert code == 0
    stats = read_json(out / "report.json")["stats"]
    assert sum(stats["head_to_head"]["wins"].values()) + stats["head_to_head"]["ties"] == 3
    assert "eagle|sloth" in stats["wilcoxon"]

    out = tmp_path / "dec"
    assert run(["decompose", str(cohort_dir / "predictions.csv"), "-o", str(out)]) == 0
    assert read_json(out / "report.json")["stats"]["max_abs_residual"] < 1e-12


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_config_file_environment_and_flags(tmp_path, published_path, monkeypatch):
    config_file = tmp_path / "run.env"
    config_file.write_text("PMATRIX_SEED=17\nPMATRIX_QUADRANT_RULE=absolute\n", encoding="utf-8")

    out = tmp_path / "file"
    assert run(["matrix", "--ranks", str(published_path), "--config", str(config_file), "-o", str(out)]) == 0
    config = read_json(out / "report.json")["config"]
    assert config["seed"] == 17
    assert config["quadrant_rule"] == "absolute"

    monkeypatch.setenv("PMATRIX_SEED", "23")
    out = tmp_path / "env"
    assert run(["matrix", "--ranks", str(published_path), "--config", str(config_file), "-o", str(out)]) == 0
    assert read_json(out / "report.json")["config"]["seed"] == 23

    out = tmp_path / "flag"
    assert run(["matrix", "--ranks", str(published_path), "--seed", "5", "-o", str(out)]) == 0
    assert read_json(out / "report.json")["config"]["seed"] == 5


def test_help_lists_defaults(capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    with pytest.raises(SystemExit):
        build_parser().parse_args(["matrix", "--help"])
    text = capsys.readouterr().out
    assert "(default: median)" in text
    assert "(default: 10000)" in text
    assert "(default: 1.96)" in text


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------

def test_invalid_log_exits_with_one(tmp_path):
    log = tmp_path / "bad.csv"
    log.write_text("dataset,fold,model,y,p\nd,0,m,1,1.7\nd,0,m,0,0.2\n", encoding="utf-8")
    assert run(["diagnose", str(log), "-o", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()


def test_lenient_flag_skips_bad_rows(tmp_path):
    log = tmp_path / "mixed.csv"
    log.write_text(
        "dataset,fold,model,y,p\nd,0,m,1,1.7\nd,0,m,0,0.2\nd,0,m,1,0.9\n", encoding="utf-8",
    )
    assert run(["decompose", str(log), "--lenient", "-o", str(tmp_path / "out")]) == 0


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["matrix", "--no-such-flag"],
    ["matrix", "--rule", "sideways"],
    ["diagnose", "x.csv", "--columns", "score=prob"],
    ["matrix", "--config", "/nonexistent/run.env"],
    ["calibrate", "x.csv", "--kind", "bogus"],
    ["matrix", "--seed", "1"],
])
def test_usage_errors_exit_with_two(tmp_path, argv):
    assert run(argv + ["-o", str(tmp_path / "out")] if argv else argv) == 2


def test_calibrate_without_calibration_split_is_usage_error(tmp_path, cohort_dir):
    assert run(["calibrate", str(cohort_dir / "predictions.csv"), "-o", str(tmp_path / "out")]) == 2


def test_missing_rank_file_exits_with_one(tmp_path):
    assert run(["matrix", "--ranks", str(tmp_path / "missing.csv"), "-o", str(tmp_path / "out")]) == 1


def test_undecodable_inputs_exit_with_one(tmp_path, capsys):
    log = tmp_path / "latin1.csv"
    log.write_bytes(b"dataset,fold,model,y,p\nd\xff,0,m,1,0.5\nd\xff,0,m,0,0.2\n")
    assert run(["diagnose", str(log), "-o", str(tmp_path / "out")]) == 1
    assert "not valid UTF-8" in capsys.readouterr().err

    ranks = tmp_path / "ranks.csv"
    ranks.write_bytes(b"model,auc_rank,z_rank\nCat\xe9,1.0,2.0\n")
    assert run(["matrix", "--ranks", str(ranks), "-o", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()


def test_rank_table_with_byte_order_mark(tmp_path, published_path, published_quadrants):
    ranks = tmp_path / "ranks.csv"
    ranks.write_text(published_path.read_text(encoding="utf-8"), encoding="utf-8-sig")
    out = tmp_path / "out"
    assert run(["matrix", "--ranks", str(ranks), "-o", str(out)]) == 0
    assert quadrants_of(read_json(out / "report.json")) == {m: q.value for m, q in published_quadrants.items()}


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------

def assert_same_artifacts(first, second):
    names = sorted(path.name for path in first.iterdir())
    assert names == sorted(path.name for path in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


@pytest.mark.parametrize("command, extra", [
    ("diagnose", []),
    ("compare", ["--models", "eagle,bull,sloth"]),
    ("decompose", ["--scheme", "equal-mass"]),
    ("calibrate", ["--kind", "platt,isotonic,beta,temperature,venn-abers", "--split-fraction", "0.5"]),
])
def test_workflows_are_byte_identical_across_runs(tmp_path, cohort_dir, command, extra):
    if command == "calibrate":
        extra = extra + ["--calibration", str(cohort_dir / "calibration.csv")]
    argv = [command, str(cohort_dir / "predictions.csv"), "--seed", "3"] + extra
    assert run(argv + ["-o", str(tmp_path / "a")]) == 0
    assert run(argv + ["-o", str(tmp_path / "b"), "--workers", "3"]) == 0
    assert_same_artifacts(tmp_path / "a", tmp_path / "b")


def test_matrix_from_logs_is_byte_identical_across_workers(tmp_path, cohort_dir):
    argv = ["matrix", str(cohort_dir / "predictions.csv"), "--resamples", "1000", "--seed", "3"]
    assert run(argv + ["-o", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert run(argv + ["-o", str(tmp_path / "b"), "--workers", "4"]) == 0
    assert_same_artifacts(tmp_path / "a", tmp_path / "b")
