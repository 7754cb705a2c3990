"""
Tests for the post-hoc calibrators
"""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy.special import expit

from calibrators import (
    BetaModel,
    IsotonicModel,
    PlattModel,
    PostHocCalibrator,
    TemperatureModel,
    VennAbersModel,
    apply_calibrator,
    calibration_subset,
    fit_beta,
    fit_calibrator,
    fit_isotonic,
    fit_platt,
    fit_temperature,
    fit_venn_abers,
    load_calibrator,
    venn_abers_predict,
)
from conftest import make_series
from errors import FitError, UsageError
from metrics import auc_roc
from models import CalibratorKind
from synth import distort


def calibrated_draws(rng, n, scale=2.0):
    p = expit(scale * rng.standard_normal(n))
    y = (rng.random(n) < p).astype(int)
    return make_series(y, p)


def discordant_pairs(labels, scores) -> int:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    return int(np.sum(pos[:, None] < neg[None, :]))


def exhaustive_isotonic(values, weights):
    """Best block partition with non-decreasing block means (least squares)"""
    m = len(values)
    best, best_fit = np.inf, None
    for cuts in itertools.product([False, True], repeat=m - 1):
        fitted = np.empty(m)
        start = 0
        for end in [i + 1 for i, cut in enumerate(cuts) if cut] + [m]:
            w = weights[start:end]
            fitted[start:end] = np.dot(values[start:end], w) / w.sum()
            start = end
        if np.any(np.diff(fitted) < -1e-12):
            continue
        loss = float(np.dot(weights, (values - fitted) ** 2))
        if loss < best - 1e-12:
            best, best_fit = loss, fitted
    return best_fit


# ---------------------------------------------------------------------------
# Isotonic
# ---------------------------------------------------------------------------

def test_isotonic_hand_example():
    model = fit_isotonic(make_series([1, 0, 1], [0.1, 0.2, 0.3]))
    assert model.values == pytest.approx([0.5, 0.5, 1.0])
    assert apply_calibrator(model, [0.15]) == pytest.approx([0.5])


def test_isotonic_reproduces_monotone_labels():
    model = fit_isotonic(make_series([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]))
    assert model.values == pytest.approx([0.0, 0.0, 1.0, 1.0])


def test_isotonic_all_negative_is_constant_zero():
    model = fit_isotonic(make_series([0, 0, 0], [0.1, 0.5, 0.9]))
    assert np.all(apply_calibrator(model, [0.0, 0.3, 1.0]) == 0.0)


def test_isotonic_clamps_outside_range():
    model = fit_isotonic(make_series([0, 1], [0.3, 0.6]))
    assert apply_calibrator(model, [0.0, 1.0]).tolist() == [0.0, 1.0]


def test_isotonic_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(1, 13))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, n)
        model = fit_isotonic(make_series(labels, scores))
        thresholds, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
        means = np.bincount(inverse.reshape(-1), weights=labels) / counts
        oracle = exhaustive_isotonic(means, counts.astype(float))
        assert np.allclose(model.values, oracle, atol=1e-12)


def test_isotonic_model_validates_shape():
    with pytest.raises(ValidationError):
        IsotonicModel(thresholds=[0.2, 0.1], values=[0.0, 1.0])
    with pytest.raises(ValidationError):
        IsotonicModel(thresholds=[0.1, 0.2], values=[1.0, 0.0])


# ---------------------------------------------------------------------------
# Platt
# ---------------------------------------------------------------------------

def test_platt_identity_on_calibrated_data(rng):
    model = fit_platt(calibrated_draws(rng, 50_000))
    assert model.a == pytest.approx(1.0, abs=0.05)
    assert model.b == pytest.approx(0.0, abs=0.05)
    assert model.converged


def test_platt_single_class_fails():
    with pytest.raises(FitError):
        fit_platt(make_series([1, 1, 1], [0.2, 0.5, 0.9]))


def test_platt_identity_parameters_leave_input_unchanged():
    p = np.array([0.0, 0.1, 0.5, 0.93, 1.0])
    assert apply_calibrator(PlattModel(a=1.0, b=0.0), p) == pytest.approx(p)


def test_platt_slope_must_be_positive():
    with pytest.raises(ValidationError):
        PlattModel(a=0.0, b=0.0)


def test_platt_anti_correlated_scores_keep_positive_slope():
    series = make_series([1, 1, 0, 0, 1, 0], [0.1, 0.2, 0.8, 0.9, 0.3, 0.7])
    model = fit_platt(series)
    assert model.a > 0
    p = np.linspace(0.01, 0.99, 50)
    assert np.all(np.diff(apply_calibrator(model, p)) >= 0)


def test_platt_without_smoothing_fits_raw_targets(rng):
    series = calibrated_draws(rng, 2_000)
    smoothed = fit_platt(series, smoothing=True)
    raw = fit_platt(series, smoothing=False)
    assert raw.a != smoothed.a


# ---------------------------------------------------------------------------
# Beta and temperature
# ---------------------------------------------------------------------------

def test_beta_identity_on_calibrated_data(rng):
    model = fit_beta(calibrated_draws(rng, 50_000))
    assert model.a == pytest.approx(1.0, abs=0.1)
    assert model.b == pytest.approx(1.0, abs=0.1)
    assert model.c == pytest.approx(0.0, abs=0.1)


def test_beta_symmetry_at_one_half():
    assert BetaModel(a=2.0, b=2.0, c=0.0).predict([0.5]) == pytest.approx([0.5])


def test_beta_zero_coefficient_keeps_endpoints_finite():
    model = load_calibrator('{"kind": "beta", "a": 0.0, "b": 1.0, "c": 0.3}')
    out = apply_calibrator(model, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(expit(0.3))
    assert out[2] == 1.0

    out = apply_calibrator(BetaModel(a=1.0, b=0.0, c=0.0), [0.0, 1.0])
    assert out.tolist() == [0.0, 0.5]


def test_beta_single_class_fails():
    with pytest.raises(FitError):
        fit_beta(make_series([0, 0], [0.2, 0.4]))


def test_temperature_identity_on_calibrated_data(rng):
    model = fit_temperature(calibrated_draws(rng, 50_000))
    assert model.temperature == pytest.approx(1.0, abs=0.05)


def test_temperature_one_is_identity():
    p = np.array([0.05, 0.3, 0.5, 0.99])
    assert apply_calibrator(TemperatureModel(temperature=1.0), p) == pytest.approx(p)


def test_temperature_above_one_for_overconfident_scores(rng):
    series = calibrated_draws(rng, 20_000)
    overconfident = series.with_probs(distort(series.probs, 2.0))
    assert fit_temperature(overconfident).temperature > 1.0


# ---------------------------------------------------------------------------
# Venn-Abers
# ---------------------------------------------------------------------------

def test_venn_abers_hand_example():
    [out] = venn_abers_predict(make_series([0, 1], [0.1, 0.9]), [0.9])
    assert out.p0 == pytest.approx(0.5)
    assert out.p1 == pytest.approx(1.0)
    assert out.merged == pytest.approx(2.0 / 3.0)


def test_venn_abers_empty_inputs():
    assert venn_abers_predict(make_series([0, 1], [0.1, 0.9]), []) == []
    with pytest.raises(FitError):
        venn_abers_predict(make_series([], []), [0.5])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 10).map(lambda k: k / 10), st.integers(0, 1)), min_size=1, max_size=30),
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10),
)
def test_venn_abers_interval_contains_merge(pairs, tests):
    cal = make_series([y for _, y in pairs], [s for s, _ in pairs])
    for out in venn_abers_predict(cal, tests):
        assert out.p0 <= out.p1 + 1e-12
        assert out.p0 - 1e-12 <= out.merged <= out.p1 + 1e-12


def test_venn_abers_fast_path_matches_naive(rng):
    for _ in range(20):
        n = int(rng.integers(2, 60))
        cal = make_series(rng.integers(0, 2, n), np.round(rng.random(n), 2))
        tests = np.concatenate([np.round(rng.random(15), 2), cal.probs[:5], [0.0, 1.0]])
        fast = venn_abers_predict(cal, tests, fast=True)
        naive = venn_abers_predict(cal, tests, fast=False)
        for a, b in zip(fast, naive):
            assert a.p0 == pytest.approx(b.p0, abs=1e-12)
            assert a.p1 == pytest.approx(b.p1, abs=1e-12)


def test_venn_abers_model_predicts_merged(rng):
    cal = calibrated_draws(rng, 300)
    model = fit_venn_abers(cal)
    tests = np.linspace(0.0, 1.0, 11)
    expected = [out.merged for out in venn_abers_predict(cal, tests)]
    assert model.predict(tests) == pytest.approx(expected)


# ---------------------------------------------------------------------------
# Ranking preservation
# ---------------------------------------------------------------------------

SERIES_COUNTS = [25, pytest.param(500, marks=pytest.mark.slow)]


@pytest.mark.parametrize("count", SERIES_COUNTS)
@pytest.mark.parametrize("kind", [CalibratorKind.PLATT, CalibratorKind.BETA, CalibratorKind.TEMPERATURE])
def test_strictly_increasing_calibrators_preserve_auc(kind, count):
    rng = np.random.default_rng(11)
    for _ in range(count):
        n = int(rng.integers(20, 200))
        cal = calibrated_draws(rng, 400)
        p = np.round(rng.uniform(0.02, 0.98, n), 2)
        y = (rng.random(n) < p).astype(int)
        y[0], y[1] = 0, 1
        series = make_series(y, p)
        model = fit_calibrator(kind, cal)
        after = series.with_probs(apply_calibrator(model, series.probs))
        assert auc_roc(after) == pytest.approx(auc_roc(series), abs=1e-12)


@pytest.mark.parametrize("count", SERIES_COUNTS)
@pytest.mark.parametrize("kind", [CalibratorKind.ISOTONIC, CalibratorKind.VENN_ABERS])
def test_monotone_calibrators_never_add_discordant_pairs(kind, count):
    rng = np.random.default_rng(13)
    for _ in range(count):
        n = int(rng.integers(20, 200))
        cal = calibrated_draws(rng, 150)
        p = rng.uniform(0.0, 1.0, n)
        y = rng.integers(0, 2, n)
        model = fit_calibrator(kind, cal)
        calibrated = apply_calibrator(model, p)
        assert discordant_pairs(y, calibrated) <= discordant_pairs(y, p)


# ---------------------------------------------------------------------------
# Application, serialisation and the fit/predict wrapper
# ---------------------------------------------------------------------------

def test_apply_requires_fitted_model():
    with pytest.raises(UsageError):
        apply_calibrator(None, [0.5])


def test_predict_before_fit_is_usage_error():
    with pytest.raises(UsageError):
        PostHocCalibrator("platt").predict([0.5])


@pytest.mark.parametrize("kind", list(CalibratorKind))
def test_fitted_models_round_trip_through_json(rng, kind):
    cal = calibrated_draws(rng, 200)
    model = fit_calibrator(kind, cal)
    restored = load_calibrator(model.to_json())
    assert type(restored) is type(model)
    p = np.linspace(0.0, 1.0, 9)
    assert restored.predict(p) == pytest.approx(model.predict(p))


def test_venn_abers_model_requires_pairs():
    with pytest.raises(ValidationError):
        VennAbersModel(scores=[], labels=[])


def test_post_hoc_calibrator_outputs_stay_in_unit_interval(rng):
    cal = calibrated_draws(rng, 500)
    for kind in CalibratorKind:
        out = PostHocCalibrator(kind).fit(cal).predict([0.0, 0.2, 0.7, 1.0])
        assert np.all((out >= 0.0) & (out <= 1.0))


def test_calibration_subset_is_seeded(rng):
    cal = calibrated_draws(rng, 1_000)
    first = calibration_subset(cal, 0.5, seed=3)
    second = calibration_subset(cal, 0.5, seed=3)
    assert len(first) == 500
    assert np.array_equal(first.probs, second.probs)
    assert calibration_subset(cal, 1.0, seed=3) is cal
