"""
Shared fixtures for the probability matrix test suite
"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add backend directory to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "backend"))

from models import FoldSeries, Quadrant  # noqa: E402
from report_io import read_rank_table  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

PUBLISHED_QUADRANTS = {
    "TabICL": Quadrant.EAGLE,
    "CatBoost": Quadrant.EAGLE,
    "TabPFN": Quadrant.EAGLE,
    "EBM": Quadrant.EAGLE,
    "GBC": Quadrant.EAGLE,
    "RandomForest": Quadrant.EAGLE,
    "HGB": Quadrant.BULL,
    "LightGBM": Quadrant.BULL,
    "NCA": Quadrant.BULL,
    "XGBoost": Quadrant.BULL,
    "TabM": Quadrant.BULL,
    "LDA": Quadrant.SLOTH,
    "TabTransformer": Quadrant.SLOTH,
    "LR": Quadrant.SLOTH,
    "SVM": Quadrant.SLOTH,
    "AVG": Quadrant.SLOTH,
    "ExtraTrees": Quadrant.MOLE,
    "RealMLP": Quadrant.MOLE,
    "NaiveBayes": Quadrant.MOLE,
    "MLP": Quadrant.MOLE,
    "KNN": Quadrant.MOLE,
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo acceptance checks (deselect with -m 'not slow')")


@pytest.fixture
def published_path() -> Path:
    return FIXTURES / "published_expected_ranks.csv"


@pytest.fixture
def published_ranks(published_path):
    with open(published_path, encoding="utf-8", newline="") as handle:
        return read_rank_table(handle)


@pytest.fixture
def published_quadrants():
    return dict(PUBLISHED_QUADRANTS)


@pytest.fixture
def published_logs_dir():
    """Directory of downloaded published prediction logs, if configured"""
    location = os.environ.get("PMATRIX_PUBLISHED_LOGS")
    if not location or not Path(location).is_dir():
        pytest.skip("PMATRIX_PUBLISHED_LOGS not set")
    return Path(location)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_series(labels, probs) -> FoldSeries:
    return FoldSeries(np.asarray(labels), np.asarray(probs, dtype=float))
