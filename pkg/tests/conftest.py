import os

import numpy as np
import pytest

from ellipmeta.app import ingest
from ellipmeta.posterior import Dataset

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def blood_pressure_csv() -> str:
    return os.path.join(DATA_DIR, "hypertension.csv")


@pytest.fixture(scope="session")
def blood_pressure(blood_pressure_csv) -> Dataset:
    """Ten two-outcome studies with known within-study covariances."""
    return ingest(blood_pressure_csv, "csv")


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_spd(p: int, rng: np.random.Generator, jitter: float = 0.05) -> np.ndarray:
    m = rng.standard_normal((p, p))
    return 0.5 * (m @ m.T + (m @ m.T).T) + jitter * np.eye(p)


@pytest.fixture(scope="session")
def scalar_five_study() -> Dataset:
    """p=1, n=5 dataset with well-identified heterogeneity."""
    x = np.array([[0.3], [1.8], [0.9], [1.5], [0.6]])
    u = np.array([[[0.05]], [[0.08]], [[0.06]], [[0.10]], [[0.07]]])
    return Dataset.create(x, u)
