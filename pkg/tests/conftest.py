import numpy as np
import pytest

from ml2o.cell import random_params
from ml2o.numeric import RngStream
from ml2o.tasks import QUADRATIC, OptimizeeTask


@pytest.fixture
def rng():
    return RngStream(20240817)


def make_quadratic(rng: RngStream, dim: int) -> OptimizeeTask:
    a = rng.gen.normal(size=(dim, dim))
    b = rng.gen.normal(size=dim)
    return OptimizeeTask(kind=QUADRATIC, dim=dim, a=a, b=b)


def make_probe_params(rng: RngStream, hidden: int, feature_dim: int = 2):
    return random_params(hidden, feature_dim, rng)


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(want)), 1e-300)
    return float(np.linalg.norm(got - want)) / denom
