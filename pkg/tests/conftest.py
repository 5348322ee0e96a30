import os

import numpy as np
import pytest
import torch

from attnvo import dataset as ds
from attnvo import objective

FIXTURE_ROOT = os.path.join(os.path.dirname(__file__), "data", "kitti_mini")
FIXTURE_IDS = ("00", "01", "02")
FIXTURE_SIZE = (64, 192)


@pytest.fixture(scope="session")
def fixture_root():
    return FIXTURE_ROOT


@pytest.fixture(scope="session")
def records():
    return [ds.load_sequence(FIXTURE_ROOT, s) for s in FIXTURE_IDS]


@pytest.fixture(scope="session")
def fixture_cov(records):
    return objective.fit_covariance([xi for r in records for xi in r.relative_twists()])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_twist(rng, max_angle=2.0, max_trans=3.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, max_angle) / np.linalg.norm(w)
    v = rng.uniform(-max_trans, max_trans, size=3)
    return np.concatenate([v, w])
