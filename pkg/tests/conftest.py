import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from utils.obsgraph import StateGraph, normalize_adjacency  # noqa: E402
from utils.roadnet import generate_grid_network  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiment (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def grid2():
    return generate_grid_network(2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def single_tsc_graph():
    """Factory for an isolated one-TSC graph (no connections, lanes or vehicles)."""
    def make(seconds=0.0, tsc_id="T"):
        features = {
            "tsc": np.array([[float(seconds)]]),
            "connection": np.zeros((0, 4)),
            "lane": np.zeros((0, 1)),
            "vehicle": np.zeros((0, 2)),
        }
        return StateGraph(node_ids=[f"tsc:{tsc_id}"], features=features, edges=np.zeros((0, 2), dtype=int),
                          a_hat=normalize_adjacency(sp.csr_matrix((1, 1))), tsc_ids=[tsc_id],
                          vehicle_lane_length=np.zeros(0), scaled=True)
    return make
