import numpy as np
import pytest
import torch

from mapmatch.geo import GeoPoint
from mapmatch.network import SpatialIndex, build_grid_network, build_network


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def grid5():
    return build_grid_network(5, 5, spacing_m=250.0)


@pytest.fixture(scope="session")
def grid5_idx(grid5):
    return SpatialIndex(grid5)


@pytest.fixture(scope="session")
def grid3():
    return build_grid_network(3, 3, spacing_m=200.0)


@pytest.fixture(scope="session")
def grid3_idx(grid3):
    return SpatialIndex(grid3)


@pytest.fixture()
def two_node_net():
    nodes = {0: GeoPoint(41.0, -8.0), 1: GeoPoint(41.001, -8.0)}
    edges = [(0, 0, 1, [nodes[0], nodes[1]])]
    return build_network(nodes, edges)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
