import numpy as np
import pytest

from vesseldiff.graphs import SpatialGraph


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_graph(coords, edge_list, num_classes):
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    edges = np.zeros((n, n), dtype=np.int64)
    for i, j, c in edge_list:
        edges[i, j] = c
        edges[j, i] = c
    return SpatialGraph(coords=coords, edges=edges, num_classes=num_classes)


def path_graph(n, num_classes=2, cls=1):
    coords = np.stack([np.arange(n, dtype=np.float64),
                       np.zeros(n), np.zeros(n)], axis=1)
    return make_graph(coords, [(i, i + 1, cls) for i in range(n - 1)], num_classes)
