import numpy as np
import pytest

from cefedgnn.graphs import EdgeRecord, NodeRecord, build_graph
from cefedgnn.rng import stream


def random_partitioned_graph(n_nodes, n_edges, n_clients, seed, *,
                             feature_dim=4, edge_labels=True):
    rng = stream(seed, 99)
    nodes = [NodeRecord(i, int(rng.integers(n_clients)), rng.normal(size=feature_dim))
             for i in range(n_nodes)]
    edges = []
    for e in range(n_edges):
        u = int(rng.integers(n_nodes))
        v = int(rng.integers(n_nodes))
        while v == u:
            v = int(rng.integers(n_nodes))
        label = int(rng.integers(2)) if edge_labels else None
        edges.append(EdgeRecord(e, u, v, np.array([rng.random(), rng.random()]), label))
    return build_graph(nodes, edges, n_clients)


@pytest.fixture
def two_client_cross_edge():
    """Two nodes on different clients joined by a single labeled edge."""
    rng = stream(42, 0)
    nodes = [NodeRecord(0, 0, rng.normal(size=4)), NodeRecord(1, 1, rng.normal(size=4))]
    edges = [EdgeRecord(0, 0, 1, None, 1)]
    return build_graph(nodes, edges, 2)
