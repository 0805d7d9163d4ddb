import numpy as np
import pytest

from gnnserve.compgraph import ServingRequest
from gnnserve.graphstore import PartitionMap, make_dataset

# 8-node running example used across the suite:
#   in(0) = {1,2,3}, in(2) = {1,4}, in(3) = {0,5,7}, in(4) = {5,6}, in(7) = {6}
DEMO_EDGES = [
    (1, 0), (2, 0), (3, 0),
    (1, 2), (4, 2),
    (0, 3), (5, 3), (7, 3),
    (6, 7),
    (5, 4), (6, 4),
]


@pytest.fixture
def demo_dataset():
    rng = np.random.default_rng(0)
    return make_dataset(DEMO_EDGES, 8, rng.standard_normal((8, 4)).astype(np.float32))


@pytest.fixture
def demo_request(demo_dataset):
    """Two queries: 8 attached to {2, 3}, 9 attached to {2, 4, 7}; both directions."""
    rng = np.random.default_rng(1)
    pairs = [(8, 2), (8, 3), (9, 2), (9, 4), (9, 7)]
    edges = [(q, t) for q, t in pairs] + [(t, q) for q, t in pairs]
    return ServingRequest(
        num_base=8,
        num_queries=2,
        query_features=rng.standard_normal((2, 4)).astype(np.float32),
        edges=np.array(edges),
    )


@pytest.fixture
def demo_pmap():
    # even ids on partition 0, odd on partition 1 (matches the worked example)
    return PartitionMap(num_partitions=2, owner=np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=np.int64))


def small_workload(seed: int, n: int = 300, avg_degree: float = 8.0, feature_dim: int = 10):
    from gnnserve import workload

    full = workload.gen_powerlaw_graph(n, avg_degree, 2.1, feature_dim, seed=seed)
    return workload.split_holdout(full, 0.25, seed=seed)
