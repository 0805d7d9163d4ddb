"""Synthetic datasets and serving workloads.

Serving requests are synthesized by holding out a fraction of test nodes:
the serving graph drops the held-out nodes and every edge touching them,
and a request re-attaches a random batch of held-out nodes as query nodes.
For each surviving incident edge both directions are included, so a query
both aggregates from its neighbors and influences their recomputation.

Synthetic graphs come from a configuration model with power-law in- and
out-degree sequences (independent draws, matched totals, random stub
matching); features are standard normal, masks split 80/20 train/test.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .compgraph import ServingRequest
from .graphstore import GraphDataset, export_edges, make_dataset


@dataclass
class WorkloadSpec:
    holdout_fraction: float = 0.25
    batch_sizes: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048])
    num_requests: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout fraction must lie in (0, 1)")
        if any(b < 1 for b in self.batch_sizes):
            raise ValueError("batch sizes must be >= 1")


@dataclass
class HoldoutPool:
    ids: np.ndarray             # ascending held-out node ids
    removed: np.ndarray         # bool mask over all nodes
    features: np.ndarray        # rows aligned with ids
    incident_edges: np.ndarray  # original (src, dst) rows touching held-out nodes


def split_holdout(dataset: GraphDataset, fraction: float, seed: int) -> tuple[GraphDataset, HoldoutPool]:
    """Remove a random fraction of test nodes and all edges touching them."""
    test_ids = np.flatnonzero(dataset.test_mask)
    if not test_ids.size:
        raise ValueError("dataset has no test nodes")
    count = max(1, int(round(fraction * len(test_ids))))
    if count > len(test_ids):
        count = len(test_ids)
    rng = np.random.default_rng(seed)
    held = np.sort(rng.choice(test_ids, size=count, replace=False)).astype(np.int64)
    removed = np.zeros(dataset.num_nodes, dtype=bool)
    removed[held] = True

    edges = export_edges(dataset)
    incident = removed[edges[:, 0]] | removed[edges[:, 1]]
    serving = make_dataset(
        edges[~incident],
        dataset.num_nodes,
        dataset.features,
        train_mask=dataset.train_mask & ~removed,
        test_mask=dataset.test_mask & ~removed,
    )
    pool = HoldoutPool(
        ids=held,
        removed=removed,
        features=dataset.features[held],
        incident_edges=edges[incident],
    )
    return serving, pool


def make_request(
    pool: HoldoutPool,
    serving_graph: GraphDataset,
    batch_size: int,
    seed: int,
    include_query_query: bool = False,
) -> ServingRequest:
    """Select held-out nodes as queries and re-attach their surviving edges.

    Queries are renumbered densely above the node count in ascending
    original-id order.  Edges to unselected held-out nodes are dropped;
    query-to-query edges only appear when explicitly enabled.
    """
    if batch_size > len(pool.ids):
        raise ValueError("batch size exceeds holdout pool")
    rng = np.random.default_rng(seed)
    selected = np.sort(rng.choice(pool.ids, size=batch_size, replace=False)).astype(np.int64)
    base = serving_graph.num_nodes
    qid = np.full(base, -1, dtype=np.int64)
    qid[selected] = base + np.arange(batch_size)

    e = pool.incident_edges
    a, b = e[:, 0], e[:, 1]
    a_q = qid[a] >= 0
    b_q = qid[b] >= 0
    # drop rows touching an unselected held-out node
    keep = ~((pool.removed[a] & ~a_q) | (pool.removed[b] & ~b_q))
    if not include_query_query:
        keep &= ~(a_q & b_q)
    a, b = a[keep], b[keep]
    src = np.where(qid[a] >= 0, qid[a], a)
    dst = np.where(qid[b] >= 0, qid[b], b)
    both_dirs = np.concatenate([np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)])
    return ServingRequest(
        num_base=base,
        num_queries=batch_size,
        query_features=pool.features[np.searchsorted(pool.ids, selected)],
        edges=both_dirs,
    )


def _powerlaw_sequence(rng: np.random.Generator, n: int, avg: float, exponent: float, dmax: int) -> np.ndarray:
    """Discrete power-law degrees rescaled to an exact target sum."""
    target = int(round(n * avg))
    if target > n * dmax:
        raise ValueError("average degree infeasible for the degree cap")
    support = np.arange(1, dmax + 1, dtype=np.float64)
    pmf = support ** (-exponent)
    cdf = np.cumsum(pmf / pmf.sum())
    raw = np.searchsorted(cdf, rng.random(n)) + 1
    scale = avg / raw.mean()
    deg = np.clip(np.round(raw * scale), 1, dmax).astype(np.int64)
    # nudge random entries until the sum is exact
    for _ in range(1000):
        diff = target - int(deg.sum())
        if diff == 0:
            return deg
        idx = rng.integers(0, n, size=abs(diff))
        if diff > 0:
            idx = idx[deg[idx] < dmax]
            np.add.at(deg, idx, 1)
        else:
            idx = idx[deg[idx] > 1]
            np.add.at(deg, idx, -1)
        np.clip(deg, 1, dmax, out=deg)
    raise ValueError("could not realize the requested degree sequence")


def gen_powerlaw_graph(n: int, avg_degree: float, exponent: float, feature_dim: int, seed: int) -> GraphDataset:
    """Configuration-model graph with power-law out- (and in-) degrees."""
    if n < 2:
        raise ValueError("need at least two nodes")
    if avg_degree < 1:
        raise ValueError("average degree must be >= 1")
    rng = np.random.default_rng(seed)
    dmax = n - 1
    out_deg = _powerlaw_sequence(rng, n, avg_degree, exponent, dmax)
    in_deg = _powerlaw_sequence(rng, n, avg_degree, exponent, dmax)
    src = np.repeat(np.arange(n, dtype=np.int64), out_deg)
    dst = np.repeat(np.arange(n, dtype=np.int64), in_deg)
    rng.shuffle(src)
    rng.shuffle(dst)
    edges = np.stack([src, dst], axis=1)
    features = rng.standard_normal((n, feature_dim)).astype(np.float32)
    perm = rng.permutation(n)
    split = int(0.8 * n)
    train_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)
    train_mask[perm[:split]] = True
    test_mask[perm[split:]] = True
    return make_dataset(edges, n, features, train_mask=train_mask, test_mask=test_mask)


# pool files stored next to the dataset: holdout_ids.bin (u64) and
# holdout_edges.bin (u64 pairs); features come from the dataset's rows.


def save_pool(pool: HoldoutPool, path: str) -> None:
    pool.ids.astype("<u8").tofile(os.path.join(path, "holdout_ids.bin"))
    pool.incident_edges.astype("<u8").tofile(os.path.join(path, "holdout_edges.bin"))


def load_pool(path: str, dataset: GraphDataset) -> HoldoutPool | None:
    ids_path = os.path.join(path, "holdout_ids.bin")
    if not os.path.exists(ids_path):
        return None
    ids = np.fromfile(ids_path, dtype="<u8").astype(np.int64)
    edges = np.fromfile(os.path.join(path, "holdout_edges.bin"), dtype="<u8").astype(np.int64).reshape(-1, 2)
    removed = np.zeros(dataset.num_nodes, dtype=bool)
    removed[ids] = True
    return HoldoutPool(ids=ids, removed=removed, features=dataset.features[ids], incident_edges=edges)
