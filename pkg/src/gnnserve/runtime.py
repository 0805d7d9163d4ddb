"""End-to-end serving pipelines, the analytic cost model, and benchmarks.

``ServingEngine.serve`` dispatches a request to one of four strategies:

* full      -- centralized k-hop computation graph
* sampled   -- centralized fanout-capped graph
* srpe      -- centralized reuse graph with policy-selected recomputation
* srpe-cgp  -- the partition-parallel pipeline: split the request, select
               recomputation targets consistently on every rank from
               all-gathered candidate statistics, build local shards, and
               execute with collective merges

Latency is reported as fetch (graph construction and data gathering),
transfer (simulated host-to-device copy at a configured bandwidth,
12 GB/s by default), and compute.  The throughput harness runs in virtual
time over measured service times, so load curves don't require wall-clock
pacing.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from . import cgpexec, policy as policy_mod
from .collectives import World, make_sim_worlds, run_ranks
from .compgraph import (
    BIND_FEATURE,
    BIND_PE,
    ComputationGraph,
    PartitionedRequest,
    ServingRequest,
    build_full_k_hop,
    build_partitioned,
    build_sampled,
    build_srpe,
    partition_request,
)
from .graphstore import (
    FeatureCache,
    GraphDataset,
    PeStore,
    build_feature_cache,
    build_partition_feature_cache,
    partition_random_hash,
    scatter_pe,
)
from .models import ModelSpec, Weights, forward_full

STRATEGIES = ("full", "sampled", "srpe", "srpe-cgp")
EDGE_BYTES = 16  # two u64 endpoints

METRICS_HEADER = (
    "request_id,strategy,batch,partitions,fetch_ms,transfer_ms,compute_ms,"
    "fetch_bytes,collective_bytes,total_ms"
)


@dataclass
class ServeConfig:
    strategy: str = "full"
    fanouts: tuple[int, ...] | None = None
    gamma: float = 0.0
    policy: str = policy_mod.POLICY_RATIO
    num_partitions: int = 1
    cache_bytes: int = 0
    transport: str = "sim"
    bandwidth_bytes_per_s: float = 12e9
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "sampled" and not self.fanouts:
            raise ValueError("sampled strategy needs fanouts")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.strategy == "srpe-cgp" and self.policy == policy_mod.POLICY_ORACLE:
            raise ValueError("oracle policy needs full embeddings; not available under cgp")


@dataclass
class LatencyBreakdown:
    fetch_ms: float = 0.0
    transfer_ms: float = 0.0
    compute_ms: float = 0.0
    collective_bytes: int = 0
    fetch_bytes: int = 0

    @property
    def total_ms(self) -> float:
        return self.fetch_ms + self.transfer_ms + self.compute_ms


def metrics_line(request_id, strategy, batch, partitions, bd: LatencyBreakdown) -> str:
    return (
        f"{request_id},{strategy},{batch},{partitions},{bd.fetch_ms:.3f},{bd.transfer_ms:.3f},"
        f"{bd.compute_ms:.3f},{bd.fetch_bytes},{bd.collective_bytes},{bd.total_ms:.3f}"
    )


def graph_fetch_bytes(graph: ComputationGraph, feature_dim: int, pe_store: PeStore | None, cache: FeatureCache | None) -> int:
    """Bytes of feature rows, stored-embedding rows, and edges materialized."""
    total = 0
    for block in graph.blocks:
        total += block.num_edges * EDGE_BYTES
        feat = (block.bind_kind == BIND_FEATURE) & (block.src_ids < graph.num_base)
        ids = block.src_ids[feat]
        if cache is not None and ids.size:
            ids = ids[~cache.contains(ids)]
        total += int(ids.size) * feature_dim * 4
        pe_mask = block.bind_kind == BIND_PE
        if pe_mask.any() and pe_store is not None:
            for layer in np.unique(block.bind_pe_layer[pe_mask]):
                n_rows = int((pe_mask & (block.bind_pe_layer == layer)).sum())
                total += n_rows * pe_store.dim(int(layer)) * 4
    return total


# ---------------------------------------------------------------------------
# Distributed target selection (every rank derives the same plan)
# ---------------------------------------------------------------------------


def _local_candidate_counts(prequest: PartitionedRequest) -> tuple[np.ndarray, np.ndarray]:
    base = prequest.num_base
    e = prequest.edges
    if not e.size:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    src, dst = e[:, 0], e[:, 1]
    ids = np.unique(np.concatenate([src[src < base], dst[dst < base]]))
    into = dst[dst < base]
    counts = np.bincount(into, minlength=base) if into.size else np.zeros(base, dtype=np.int64)
    return ids, counts[ids].astype(np.int64)


def _encode_stats(ids: np.ndarray, nq: np.ndarray) -> bytes:
    return struct.pack("<Q", len(ids)) + ids.astype("<u8").tobytes() + nq.astype("<u8").tobytes()


def _decode_stats(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    (n,) = struct.unpack_from("<Q", buf, 0)
    ids = np.frombuffer(buf, dtype="<u8", count=n, offset=8).astype(np.int64)
    nq = np.frombuffer(buf, dtype="<u8", count=n, offset=8 + 8 * n).astype(np.int64)
    return ids, nq


def select_targets_distributed(
    world: World,
    local_partition,
    prequest: PartitionedRequest,
    gamma: float,
    policy: str,
    seed: int,
):
    """Gather per-rank candidate statistics and select one global plan.

    Each rank scores the candidates visible in its edge shard; the
    statistics are all-gathered and combined identically everywhere, so the
    selected target set agrees on every rank without further negotiation.
    """
    ids, nq = _local_candidate_counts(prequest)
    gathered = world.all_gather(_encode_stats(ids, nq))
    base = prequest.num_base
    totals = np.zeros(base, dtype=np.int64)
    seen = np.zeros(base, dtype=bool)
    for buf in gathered:
        g_ids, g_nq = _decode_stats(buf)
        totals[g_ids] += g_nq
        seen[g_ids] = True
    cand_ids = np.flatnonzero(seen).astype(np.int64)
    cand = policy_mod.candidate_set_from_parts(cand_ids, totals[cand_ids], local_partition.train_in_degrees)

    if policy == policy_mod.POLICY_RATIO:
        scores = policy_mod.score_query_edge_ratio(cand)
    elif policy == policy_mod.POLICY_IS:
        partial = policy_mod.importance_partial_sums(cand.ids, local_partition)
        blobs = world.all_gather(partial.astype("<f8").tobytes())
        sums = np.zeros(len(cand), dtype=np.float64)
        for buf in blobs:
            sums += np.frombuffer(buf, dtype="<f8")
        deg = local_partition.train_in_degrees[cand.ids].astype(np.float64)
        scores = np.where(deg > 0, sums / np.maximum(deg, 1.0), 0.0)
    elif policy == policy_mod.POLICY_RANDOM:
        scores = np.zeros(len(cand))
    else:
        raise ValueError(f"policy {policy!r} not supported under distributed selection")
    plan = policy_mod.select_targets(cand, scores, gamma, policy, tie_seed=seed)
    return plan, cand


def run_cgp_request(
    world: World,
    local_partition,
    prequest: PartitionedRequest,
    model: ModelSpec,
    weights: Weights,
    gamma: float,
    policy: str,
    seed: int,
    cache: FeatureCache | None = None,
) -> tuple[np.ndarray | None, dict]:
    """One rank's share of a partition-parallel request; rank 0 gets the rows."""
    t0 = time.perf_counter()
    plan, _ = select_targets_distributed(world, local_partition, prequest, gamma, policy, seed)
    shard = build_partitioned(prequest, local_partition, plan.targets, model.k)
    t1 = time.perf_counter()
    emb = cgpexec.execute_model(world, shard, model, weights, local_partition, prequest)
    t2 = time.perf_counter()
    stats = {
        "fetch_ms": (t1 - t0) * 1e3,
        "compute_ms": (t2 - t1) * 1e3,
        "collective_bytes": world.comm_bytes().sent,
        "fetch_bytes": _shard_fetch_bytes(shard, local_partition, cache),
        "targets": plan.targets,
        "shard_counts": shard_counts(shard),
    }
    return emb, stats


def _shard_fetch_bytes(shard: ComputationGraph, local_partition, cache: FeatureCache | None) -> int:
    total = 0
    fdim = local_partition.features.shape[1] if local_partition.features.size else 0
    for block in shard.blocks:
        total += block.num_edges * EDGE_BYTES
        feat = (block.bind_kind == BIND_FEATURE) & (block.src_ids < shard.num_base)
        ids = block.src_ids[feat]
        if cache is not None and ids.size:
            ids = ids[~cache.contains(ids)]
        total += int(ids.size) * fdim * 4
        pe_mask = block.bind_kind == BIND_PE
        if pe_mask.any() and local_partition.pe is not None:
            for layer in np.unique(block.bind_pe_layer[pe_mask]):
                n_rows = int((pe_mask & (block.bind_pe_layer == layer)).sum())
                total += n_rows * local_partition.pe.dim(int(layer)) * 4
    return total


def shard_counts(graph: ComputationGraph) -> dict:
    return {
        "src": [b.num_src for b in graph.blocks],
        "dst": [b.num_dst for b in graph.blocks],
        "edges": [b.num_edges for b in graph.blocks],
    }


# ---------------------------------------------------------------------------
# Serving engine
# ---------------------------------------------------------------------------


class ServingEngine:
    """Holds the loaded dataset, stored embeddings, weights, and partitions."""

    def __init__(
        self,
        dataset: GraphDataset,
        pe: PeStore | None,
        model: ModelSpec,
        weights: Weights,
        config: ServeConfig,
    ):
        self.dataset = dataset
        self.pe = pe
        self.model = model
        self.weights = weights
        self.config = config
        self.cache = (
            build_feature_cache(dataset, config.cache_bytes) if config.cache_bytes > 0 else None
        )
        self.pmap = None
        self.parts = None
        self.part_caches: list[FeatureCache | None] = []
        if config.strategy == "srpe-cgp":
            self.pmap, self.parts = partition_random_hash(dataset, config.num_partitions, config.seed)
            if pe is not None:
                scatter_pe(pe, self.parts)
            if config.cache_bytes > 0:
                per_rank = config.cache_bytes // config.num_partitions
                self.part_caches = [
                    build_partition_feature_cache(dataset, part.owned_ids, per_rank)
                    for part in self.parts
                ]
            else:
                self.part_caches = [None] * config.num_partitions

    def _centralized_plan(self, request: ServingRequest):
        cfg = self.config
        cand = policy_mod.find_candidates(request, self.dataset)
        if cfg.policy == policy_mod.POLICY_RATIO:
            scores = policy_mod.score_query_edge_ratio(cand)
        elif cfg.policy == policy_mod.POLICY_IS:
            scores = policy_mod.score_importance(cand, self.dataset)
        elif cfg.policy == policy_mod.POLICY_RANDOM:
            scores = np.zeros(len(cand))
        elif cfg.policy == policy_mod.POLICY_ORACLE:
            _, full = policy_mod.full_candidate_embeddings(
                self.dataset, request, self.model, self.weights, self.pe
            )
            scores = policy_mod.approximation_error(full, self.pe, cand)
        else:
            raise ValueError(f"unknown policy {cfg.policy!r}")
        return policy_mod.select_targets(cand, scores, cfg.gamma, cfg.policy, tie_seed=cfg.seed)

    def serve(self, request: ServingRequest) -> tuple[np.ndarray, LatencyBreakdown]:
        cfg = self.config
        if cfg.strategy == "srpe-cgp":
            return self._serve_cgp(request)
        t0 = time.perf_counter()
        if cfg.strategy == "full":
            graph = build_full_k_hop(request, self.dataset, self.model.k)
        elif cfg.strategy == "sampled":
            graph = build_sampled(request, self.dataset, cfg.fanouts, cfg.seed)
        else:  # srpe
            if self.pe is None:
                raise ValueError("reuse strategy needs stored embeddings")
            plan = self._centralized_plan(request)
            graph = build_srpe(request, self.dataset, self.pe, self.model.k, plan)
        t1 = time.perf_counter()
        emb = forward_full(
            self.model, graph, self.weights, self.dataset.features, request.query_features, self.pe
        )
        t2 = time.perf_counter()
        fetch_bytes = graph_fetch_bytes(graph, self.dataset.feature_dim, self.pe, self.cache)
        bd = LatencyBreakdown(
            fetch_ms=(t1 - t0) * 1e3,
            transfer_ms=fetch_bytes / cfg.bandwidth_bytes_per_s * 1e3,
            compute_ms=(t2 - t1) * 1e3,
            collective_bytes=0,
            fetch_bytes=fetch_bytes,
        )
        return emb, bd

    def _serve_cgp(self, request: ServingRequest) -> tuple[np.ndarray, LatencyBreakdown]:
        cfg = self.config
        if self.pe is None:
            raise ValueError("reuse strategy needs stored embeddings")
        prequests = partition_request(request, self.pmap, cfg.num_partitions)
        worlds = make_sim_worlds(cfg.num_partitions)
        args = [
            (self.parts[r], prequests[r], self.model, self.weights, cfg.gamma, cfg.policy, cfg.seed, self.part_caches[r])
            for r in range(cfg.num_partitions)
        ]
        results = run_ranks(worlds, run_cgp_request, args)
        emb = results[0][0]
        stats = [r[1] for r in results]
        fetch_bytes = sum(s["fetch_bytes"] for s in stats)
        bd = LatencyBreakdown(
            fetch_ms=max(s["fetch_ms"] for s in stats),
            transfer_ms=fetch_bytes / cfg.num_partitions / cfg.bandwidth_bytes_per_s * 1e3,
            compute_ms=max(s["compute_ms"] for s in stats),
            collective_bytes=sum(s["collective_bytes"] for s in stats),
            fetch_bytes=fetch_bytes,
        )
        return emb, bd


# ---------------------------------------------------------------------------
# Analytic latency model for partition-parallel execution
# ---------------------------------------------------------------------------


@dataclass
class CostModelInput:
    src_counts: list[int]    # S_i per layer
    dst_counts: list[int]    # D_i per layer
    edge_counts: list[int]   # E_i per layer
    agg_bytes: int           # T: bytes of one exchanged aggregate row
    feature_bytes: int       # F: bytes of one feature row
    edge_bytes: int          # E: bytes of one edge
    machines: int            # M

    @classmethod
    def from_graph(cls, graph: ComputationGraph, agg_bytes: int, feature_bytes: int, machines: int) -> "CostModelInput":
        counts = shard_counts(graph)
        return cls(
            src_counts=counts["src"],
            dst_counts=counts["dst"],
            edge_counts=counts["edges"],
            agg_bytes=agg_bytes,
            feature_bytes=feature_bytes,
            edge_bytes=EDGE_BYTES,
            machines=machines,
        )


@dataclass
class CgpLatencyEstimate:
    comm_bytes: int
    copy_bytes: int
    compute_ms: float
    comm_ms: float
    copy_ms: float


def estimate_cgp_latency(
    cost: CostModelInput, bandwidth_bytes_per_s: float, centralized_compute_ms: float
) -> CgpLatencyEstimate:
    """Analytic components: per-machine sends of T bytes per destination,
    a 1/M share of the feature and edge copy volume, and compute scaled by M."""
    if cost.machines < 1:
        raise ValueError("need at least one machine")
    comm = cost.agg_bytes * sum(cost.dst_counts)
    copy = (cost.feature_bytes * cost.src_counts[0] + cost.edge_bytes * sum(cost.edge_counts)) // cost.machines
    compute_ms = centralized_compute_ms / cost.machines
    return CgpLatencyEstimate(
        comm_bytes=comm,
        copy_bytes=copy,
        compute_ms=compute_ms,
        comm_ms=comm / bandwidth_bytes_per_s * 1e3,
        copy_ms=copy / bandwidth_bytes_per_s * 1e3,
    )


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def policy_benchmark(
    dataset: GraphDataset,
    pool,
    model: ModelSpec,
    weights: Weights,
    pe: PeStore,
    policies: list[str],
    budgets: list[float],
    num_batches: int,
    batch_size: int,
    seed: int,
) -> dict[tuple[str, float], float]:
    """Mean residual approximation error per (policy, budget) over batches."""
    from .workload import make_request

    acc = {(p, b): 0.0 for p in policies for b in budgets}
    for batch in range(num_batches):
        request = make_request(pool, dataset, batch_size, seed + batch)
        cand, full = policy_mod.full_candidate_embeddings(dataset, request, model, weights, pe)
        errors = policy_mod.approximation_error(full, pe, cand)
        for pol in policies:
            if pol == policy_mod.POLICY_RATIO:
                scores = policy_mod.score_query_edge_ratio(cand)
            elif pol == policy_mod.POLICY_IS:
                scores = policy_mod.score_importance(cand, dataset)
            elif pol == policy_mod.POLICY_RANDOM:
                scores = np.zeros(len(cand))
            elif pol == policy_mod.POLICY_ORACLE:
                scores = errors
            else:
                raise ValueError(f"unknown policy {pol!r}")
            for budget in budgets:
                plan = policy_mod.select_targets(cand, scores, budget, pol, tie_seed=seed + batch)
                acc[(pol, budget)] += _residual_error(
                    dataset, request, model, weights, pe, cand, full, errors, plan.targets
                )
    return {key: val / num_batches for key, val in acc.items()}


def _residual_error(dataset, request, model, weights, pe, cand, full, errors, targets) -> float:
    if model.k == 2:
        # recomputation is exact at layer 1: residual is the unrecomputed error
        mask = ~np.isin(cand.ids, targets)
        return float(errors[mask].sum())
    _, recomputed = policy_mod.recomputed_candidate_embeddings(
        dataset, request, model, weights, pe, targets
    )
    total = 0.0
    for f_l, r_l in zip(full, recomputed):
        total += float(np.linalg.norm(f_l.astype(np.float64) - r_l.astype(np.float64), axis=1).sum())
    return total


def poisson_interarrivals(rate_per_s: float, count: int, seed: int) -> np.ndarray:
    if rate_per_s <= 0:
        raise ValueError("rate must be positive")
    rng = np.random.default_rng(seed)
    return rng.exponential(1.0 / rate_per_s, size=count)


@dataclass
class ThroughputReport:
    offered_rate: float
    achieved_rate: float
    completed: int
    p50_ms: float
    p95_ms: float
    p99_ms: float


def throughput_benchmark(serve_fn, request_factory, rate_per_s: float, duration_s: float, seed: int) -> ThroughputReport:
    """FIFO single-server queue in virtual time with measured service times.

    Arrivals follow exponential inter-arrival gaps; each admitted request is
    actually served (wall-clock measured) and its completion placed on the
    virtual timeline.  Latency is completion minus arrival.
    """
    rng = np.random.default_rng(seed)
    arrivals = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate_per_s)
        if t >= duration_s:
            break
        arrivals.append(t)
    free_at = 0.0
    latencies = []
    completed = 0
    for i, arr in enumerate(arrivals):
        start = max(arr, free_at)
        if start >= duration_s:
            break
        t0 = time.perf_counter()
        serve_fn(request_factory(i))
        service = time.perf_counter() - t0
        completion = start + service
        free_at = completion
        if completion <= duration_s:
            completed += 1
            latencies.append((completion - arr) * 1e3)
    if latencies:
        p50, p95, p99 = np.percentile(latencies, [50, 95, 99])
    else:
        p50 = p95 = p99 = 0.0
    return ThroughputReport(
        offered_rate=rate_per_s,
        achieved_rate=completed / duration_s,
        completed=completed,
        p50_ms=float(p50),
        p95_ms=float(p95),
        p99_ms=float(p99),
    )
