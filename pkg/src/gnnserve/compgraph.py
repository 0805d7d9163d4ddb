"""Layered computation graphs for query-node embedding requests.

A request brings B query nodes (ids densely numbered above the dataset's
node count), their feature rows, and edges between queries and training
nodes.  Builders produce per-layer blocks: block l feeds layer l, block k's
destinations are the query nodes, and every source row carries an input
binding (raw feature, stored layer embedding, or the previous block's
output).  Four strategies are supported:

* full        -- recursively expanded k-hop in-neighborhoods
* sampled     -- per-hop fanout-capped neighborhoods
* reuse       -- one-hop graph whose reused neighbors bind to stored
                 embeddings, plus recomputation layers for targets
* partitioned -- the per-partition shard of the reuse graph, restricted to
                 locally-owned sources

Destinations and sources are ordered by (is_query, global id); edges by
(destination, source) local index, which fixes accumulation order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

BIND_FEATURE = 0
BIND_PE = 1
BIND_COMPUTED = 2


@dataclass
class ComputationBlock:
    src_ids: np.ndarray        # global ids, local index order
    dst_ids: np.ndarray        # global ids
    edge_src: np.ndarray       # local source index per edge
    edge_dst: np.ndarray       # local destination index per edge
    bind_kind: np.ndarray      # uint8 per source (BIND_*)
    bind_pe_layer: np.ndarray  # int32 per source, stored-embedding layer when BIND_PE
    src_degree: np.ndarray     # serving-graph in-degree per source
    dst_self_src: np.ndarray | None = None  # per dst: src row carrying h_v^{(l-1)}

    @property
    def num_src(self) -> int:
        return len(self.src_ids)

    @property
    def num_dst(self) -> int:
        return len(self.dst_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_src)

    def in_edge_counts(self) -> np.ndarray:
        return np.bincount(self.edge_dst, minlength=self.num_dst)


@dataclass
class ComputationGraph:
    blocks: list[ComputationBlock]  # blocks[l-1] feeds layer l
    query_ids: np.ndarray
    strategy: str
    num_base: int
    targets: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def k(self) -> int:
        return len(self.blocks)


@dataclass
class ServingRequest:
    """Query nodes, their features, and edges between queries and the graph."""

    num_base: int
    num_queries: int
    query_features: np.ndarray  # B x F float32
    edges: np.ndarray           # m x 2 (src, dst) global ids

    def __post_init__(self):
        self.query_features = np.asarray(self.query_features, dtype=np.float32)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if not np.all(np.isfinite(self.query_features)):
            raise ValueError("query features must be finite")
        hi = self.num_base + self.num_queries
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= hi:
                raise ValueError("request edge endpoint out of range")
            is_q = self.edges >= self.num_base
            if not np.all(is_q.any(axis=1)):
                raise ValueError("every request edge needs a query endpoint")

    @property
    def query_ids(self) -> np.ndarray:
        return np.arange(self.num_base, self.num_base + self.num_queries, dtype=np.int64)

    def query_in_degrees(self) -> np.ndarray:
        """In-degree of each query node within the request."""
        if not self.edges.size:
            return np.zeros(self.num_queries, dtype=np.int64)
        dst = self.edges[:, 1]
        qdst = dst[dst >= self.num_base] - self.num_base
        return np.bincount(qdst, minlength=self.num_queries).astype(np.int64)


def candidate_arrays(request: ServingRequest) -> tuple[np.ndarray, np.ndarray]:
    """Training endpoints of query edges and per-node query-edge in-counts.

    Returns (candidate ids ascending, count of edges query->candidate).
    A candidate reached only by outgoing edges has count 0.
    """
    if not request.edges.size:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    src, dst = request.edges[:, 0], request.edges[:, 1]
    train_endpoints = np.concatenate([src[src < request.num_base], dst[dst < request.num_base]])
    cand = np.unique(train_endpoints)
    into = dst[dst < request.num_base]
    counts_all = np.bincount(into, minlength=request.num_base) if into.size else np.zeros(request.num_base, dtype=np.int64)
    return cand, counts_all[cand].astype(np.int64)


@dataclass
class DegreeView:
    """Source-side normalization degrees.

    A node's normalizer is the in-degree of the graph its input embedding
    originated from: training in-degree for training nodes (query edges
    never change it, so reused stored embeddings stay exact one hop beyond
    the candidates), request in-degree for query nodes.
    """

    num_base: int
    train_in_deg: np.ndarray
    query_in_deg: np.ndarray   # per query node

    @classmethod
    def from_request(cls, dataset, request: ServingRequest) -> "DegreeView":
        return cls(
            num_base=request.num_base,
            train_in_deg=dataset.in_degrees(),
            query_in_deg=request.query_in_degrees(),
        )

    def source_degree(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        out = np.zeros(len(ids), dtype=np.int64)
        is_q = ids >= self.num_base
        out[is_q] = self.query_in_deg[ids[is_q] - self.num_base]
        out[~is_q] = self.train_in_deg[ids[~is_q]]
        return out


class _EdgeIndex:
    """Edges grouped by destination for quick in-source lookups."""

    def __init__(self, edges: np.ndarray):
        self._by_dst: dict[int, np.ndarray] = {}
        if edges.size:
            order = np.lexsort((edges[:, 0], edges[:, 1]))
            src = edges[order, 0]
            dst = edges[order, 1]
            uniq, starts = np.unique(dst, return_index=True)
            bounds = np.append(starts, len(dst))
            for i, d in enumerate(uniq):
                self._by_dst[int(d)] = src[bounds[i]:bounds[i + 1]]
        self._empty = np.empty(0, dtype=np.int64)

    def sources_into(self, dst: int) -> np.ndarray:
        return self._by_dst.get(int(dst), self._empty)


def _order_by_key(ids: np.ndarray, num_base: int) -> np.ndarray:
    """Ascending training ids first, then ascending query ids."""
    ids = np.unique(np.asarray(ids, dtype=np.int64))
    return np.concatenate([ids[ids < num_base], ids[ids >= num_base]])


def _make_block(
    dst_ids: np.ndarray,
    per_dst_sources: list[np.ndarray],
    num_base: int,
    bind_fn,
    degrees: DegreeView,
    include_self_rows: bool = True,
) -> ComputationBlock:
    all_srcs = [s for s in per_dst_sources if len(s)]
    flat = np.concatenate(all_srcs) if all_srcs else np.empty(0, dtype=np.int64)
    pool = np.concatenate([dst_ids, flat]) if include_self_rows else flat
    src_ids = _order_by_key(pool, num_base)
    perm = np.argsort(src_ids, kind="stable")
    ascending = src_ids[perm]

    def local_index(ids: np.ndarray) -> np.ndarray:
        return perm[np.searchsorted(ascending, ids)]

    counts = np.fromiter((len(s) for s in per_dst_sources), dtype=np.int64, count=len(dst_ids))
    edge_dst = np.repeat(np.arange(len(dst_ids), dtype=np.int64), counts)
    edge_src = local_index(flat) if flat.size else np.empty(0, dtype=np.int64)
    order = np.lexsort((edge_src, edge_dst))
    bind_kind, bind_pe_layer = bind_fn(src_ids)
    self_src = local_index(np.asarray(dst_ids, dtype=np.int64)) if include_self_rows else None
    return ComputationBlock(
        src_ids=src_ids,
        dst_ids=dst_ids,
        edge_src=edge_src[order],
        edge_dst=edge_dst[order],
        bind_kind=bind_kind,
        bind_pe_layer=bind_pe_layer,
        src_degree=degrees.source_degree(src_ids),
        dst_self_src=self_src,
    )


def _serving_in_sources(v: int, dataset, req_idx: _EdgeIndex, num_base: int) -> np.ndarray:
    req = req_idx.sources_into(v)
    if v < num_base:
        train = dataset.in_neighbors_of(v)
        return np.concatenate([train, req]) if req.size else train
    return req


def build_full_k_hop(request: ServingRequest, dataset, k: int) -> ComputationGraph:
    """Recursively expanded k-hop in-neighborhoods of the query nodes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_request(request, dataset)
    req_idx = _EdgeIndex(request.edges)
    degrees = DegreeView.from_request(dataset, request)
    blocks: list[ComputationBlock | None] = [None] * k
    dst_ids = request.query_ids
    for l in range(k, 0, -1):
        sources = [_serving_in_sources(int(v), dataset, req_idx, request.num_base) for v in dst_ids]
        kind = BIND_COMPUTED if l > 1 else BIND_FEATURE

        def bind_fn(src_ids, _kind=kind):
            return (
                np.full(len(src_ids), _kind, dtype=np.uint8),
                np.zeros(len(src_ids), dtype=np.int32),
            )

        blocks[l - 1] = _make_block(dst_ids, sources, request.num_base, bind_fn, degrees)
        dst_ids = blocks[l - 1].src_ids
    return ComputationGraph(blocks, request.query_ids, "full", request.num_base)


def build_sampled(request: ServingRequest, dataset, fanouts, seed: int) -> ComputationGraph:
    """Fanout-capped neighborhoods; fanouts are listed outermost hop first.

    With fanouts (15, 10, 5) and k=3 each query keeps at most 5 direct
    neighbors, each of those at most 10, each of those at most 15: block l
    samples down to fanouts[l-1].
    """
    fanouts = [int(f) for f in fanouts]
    if any(f < 1 for f in fanouts):
        raise ValueError("fanouts must be >= 1")
    k = len(fanouts)
    _check_request(request, dataset)
    req_idx = _EdgeIndex(request.edges)
    degrees = DegreeView.from_request(dataset, request)
    blocks: list[ComputationBlock | None] = [None] * k
    dst_ids = request.query_ids
    for l in range(k, 0, -1):
        fan = fanouts[l - 1]
        sources = []
        for v in dst_ids:
            nbrs = _serving_in_sources(int(v), dataset, req_idx, request.num_base)
            if len(nbrs) > fan:
                rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(l, int(v))))
                keep = rng.choice(len(nbrs), size=fan, replace=False)
                nbrs = np.sort(nbrs[keep])
            sources.append(nbrs)
        kind = BIND_COMPUTED if l > 1 else BIND_FEATURE

        def bind_fn(src_ids, _kind=kind):
            return (
                np.full(len(src_ids), _kind, dtype=np.uint8),
                np.zeros(len(src_ids), dtype=np.int32),
            )

        blocks[l - 1] = _make_block(dst_ids, sources, request.num_base, bind_fn, degrees)
        dst_ids = blocks[l - 1].src_ids
    return ComputationGraph(blocks, request.query_ids, "sampled", request.num_base)


def _reuse_bind_fn(num_base: int, targets: np.ndarray, layer: int):
    """Binding rule shared by the reuse and partitioned builders.

    Queries and recomputation targets are computed rows (features at layer
    1); every other training source reads its stored layer l-1 embedding.
    """
    targets = np.asarray(targets, dtype=np.int64)

    def bind_fn(src_ids):
        recompute = (src_ids >= num_base) | np.isin(src_ids, targets)
        if layer > 1:
            kinds = np.where(recompute, BIND_COMPUTED, BIND_PE).astype(np.uint8)
            pe_layer = np.where(recompute, 0, layer - 1).astype(np.int32)
        else:
            kinds = np.full(len(src_ids), BIND_FEATURE, dtype=np.uint8)
            pe_layer = np.zeros(len(src_ids), dtype=np.int32)
        return kinds, pe_layer

    return bind_fn


def build_srpe(request: ServingRequest, dataset, pe_store, model_k: int, plan) -> ComputationGraph:
    """One-hop reuse graph plus recomputation layers for the plan's targets.

    Block k aggregates the queries' direct neighbors, reading stored
    embeddings for reused neighbors.  Blocks 1..k-1 recompute queries and
    targets from their full in-neighborhoods (including request edges), so
    total source count grows with k, not exponentially.
    """
    if model_k < 2:
        raise ValueError("reuse graphs need k >= 2")
    if pe_store is None or pe_store.num_layers < model_k - 1:
        raise ValueError(f"stored embeddings missing for layers 1..{model_k - 1}")
    _check_request(request, dataset)
    targets = np.unique(np.asarray(getattr(plan, "targets", plan), dtype=np.int64))
    cand, _ = candidate_arrays(request)
    if targets.size and not np.all(np.isin(targets, cand)):
        bad = targets[~np.isin(targets, cand)]
        raise ValueError(f"targets not candidates: {bad[:5].tolist()}")

    req_idx = _EdgeIndex(request.edges)
    degrees = DegreeView.from_request(dataset, request)
    blocks: list[ComputationBlock | None] = [None] * model_k

    q_ids = request.query_ids
    last_sources = [req_idx.sources_into(int(v)) for v in q_ids]
    blocks[model_k - 1] = _make_block(
        q_ids, last_sources, request.num_base,
        _reuse_bind_fn(request.num_base, targets, model_k), degrees,
    )

    mid_dst = _order_by_key(np.concatenate([q_ids, targets]), request.num_base)
    for l in range(model_k - 1, 0, -1):
        sources = [_serving_in_sources(int(v), dataset, req_idx, request.num_base) for v in mid_dst]
        blocks[l - 1] = _make_block(
            mid_dst, sources, request.num_base,
            _reuse_bind_fn(request.num_base, targets, l), degrees,
        )
    return ComputationGraph(blocks, q_ids, "srpe", request.num_base, targets=targets)


@dataclass
class PartitionedRequest:
    """One partition's slice of a request: its queries plus source-local edges."""

    part: int
    num_partitions: int
    num_base: int
    num_queries: int
    assigned_query_ids: np.ndarray
    assigned_features: np.ndarray
    edges: np.ndarray          # rows of the original edge list routed here
    query_in_deg: np.ndarray   # in-degree of every query in the full request


def query_owner(query_ids: np.ndarray, num_base: int, num_partitions: int) -> np.ndarray:
    """Round-robin assignment of query nodes to partitions, by ascending id."""
    return ((np.asarray(query_ids, dtype=np.int64) - num_base) % num_partitions).astype(np.int64)


def partition_request(request: ServingRequest, pmap, num_partitions: int) -> list[PartitionedRequest]:
    """Split a request: queries round-robin, edges to the source's partition."""
    q_ids = request.query_ids
    q_owner = query_owner(q_ids, request.num_base, num_partitions)
    src = request.edges[:, 0]
    edge_owner = np.empty(len(src), dtype=np.int64)
    is_q = src >= request.num_base
    edge_owner[is_q] = query_owner(src[is_q], request.num_base, num_partitions)
    edge_owner[~is_q] = pmap.owner[src[~is_q]]
    q_in_deg = request.query_in_degrees()
    out = []
    for p in range(num_partitions):
        mine = q_owner == p
        out.append(
            PartitionedRequest(
                part=p,
                num_partitions=num_partitions,
                num_base=request.num_base,
                num_queries=request.num_queries,
                assigned_query_ids=q_ids[mine],
                assigned_features=request.query_features[mine],
                edges=request.edges[edge_owner == p],
                query_in_deg=q_in_deg,
            )
        )
    return out


def build_partitioned(
    prequest: PartitionedRequest,
    local_partition,
    targets_global: np.ndarray,
    model_k: int,
) -> ComputationGraph:
    """This partition's shard of the reuse graph.

    Destination lists are the layer's full (global) destination sets so
    every rank emits one partial aggregate per destination; edges and
    bindings are restricted to locally-owned sources.  ``targets_global``
    must be the same agreed set on every rank.
    """
    if model_k < 2:
        raise ValueError("reuse graphs need k >= 2")
    base = prequest.num_base
    p = prequest.part
    degrees = DegreeView(
        num_base=base,
        train_in_deg=local_partition.train_in_degrees,
        query_in_deg=prequest.query_in_deg,
    )
    targets = np.unique(np.asarray(targets_global, dtype=np.int64))
    q_all = np.arange(base, base + prequest.num_queries, dtype=np.int64)
    req_idx = _EdgeIndex(prequest.edges)

    def check_local(src_ids: np.ndarray):
        is_q = src_ids >= base
        bad_q = src_ids[is_q][(src_ids[is_q] - base) % prequest.num_partitions != p]
        if bad_q.size:
            raise ValueError(f"query source {int(bad_q[0])} not assigned to partition {p}")
        bad_t = src_ids[~is_q][local_partition.owner[src_ids[~is_q]] != p]
        if bad_t.size:
            raise ValueError(f"source {int(bad_t[0])} not owned by partition {p}")

    blocks: list[ComputationBlock | None] = [None] * model_k

    last_sources = [req_idx.sources_into(int(v)) for v in q_all]
    blk = _make_block(
        q_all, last_sources, base,
        _reuse_bind_fn(base, targets, model_k), degrees,
        include_self_rows=False,
    )
    check_local(blk.src_ids)
    blocks[model_k - 1] = blk

    mid_dst = _order_by_key(np.concatenate([q_all, targets]), base)
    for l in range(model_k - 1, 0, -1):
        sources = []
        for v in mid_dst:
            v = int(v)
            req = req_idx.sources_into(v)
            if v < base:
                local = local_partition.local_in_sources(v)
                sources.append(np.concatenate([local, req]) if req.size else local)
            else:
                sources.append(req)
        blk = _make_block(
            mid_dst, sources, base,
            _reuse_bind_fn(base, targets, l), degrees,
            include_self_rows=False,
        )
        check_local(blk.src_ids)
        blocks[l - 1] = blk
    return ComputationGraph(blocks, q_all, "partitioned", base, targets=targets)


def _check_request(request: ServingRequest, dataset) -> None:
    if request.num_base != dataset.num_nodes:
        raise ValueError("request numbered against a different dataset")


# ---------------------------------------------------------------------------
# Request directory format: `header` text (B=, F=, k= lines),
# `query_features.bin` (f32), `query_edges.bin` (u64 pairs).
# ---------------------------------------------------------------------------


def save_request(request: ServingRequest, path: str, k: int) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "header"), "w") as f:
        f.write(f"B={request.num_queries}\n")
        f.write(f"F={request.query_features.shape[1]}\n")
        f.write(f"k={k}\n")
    request.query_features.astype("<f4").tofile(os.path.join(path, "query_features.bin"))
    request.edges.astype("<u8").tofile(os.path.join(path, "query_edges.bin"))


def load_request(path: str, num_base: int) -> tuple[ServingRequest, int]:
    header = {}
    with open(os.path.join(path, "header")) as f:
        for line in f:
            line = line.strip()
            if line:
                key, val = line.split("=", 1)
                header[key] = int(val)
    feats = np.fromfile(os.path.join(path, "query_features.bin"), dtype="<f4")
    feats = feats.reshape(header["B"], header["F"])
    edges = np.fromfile(os.path.join(path, "query_edges.bin"), dtype="<u8").astype(np.int64)
    request = ServingRequest(
        num_base=num_base,
        num_queries=header["B"],
        query_features=feats,
        edges=edges.reshape(-1, 2),
    )
    return request, header["k"]
