"""Immutable graph dataset, its partitioning, and the stored-embedding cache.

The dataset keeps in-edges in CSR form (offsets indexed by destination,
neighbor array holding source ids sorted ascending per destination) plus a
row-major float32 feature matrix and train/test masks.  Partitioning is
random-hash: ``owner(v) = splitmix64(v XOR splitmix64(seed)) mod P``.  Each
partition stores the feature rows and per-layer embedding rows of its owned
nodes together with a *source-split* edge store: every edge lives at the
partition owning its source node, grouped by destination, which is what
lets a partition aggregate locally during distributed execution.

Everything here is immutable after construction; concurrent reads are safe.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _SPLITMIX_GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def node_hash64(ids: np.ndarray, seed: int) -> np.ndarray:
    """Stateless 64-bit hash of (node id, seed); fixed for reproducibility."""
    ids = np.asarray(ids, dtype=np.uint64)
    seed_mix = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return _splitmix64(ids ^ seed_mix)


@dataclass
class GraphDataset:
    """Whole-graph view: in-CSR adjacency, features, and split masks."""

    num_nodes: int
    in_offsets: np.ndarray   # int64, len num_nodes + 1
    in_neighbors: np.ndarray  # int64, source ids grouped by destination
    features: np.ndarray      # float32, num_nodes x F
    train_mask: np.ndarray    # bool
    test_mask: np.ndarray     # bool

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return int(self.in_neighbors.shape[0])

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.in_offsets)

    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.in_neighbors, minlength=self.num_nodes).astype(np.int64)

    def in_neighbors_of(self, v: int) -> np.ndarray:
        return self.in_neighbors[self.in_offsets[v]:self.in_offsets[v + 1]]


def build_csr(edges, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Group (src, dst) edges by destination; sources ascending per destination.

    Duplicate edges are kept (multigraphs are permitted); ids must be in
    range.  Returns (offsets, neighbors).
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= num_nodes:
            raise ValueError("edge endpoint out of range")
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        src = edges[order, 0]
        dst = edges[order, 1]
    else:
        src = np.empty(0, dtype=np.int64)
        dst = np.empty(0, dtype=np.int64)
    counts = np.bincount(dst, minlength=num_nodes)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, src


def make_dataset(
    edges,
    num_nodes: int,
    features: np.ndarray,
    train_mask: np.ndarray | None = None,
    test_mask: np.ndarray | None = None,
) -> GraphDataset:
    offsets, neighbors = build_csr(edges, num_nodes)
    features = np.asarray(features, dtype=np.float32)
    if features.shape[0] != num_nodes:
        raise ValueError("feature row count must equal num_nodes")
    if train_mask is None:
        train_mask = np.ones(num_nodes, dtype=bool)
    if test_mask is None:
        test_mask = np.zeros(num_nodes, dtype=bool)
    return GraphDataset(
        num_nodes=num_nodes,
        in_offsets=offsets,
        in_neighbors=neighbors,
        features=features,
        train_mask=np.asarray(train_mask, dtype=bool),
        test_mask=np.asarray(test_mask, dtype=bool),
    )


def export_edges(dataset: GraphDataset) -> np.ndarray:
    """Edge list (src, dst) reconstructed from the CSR, in CSR order."""
    dst = np.repeat(np.arange(dataset.num_nodes, dtype=np.int64), dataset.in_degrees())
    return np.stack([dataset.in_neighbors, dst], axis=1)


class PeStore:
    """Per-layer embedding rows for layers 1..k-1.

    ``node_ids is None`` means rows are indexed directly by node id (the
    whole-graph store); otherwise rows follow ``node_ids`` and lookups go
    through an id -> row map (a partition-local store).
    """

    def __init__(
        self,
        layers: list[np.ndarray],
        node_ids: np.ndarray | None = None,
        num_nodes: int | None = None,
    ):
        self.layers = [np.asarray(m, dtype=np.float32) for m in layers]
        self.node_ids = None if node_ids is None else np.asarray(node_ids, dtype=np.int64)
        if self.node_ids is not None:
            if num_nodes is None:
                raise ValueError("num_nodes required for a restricted store")
            pos = np.full(num_nodes, -1, dtype=np.int64)
            pos[self.node_ids] = np.arange(len(self.node_ids))
            self._pos = pos
        else:
            self._pos = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def dim(self, layer: int) -> int:
        return self.layers[layer - 1].shape[1]

    def rows(self, layer: int, ids: np.ndarray) -> np.ndarray:
        if layer < 1 or layer > self.num_layers:
            raise ValueError(f"no stored embeddings for layer {layer}")
        ids = np.asarray(ids, dtype=np.int64)
        if self._pos is None:
            return self.layers[layer - 1][ids]
        rows = self._pos[ids]
        if rows.size and rows.min() < 0:
            missing = ids[rows < 0]
            raise KeyError(f"embedding rows not stored locally: {missing[:5].tolist()}")
        return self.layers[layer - 1][rows]

    def row(self, layer: int, node: int) -> np.ndarray:
        return self.rows(layer, np.asarray([node]))[0]

    def restrict(self, node_ids: np.ndarray, num_nodes: int) -> "PeStore":
        node_ids = np.asarray(node_ids, dtype=np.int64)
        return PeStore([m[node_ids] for m in self.layers], node_ids=node_ids, num_nodes=num_nodes)


@dataclass
class PartitionMap:
    num_partitions: int
    owner: np.ndarray  # int64, partition index per node

    def owner_of(self, ids: np.ndarray) -> np.ndarray:
        return self.owner[np.asarray(ids, dtype=np.int64)]


@dataclass
class LocalPartition:
    """One partition's slice: owned rows plus the source-split edge store."""

    index: int
    num_partitions: int
    num_nodes: int
    owned_ids: np.ndarray          # ascending global ids
    features: np.ndarray           # rows follow owned_ids
    edge_offsets: np.ndarray       # CSR over all destinations, local-source edges
    edge_srcs: np.ndarray          # global source ids, ascending per destination
    train_in_degrees: np.ndarray   # whole-graph in-degree array (shared)
    owner: np.ndarray              # whole-graph owner array (shared)
    pe: PeStore | None = None
    _owned_pos: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._owned_pos is None:
            pos = np.full(self.num_nodes, -1, dtype=np.int64)
            pos[self.owned_ids] = np.arange(len(self.owned_ids))
            self._owned_pos = pos

    def owns(self, ids: np.ndarray) -> np.ndarray:
        return self._owned_pos[np.asarray(ids, dtype=np.int64)] >= 0

    def local_in_sources(self, dst: int) -> np.ndarray:
        """Sources of in-edges of ``dst`` whose owner is this partition."""
        return self.edge_srcs[self.edge_offsets[dst]:self.edge_offsets[dst + 1]]

    def feature_rows(self, ids: np.ndarray) -> np.ndarray:
        rows = self._owned_pos[np.asarray(ids, dtype=np.int64)]
        if rows.size and rows.min() < 0:
            raise KeyError("feature row not owned by this partition")
        return self.features[rows]


def partition_random_hash(
    dataset: GraphDataset, num_partitions: int, seed: int
) -> tuple[PartitionMap, list[LocalPartition]]:
    """Split the dataset into P partitions by hashing node ids.

    Each partition receives its owned nodes' feature rows and every edge
    whose *source* it owns, grouped by destination so local aggregation can
    enumerate a destination's locally-resident in-neighbors directly.
    """
    if num_partitions < 1:
        raise ValueError("num_partitions must be >= 1")
    owner = (node_hash64(np.arange(dataset.num_nodes), seed) % np.uint64(num_partitions)).astype(np.int64)
    pmap = PartitionMap(num_partitions=num_partitions, owner=owner)

    src = dataset.in_neighbors
    dst = np.repeat(np.arange(dataset.num_nodes, dtype=np.int64), dataset.in_degrees())
    edge_owner = owner[src]
    in_deg = dataset.in_degrees()

    parts = []
    for p in range(num_partitions):
        owned = np.flatnonzero(owner == p).astype(np.int64)
        mask = edge_owner == p
        p_src = src[mask]
        p_dst = dst[mask]
        order = np.lexsort((p_src, p_dst))
        p_src = p_src[order]
        p_dst = p_dst[order]
        counts = np.bincount(p_dst, minlength=dataset.num_nodes)
        offsets = np.zeros(dataset.num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        parts.append(
            LocalPartition(
                index=p,
                num_partitions=num_partitions,
                num_nodes=dataset.num_nodes,
                owned_ids=owned,
                features=dataset.features[owned],
                edge_offsets=offsets,
                edge_srcs=p_src,
                train_in_degrees=in_deg,
                owner=owner,
            )
        )
    return pmap, parts


def scatter_pe(pe: PeStore, parts: list[LocalPartition]) -> None:
    """Attach each partition's owned slice of a whole-graph embedding store."""
    for part in parts:
        part.pe = pe.restrict(part.owned_ids, part.num_nodes)


@dataclass
class FeatureCache:
    """Read-only cache of the highest out-degree nodes' feature rows."""

    capacity_bytes: int
    node_ids: np.ndarray  # cached ids (the top-out-degree set)
    rows: np.ndarray
    _pos: np.ndarray = field(default=None, repr=False)

    def lookup(self, node: int) -> np.ndarray | None:
        r = self._pos[node]
        return None if r < 0 else self.rows[r]

    def contains(self, ids: np.ndarray) -> np.ndarray:
        return self._pos[np.asarray(ids, dtype=np.int64)] >= 0


def build_feature_cache(dataset: GraphDataset, capacity_bytes: int) -> FeatureCache:
    """Cache feature rows for nodes ranked by out-degree (ties: ascending id)."""
    if capacity_bytes < 0:
        raise ValueError("capacity must be >= 0")
    row_bytes = dataset.feature_dim * dataset.features.dtype.itemsize
    n_rows = min(dataset.num_nodes, capacity_bytes // row_bytes) if row_bytes else dataset.num_nodes
    out_deg = dataset.out_degrees()
    order = np.lexsort((np.arange(dataset.num_nodes), -out_deg))
    chosen = np.sort(order[:n_rows]).astype(np.int64)
    pos = np.full(dataset.num_nodes, -1, dtype=np.int64)
    pos[chosen] = np.arange(len(chosen))
    return FeatureCache(
        capacity_bytes=capacity_bytes,
        node_ids=chosen,
        rows=dataset.features[chosen],
        _pos=pos,
    )


def build_partition_feature_cache(
    dataset: GraphDataset, owned_ids: np.ndarray, capacity_bytes: int
) -> FeatureCache:
    """Per-partition cache: the partition's own top out-degree nodes."""
    if capacity_bytes < 0:
        raise ValueError("capacity must be >= 0")
    owned_ids = np.asarray(owned_ids, dtype=np.int64)
    row_bytes = dataset.feature_dim * dataset.features.dtype.itemsize
    n_rows = min(len(owned_ids), capacity_bytes // row_bytes) if row_bytes else len(owned_ids)
    deg = dataset.out_degrees()[owned_ids]
    order = np.lexsort((owned_ids, -deg))
    chosen = np.sort(owned_ids[order[:n_rows]])
    pos = np.full(dataset.num_nodes, -1, dtype=np.int64)
    pos[chosen] = np.arange(len(chosen))
    return FeatureCache(
        capacity_bytes=capacity_bytes,
        node_ids=chosen,
        rows=dataset.features[chosen],
        _pos=pos,
    )


def precompute_embeddings(dataset: GraphDataset, model, weights) -> PeStore:
    """Snapshot layer embeddings 1..k-1 by full message passing over the graph.

    Layer l's rows equal the centralized forward pass for every node, so a
    stored row can stand in for recomputing that node at serving time.
    """
    from . import models  # local import: graphstore is imported by models' callers

    if model.k < 2:
        raise ValueError("stored embeddings need a model with k >= 2 layers")
    n = dataset.num_nodes
    in_deg = dataset.in_degrees()
    block = _full_graph_block(dataset, in_deg)
    h = dataset.features
    layers = []
    for l in range(1, model.k):
        h = models.layer_forward(model.layers[l - 1], block, h, h, weights.layers[l - 1])
        layers.append(h)
    return PeStore(layers)


def _full_graph_block(dataset: GraphDataset, in_deg: np.ndarray):
    from .compgraph import ComputationBlock, BIND_COMPUTED

    n = dataset.num_nodes
    ids = np.arange(n, dtype=np.int64)
    return ComputationBlock(
        src_ids=ids,
        dst_ids=ids,
        edge_src=dataset.in_neighbors,
        edge_dst=np.repeat(ids, in_deg),
        bind_kind=np.full(n, BIND_COMPUTED, dtype=np.uint8),
        bind_pe_layer=np.zeros(n, dtype=np.int32),
        src_degree=in_deg.astype(np.int64),
        dst_self_src=ids,
    )


# ---------------------------------------------------------------------------
# On-disk dataset directory format
# ---------------------------------------------------------------------------
# meta                key=value lines: num_nodes, num_edges, feature_dim,
#                     num_layers_pe, hidden_dims (comma list, layers 1..k-1)
# offsets.bin         little-endian u64
# neighbors.bin       little-endian u64
# features.bin        row-major little-endian f32
# train_mask.bin      one byte per node
# test_mask.bin       one byte per node
# pe_l{l}.bin         row-major little-endian f32, one file per stored layer


def save_dataset(dataset: GraphDataset, path: str, pe: PeStore | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    hidden = [] if pe is None else [pe.dim(l) for l in range(1, pe.num_layers + 1)]
    meta = {
        "num_nodes": dataset.num_nodes,
        "num_edges": dataset.num_edges,
        "feature_dim": dataset.feature_dim,
        "num_layers_pe": 0 if pe is None else pe.num_layers,
        "hidden_dims": ",".join(str(h) for h in hidden),
    }
    with open(os.path.join(path, "meta"), "w") as f:
        for k, v in meta.items():
            f.write(f"{k}={v}\n")
    dataset.in_offsets.astype("<u8").tofile(os.path.join(path, "offsets.bin"))
    dataset.in_neighbors.astype("<u8").tofile(os.path.join(path, "neighbors.bin"))
    dataset.features.astype("<f4").tofile(os.path.join(path, "features.bin"))
    dataset.train_mask.astype(np.uint8).tofile(os.path.join(path, "train_mask.bin"))
    dataset.test_mask.astype(np.uint8).tofile(os.path.join(path, "test_mask.bin"))
    if pe is not None:
        if pe.node_ids is not None:
            raise ValueError("only whole-graph stores are saved to dataset dirs")
        for l in range(1, pe.num_layers + 1):
            pe.layers[l - 1].astype("<f4").tofile(os.path.join(path, f"pe_l{l}.bin"))


def read_meta(path: str) -> dict:
    meta = {}
    with open(os.path.join(path, "meta")) as f:
        for line in f:
            line = line.strip()
            if line:
                k, v = line.split("=", 1)
                meta[k] = v
    return meta


def load_dataset(path: str) -> tuple[GraphDataset, PeStore | None]:
    meta = read_meta(path)
    n = int(meta["num_nodes"])
    m = int(meta["num_edges"])
    fdim = int(meta["feature_dim"])
    offsets = np.fromfile(os.path.join(path, "offsets.bin"), dtype="<u8").astype(np.int64)
    neighbors = np.fromfile(os.path.join(path, "neighbors.bin"), dtype="<u8").astype(np.int64)
    if offsets.shape[0] != n + 1 or neighbors.shape[0] != m:
        raise ValueError("dataset files inconsistent with meta")
    features = np.fromfile(os.path.join(path, "features.bin"), dtype="<f4").reshape(n, fdim)
    train_mask = np.fromfile(os.path.join(path, "train_mask.bin"), dtype=np.uint8).astype(bool)
    test_mask = np.fromfile(os.path.join(path, "test_mask.bin"), dtype=np.uint8).astype(bool)
    dataset = GraphDataset(
        num_nodes=n,
        in_offsets=offsets,
        in_neighbors=neighbors,
        features=features,
        train_mask=train_mask,
        test_mask=test_mask,
    )
    num_pe = int(meta.get("num_layers_pe", "0"))
    pe = None
    if num_pe:
        dims = [int(x) for x in meta["hidden_dims"].split(",") if x]
        layers = [
            np.fromfile(os.path.join(path, f"pe_l{l}.bin"), dtype="<f4").reshape(n, dims[l - 1])
            for l in range(1, num_pe + 1)
        ]
        pe = PeStore(layers)
    return dataset, pe
