"""GNN layer definitions and centralized forward execution.

Each layer is (message, aggregate, update) applied per destination over a
block's in-edges.  Supported aggregation kinds and their semantics:

* gcn         h'_v = relu(W . sum_u h_u / sqrt((|N(v)|+1)(|N(u)|+1)))
* sage_mean   h'_v = relu(W_self h_v + W_neigh mean_u h_u)
* sage_max    h'_v = relu(W_self h_v + W_neigh max_u h_u)
* power_mean  h'_v = relu(W_self h_v + W (mean_u softplus(h_u)^p)^(1/p))
* moments     h'_v = relu(W_self h_v + W (mean_u (h_u - mean)^n)^(1/n)),
              odd n takes the signed root
* gat         alpha_uv = softmax_u(leaky_relu(a_src.(W h_u) + a_dst.(W h_v))),
              h'_v = relu(sum_u alpha_uv W h_u), single head

Empty neighborhoods aggregate to the zero vector.  Degree smoothing (+1 in
the gcn normalizer) keeps query and isolated nodes away from divide-by-zero.
Aggregation accumulates in float64; layer outputs are stored as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .densemath import init_uniform, leaky_relu, relu, signed_root, softplus

GCN = "gcn"
SAGE_MEAN = "sage_mean"
SAGE_MAX = "sage_max"
GAT = "gat"
POWER_MEAN = "power_mean"
MOMENTS = "moments"

KIND_TAGS = {GCN: 0, SAGE_MEAN: 1, GAT: 2, POWER_MEAN: 3, MOMENTS: 4, SAGE_MAX: 5}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

# merge function used when the aggregation is split across partitions
MERGE_OF_KIND = {
    GCN: "sum",
    SAGE_MEAN: "mean",
    SAGE_MAX: "max",
    POWER_MEAN: "powmean",
    MOMENTS: "moments",
    GAT: "softmax",
}


@dataclass
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    p: float = 0.0   # power_mean exponent
    n: int = 0       # moments order
    num_heads: int = 1

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == POWER_MEAN and self.p == 0.0:
            raise ValueError("power_mean needs p != 0")
        if self.kind == MOMENTS and self.n < 2:
            raise ValueError("moments needs n >= 2")
        if self.num_heads != 1:
            raise ValueError("only single-head attention is supported")

    @property
    def merge_kind(self) -> str:
        return MERGE_OF_KIND[self.kind]


@dataclass
class ModelSpec:
    layers: list[LayerSpec]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError("adjacent layer dimensions do not chain")

    @property
    def k(self) -> int:
        return len(self.layers)


def make_model(kind: str, k: int, in_dim: int, hidden: int, p: float = 2.0, n: int = 2) -> ModelSpec:
    """Uniform-width model of one aggregation kind."""
    layers = []
    for l in range(k):
        layers.append(
            LayerSpec(
                kind=kind,
                in_dim=in_dim if l == 0 else hidden,
                out_dim=hidden,
                p=p if kind == POWER_MEAN else 0.0,
                n=n if kind == MOMENTS else 0,
            )
        )
    return ModelSpec(layers)


@dataclass
class Weights:
    layers: list[dict[str, np.ndarray]] = field(default_factory=list)


def weight_matrix_names(kind: str) -> list[str]:
    if kind == GCN:
        return ["w"]
    if kind in (SAGE_MEAN, SAGE_MAX):
        return ["w_self", "w_neigh"]
    if kind == GAT:
        return ["w", "a_src", "a_dst"]
    return ["w_self", "w"]  # power_mean, moments


def init_weights(model: ModelSpec, seed: int) -> Weights:
    """uniform(-1/sqrt(in_dim), +1/sqrt(in_dim)) per matrix, fixed order."""
    rng = np.random.default_rng(seed)
    out = Weights()
    for spec in model.layers:
        mats: dict[str, np.ndarray] = {}
        for name in weight_matrix_names(spec.kind):
            if name in ("a_src", "a_dst"):
                mats[name] = init_uniform(rng, spec.out_dim)
            else:
                mats[name] = init_uniform(rng, spec.in_dim, spec.out_dim)
        out.layers.append(mats)
    return out


def _seg_sum(values: np.ndarray, edst: np.ndarray, num_dst: int) -> np.ndarray:
    out = np.zeros((num_dst, values.shape[1]), dtype=np.float64)
    np.add.at(out, edst, values)
    return out


def _safe_mean(sums: np.ndarray, counts: np.ndarray) -> np.ndarray:
    out = np.zeros_like(sums)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out


def layer_forward(
    layer: LayerSpec,
    block,
    src_inputs: np.ndarray,
    dst_prev: np.ndarray,
    weights: dict[str, np.ndarray],
) -> np.ndarray:
    """Run one layer over a block; returns float32 rows for the destinations."""
    if src_inputs.shape[0] != block.num_src:
        raise ValueError("src_inputs rows must match block source count")
    if dst_prev.shape[0] != block.num_dst:
        raise ValueError("dst_prev rows must match block destination count")
    if src_inputs.shape[1] != layer.in_dim:
        raise ValueError("input width does not match layer in_dim")
    x = np.asarray(src_inputs, dtype=np.float64)
    hv = np.asarray(dst_prev, dtype=np.float64)
    esrc, edst = block.edge_src, block.edge_dst
    nd = block.num_dst
    counts = np.bincount(edst, minlength=nd).astype(np.int64)
    agg = _aggregate(layer, x, hv, esrc, edst, nd, counts, weights, block.src_degree)
    return apply_update(layer, hv, agg, counts, weights)


def _aggregate(layer, x, hv, esrc, edst, nd, counts, weights, src_degree) -> np.ndarray:
    kind = layer.kind
    if kind == GCN:
        msg = x / np.sqrt(src_degree.astype(np.float64) + 1.0)[:, None]
        return _seg_sum(msg[esrc], edst, nd)
    if kind == SAGE_MEAN:
        return _safe_mean(_seg_sum(x[esrc], edst, nd), counts)
    if kind == SAGE_MAX:
        mx = np.full((nd, x.shape[1]), -np.inf)
        np.maximum.at(mx, edst, x[esrc])
        mx[counts == 0] = 0.0
        return mx
    if kind == POWER_MEAN:
        powered = softplus(x) ** layer.p
        mean = _safe_mean(_seg_sum(powered[esrc], edst, nd), counts)
        agg = np.zeros_like(mean)
        nz = counts > 0
        agg[nz] = mean[nz] ** (1.0 / layer.p)
        return agg
    if kind == MOMENTS:
        mean = _safe_mean(_seg_sum(x[esrc], edst, nd), counts)
        centered = (x[esrc] - mean[edst]) ** layer.n
        cmom = _safe_mean(_seg_sum(centered, edst, nd), counts)
        return signed_root(cmom, layer.n)
    if kind == GAT:
        z = x @ weights["w"].astype(np.float64)
        s_src = z @ weights["a_src"].astype(np.float64)
        s_dst = (hv @ weights["w"].astype(np.float64)) @ weights["a_dst"].astype(np.float64)
        logit = leaky_relu(s_src[esrc] + s_dst[edst])
        mx = np.full(nd, -np.inf)
        np.maximum.at(mx, edst, logit)
        e = np.exp(logit - mx[edst])
        den = np.zeros(nd)
        np.add.at(den, edst, e)
        num = _seg_sum(e[:, None] * z[esrc], edst, nd)
        agg = np.zeros_like(num)
        nz = den > 0
        agg[nz] = num[nz] / den[nz, None]
        return agg
    raise ValueError(f"unknown layer kind {kind!r}")


def apply_update(layer, hv, agg, counts, weights) -> np.ndarray:
    """Update step shared by centralized and distributed execution."""
    kind = layer.kind
    if kind == GCN:
        agg = agg / np.sqrt(counts.astype(np.float64) + 1.0)[:, None]
        out = relu(agg @ weights["w"].astype(np.float64))
    elif kind in (SAGE_MEAN, SAGE_MAX):
        out = relu(hv @ weights["w_self"].astype(np.float64) + agg @ weights["w_neigh"].astype(np.float64))
    elif kind in (POWER_MEAN, MOMENTS):
        out = relu(hv @ weights["w_self"].astype(np.float64) + agg @ weights["w"].astype(np.float64))
    elif kind == GAT:
        out = relu(agg)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return out.astype(np.float32)


def resolve_block_inputs(
    block,
    num_base: int,
    features: np.ndarray,
    query_features: np.ndarray,
    pe_store,
    prev_out: np.ndarray | None,
    prev_ids: np.ndarray | None,
    in_dim: int,
) -> np.ndarray:
    """Materialize each source row from its binding."""
    from .compgraph import BIND_COMPUTED, BIND_FEATURE, BIND_PE

    X = np.empty((block.num_src, in_dim), dtype=np.float32)
    kinds = block.bind_kind
    ids = block.src_ids
    feat = kinds == BIND_FEATURE
    ft = feat & (ids < num_base)
    fq = feat & (ids >= num_base)
    if ft.any():
        X[ft] = features[ids[ft]]
    if fq.any():
        X[fq] = query_features[ids[fq] - num_base]
    pe_mask = kinds == BIND_PE
    if pe_mask.any():
        if pe_store is None:
            raise ValueError("block binds stored embeddings but no store given")
        for layer in np.unique(block.bind_pe_layer[pe_mask]):
            sel = pe_mask & (block.bind_pe_layer == layer)
            X[sel] = pe_store.rows(int(layer), ids[sel])
    comp = kinds == BIND_COMPUTED
    if comp.any():
        if prev_out is None:
            raise ValueError("block binds computed rows but no previous output")
        pos = {int(g): i for i, g in enumerate(prev_ids)}
        X[comp] = prev_out[[pos[int(g)] for g in ids[comp]]]
    return X


def forward_all_blocks(model, graph, weights, features, query_features, pe_store=None) -> list[np.ndarray]:
    """Chain layer_forward over every block; returns each block's output rows."""
    if graph.k != model.k:
        raise ValueError(f"graph depth {graph.k} != model depth {model.k}")
    prev_out: np.ndarray | None = None
    prev_ids: np.ndarray | None = None
    outs = []
    for l in range(1, model.k + 1):
        block = graph.blocks[l - 1]
        spec = model.layers[l - 1]
        X = resolve_block_inputs(
            block, graph.num_base, features, query_features, pe_store, prev_out, prev_ids, spec.in_dim
        )
        if block.dst_self_src is None:
            raise ValueError("centralized execution needs self rows in the block")
        dst_prev = X[block.dst_self_src]
        out = layer_forward(spec, block, X, dst_prev, weights.layers[l - 1])
        outs.append(out)
        prev_out, prev_ids = out, block.dst_ids
    return outs


def forward_full(model, graph, weights, features, query_features, pe_store=None) -> np.ndarray:
    """Final embeddings for the graph's query nodes, in query-id order."""
    outs = forward_all_blocks(model, graph, weights, features, query_features, pe_store)
    last = graph.blocks[-1]
    out = outs[-1]
    if not np.array_equal(last.dst_ids, graph.query_ids):
        pos = {int(g): i for i, g in enumerate(last.dst_ids)}
        out = out[[pos[int(q)] for q in graph.query_ids]]
    return out


# ---------------------------------------------------------------------------
# weights.bin: u32 layer count; per layer u32 kind tag, u32 in_dim,
# u32 out_dim, f32 param (p or n); then row-major f32 matrices in
# declaration order (see weight_matrix_names). All little-endian.
# ---------------------------------------------------------------------------


def save_weights(model: ModelSpec, weights: Weights, path: str) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", model.k))
        for spec in model.layers:
            param = spec.p if spec.kind == POWER_MEAN else float(spec.n)
            f.write(struct.pack("<IIIf", KIND_TAGS[spec.kind], spec.in_dim, spec.out_dim, param))
        for spec, mats in zip(model.layers, weights.layers):
            for name in weight_matrix_names(spec.kind):
                f.write(mats[name].astype("<f4").tobytes())


def load_weights(path: str) -> tuple[ModelSpec, Weights]:
    with open(path, "rb") as f:
        (k,) = struct.unpack("<I", f.read(4))
        specs = []
        for _ in range(k):
            tag, in_dim, out_dim, param = struct.unpack("<IIIf", f.read(16))
            kind = _TAG_KINDS[tag]
            specs.append(
                LayerSpec(
                    kind=kind,
                    in_dim=in_dim,
                    out_dim=out_dim,
                    p=param if kind == POWER_MEAN else 0.0,
                    n=int(param) if kind == MOMENTS else 0,
                )
            )
        model = ModelSpec(specs)
        weights = Weights()
        for spec in specs:
            mats = {}
            for name in weight_matrix_names(spec.kind):
                if name in ("a_src", "a_dst"):
                    count = spec.out_dim
                    shape: tuple[int, ...] = (spec.out_dim,)
                else:
                    count = spec.in_dim * spec.out_dim
                    shape = (spec.in_dim, spec.out_dim)
                buf = f.read(4 * count)
                mats[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            weights.layers.append(mats)
    return model, weights
