"""Distributed layer execution over partitioned computation graphs.

Each rank aggregates its local shard's messages per destination, ships one
partial aggregate per destination to the destination's owner through an
all-to-all, and the owner merges the partials and applies the update.  The
merge is kind-specific:

* sum / mean  --  add vector sums (mean divides by the global count)
* max         --  elementwise maximum of non-empty partials
* powmean     --  add pow(p) sums, divide by global count, take pow(1/p)
* moments     --  two phases: merge means, broadcast them back with an
                  all-gather, then merge central-moment sums
* softmax     --  (max logit, exp sum, weighted sum) triples combined with
                  the stable log-sum-exp rescaling; attention additionally
                  all-gathers destination embeddings first so logits can be
                  formed locally

Destination ownership: query nodes belong to their round-robin request
partition, recomputation targets to the partition that owns them, so every
owner has the self-input rows its updates need.  Partials merge in
ascending rank order; outputs match centralized execution to float
tolerance, not bitwise.

Wire format per partial: destination id (u64), kind tag (u8), count (u64),
payload as little-endian f64 — used verbatim by the stream transport.
Payloads stay 64-bit end to end because odd-order moment merges take an
n-th root near zero, which amplifies payload rounding beyond the promised
1e-5 agreement with centralized execution if partial sums are narrowed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .compgraph import BIND_COMPUTED, BIND_FEATURE, BIND_PE, ComputationGraph, query_owner
from .densemath import leaky_relu, softplus
from .models import GAT, GCN, MOMENTS, POWER_MEAN, SAGE_MAX, SAGE_MEAN, apply_update

TAG_SUM = 0
TAG_MEAN = 1
TAG_MAX = 2
TAG_POWMEAN = 3
TAG_MOMENTS_P1 = 4
TAG_MOMENTS_P2 = 5
TAG_SOFTMAX = 6

_KIND_TAG = {"sum": TAG_SUM, "mean": TAG_MEAN, "max": TAG_MAX, "powmean": TAG_POWMEAN, "softmax": TAG_SOFTMAX}
_REC = struct.Struct("<QBQ")


def record_bytes(width: int) -> int:
    """Wire size of one partial with a payload of ``width`` floats."""
    return _REC.size + 8 * width


@dataclass
class PartialAggregate:
    dst_id: int
    kind: int
    count: int
    payload: np.ndarray  # float64


def _record_dtype(width: int) -> np.dtype:
    # packed little-endian layout identical to struct "<QBQ" + width f64
    return np.dtype([("dst", "<u8"), ("kind", "u1"), ("count", "<u8"), ("payload", "<f8", (width,))])


def encode_partials(dst_ids, kind: int, counts, payload: np.ndarray) -> bytes:
    payload = np.asarray(payload)
    arr = np.empty(len(dst_ids), dtype=_record_dtype(payload.shape[1]))
    arr["dst"] = np.asarray(dst_ids, dtype=np.uint64)
    arr["kind"] = kind
    arr["count"] = np.asarray(counts, dtype=np.uint64)
    arr["payload"] = payload
    return arr.tobytes()


def decode_partials(buf: bytes, width: int) -> tuple[np.ndarray, int, np.ndarray, np.ndarray]:
    rec = record_bytes(width)
    if len(buf) % rec:
        raise ValueError("truncated partial-aggregate buffer")
    arr = np.frombuffer(buf, dtype=_record_dtype(width))
    kinds = arr["kind"]
    if len(kinds) and np.any(kinds != kinds[0]):
        raise ValueError("mixed partial kinds in one buffer")
    kind = int(kinds[0]) if len(kinds) else -1
    return (
        arr["dst"].astype(np.int64),
        kind,
        arr["count"].astype(np.int64),
        arr["payload"].astype(np.float64).reshape(len(arr), width),
    )


# ---------------------------------------------------------------------------
# Local aggregation
# ---------------------------------------------------------------------------


def _payload_width(layer) -> int:
    if layer.kind == GAT:
        return 2 + layer.out_dim
    return layer.in_dim


def _local_payloads(
    layer,
    block,
    x: np.ndarray,
    weights,
    dst_prev_table: np.ndarray | None = None,
    means_table: np.ndarray | None = None,
    phase: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-destination (count, payload) over the local shard block (float64)."""
    nd = block.num_dst
    esrc, edst = block.edge_src, block.edge_dst
    counts = np.bincount(edst, minlength=nd).astype(np.int64)
    kind = layer.kind
    if kind == GCN:
        msg = x / np.sqrt(block.src_degree.astype(np.float64) + 1.0)[:, None]
        pay = np.zeros((nd, x.shape[1]))
        np.add.at(pay, edst, msg[esrc])
    elif kind in (SAGE_MEAN,) or (kind == MOMENTS and phase == 1):
        pay = np.zeros((nd, x.shape[1]))
        np.add.at(pay, edst, x[esrc])
    elif kind == SAGE_MAX:
        pay = np.full((nd, x.shape[1]), -np.inf)
        np.maximum.at(pay, edst, x[esrc])
    elif kind == POWER_MEAN:
        powered = softplus(x) ** layer.p
        pay = np.zeros((nd, x.shape[1]))
        np.add.at(pay, edst, powered[esrc])
    elif kind == MOMENTS:
        if means_table is None:
            raise ValueError("central-moment pass needs the merged means")
        centered = (x[esrc] - means_table[edst]) ** layer.n
        pay = np.zeros((nd, x.shape[1]))
        np.add.at(pay, edst, centered)
    elif kind == GAT:
        if dst_prev_table is None:
            raise ValueError("attention needs gathered destination embeddings")
        w = weights["w"].astype(np.float64)
        z = x @ w
        s_src = z @ weights["a_src"].astype(np.float64)
        s_dst = (dst_prev_table.astype(np.float64) @ w) @ weights["a_dst"].astype(np.float64)
        logit = leaky_relu(s_src[esrc] + s_dst[edst])
        mx = np.full(nd, -np.inf)
        np.maximum.at(mx, edst, logit)
        safe_mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.exp(logit - safe_mx[edst])
        den = np.zeros(nd)
        np.add.at(den, edst, e)
        num = np.zeros((nd, layer.out_dim))
        np.add.at(num, edst, e[:, None] * z[esrc])
        pay = np.concatenate([mx[:, None], den[:, None], num], axis=1)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return counts, pay


def local_aggregate(block, src_inputs: np.ndarray, layer, weights) -> list[PartialAggregate]:
    """One partial per block destination (identity payload when no local edges)."""
    x = np.asarray(src_inputs, dtype=np.float64)
    if layer.kind == MOMENTS:
        counts, pay = _local_payloads(layer, block, x, weights, phase=1)
        tag = TAG_MOMENTS_P1
    else:
        if layer.kind == GAT:
            raise ValueError("attention partials require execute_layer's gathered embeddings")
        counts, pay = _local_payloads(layer, block, x, weights)
        tag = _KIND_TAG[layer.merge_kind]
    return [
        PartialAggregate(int(block.dst_ids[i]), tag, int(counts[i]), pay[i])
        for i in range(block.num_dst)
    ]


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def _merge_arrays(kind: str, payloads: np.ndarray, counts: np.ndarray, p: float = 0.0, n: int = 0):
    """Merge stacked per-rank arrays; payloads [R, nd, w], counts [R, nd].

    Rank order is ascending by construction.  Returns (aggregate [nd, dim],
    total counts [nd]); empty destinations aggregate to the zero vector.
    """
    total = counts.sum(axis=0)
    if kind == "sum":
        return payloads.sum(axis=0), total
    if kind == "mean" or kind == "moments_p1":
        sums = payloads.sum(axis=0)
        out = np.zeros_like(sums)
        nz = total > 0
        out[nz] = sums[nz] / total[nz, None]
        return out, total
    if kind == "max":
        masked = np.where((counts > 0)[:, :, None], payloads, -np.inf)
        mx = masked.max(axis=0)
        mx[total == 0] = 0.0
        return mx, total
    if kind == "powmean":
        if p == 0.0:
            raise ValueError("power mean needs p != 0")
        sums = payloads.sum(axis=0)
        out = np.zeros_like(sums)
        nz = total > 0
        out[nz] = (sums[nz] / total[nz, None]) ** (1.0 / p)
        return out, total
    if kind == "moments_p2":
        from .densemath import signed_root

        sums = payloads.sum(axis=0)
        out = np.zeros_like(sums)
        nz = total > 0
        out[nz] = sums[nz] / total[nz, None]
        return signed_root(out, n), total
    if kind == "softmax":
        mx = payloads[:, :, 0]
        es = payloads[:, :, 1]
        ws = payloads[:, :, 2:]
        live = es > 0.0
        mx_live = np.where(live, mx, -np.inf)
        m_star = mx_live.max(axis=0)
        safe_star = np.where(np.isfinite(m_star), m_star, 0.0)
        scale = np.where(live, np.exp(np.where(live, mx, 0.0) - safe_star[None, :]), 0.0)
        den = (es * scale).sum(axis=0)
        num = (ws * scale[:, :, None]).sum(axis=0)
        out = np.zeros_like(num)
        nz = den > 0
        out[nz] = num[nz] / den[nz, None]
        return out, total
    raise ValueError(f"unknown merge kind {kind!r}")


def merge(per_dst_partials: list[list[PartialAggregate]], kind: str, p: float = 0.0, n: int = 0) -> list[np.ndarray]:
    """Merge per-destination partial lists into global aggregate vectors."""
    out = []
    for parts in per_dst_partials:
        if not parts:
            raise ValueError("need at least one partial per destination")
        payloads = np.stack([np.asarray(q.payload, dtype=np.float64) for q in parts])[:, None, :]
        counts = np.array([[q.count] for q in parts], dtype=np.int64).reshape(len(parts), 1)
        agg, _ = _merge_arrays(kind, payloads, counts, p=p, n=n)
        out.append(agg[0])
    return out


# ---------------------------------------------------------------------------
# Distributed layer execution
# ---------------------------------------------------------------------------


@dataclass
class LayerPlan:
    block: object             # this rank's shard block (dst_ids = layer's global list)
    dst_owner: np.ndarray     # owning rank per destination (identical on all ranks)
    owned_idx: np.ndarray     # positions in dst_ids owned by this rank

    @property
    def owned_ids(self) -> np.ndarray:
        return self.block.dst_ids[self.owned_idx]


def _route_to_owners(world, plan: LayerPlan, tag: int, counts: np.ndarray, payload: np.ndarray, width: int):
    """all_to_all the local partials; returns stacked [P, n_owned, w] arrays."""
    outgoing = []
    for j in range(world.size):
        sel = plan.dst_owner == j
        outgoing.append(encode_partials(plan.block.dst_ids[sel], tag, counts[sel], payload[sel]))
    incoming = world.all_to_all(outgoing)
    n_owned = len(plan.owned_idx)
    stacked_pay = np.empty((world.size, n_owned, width), dtype=np.float64)
    stacked_cnt = np.empty((world.size, n_owned), dtype=np.int64)
    expect = plan.owned_ids
    for j, buf in enumerate(incoming):
        dst, _, cnt, pay = decode_partials(buf, width)
        if len(dst) != n_owned or not np.array_equal(dst, expect):
            raise ValueError(f"partials from rank {j} do not cover the owned destinations")
        stacked_cnt[j] = cnt
        stacked_pay[j] = pay.astype(np.float64)
    return stacked_pay, stacked_cnt


def _gather_owned_rows(world, plan: LayerPlan, rows: np.ndarray, width: int, dtype: str = "<f4") -> np.ndarray:
    """all_gather per-owner rows; returns a table aligned with block.dst_ids."""
    ids = plan.owned_ids.astype("<u8").tobytes()
    data = struct.pack("<I", len(plan.owned_idx)) + ids + np.ascontiguousarray(rows, dtype=dtype).tobytes()
    gathered = world.all_gather(data)
    table = np.zeros((plan.block.num_dst, width), dtype=dtype)
    pos = {int(g): i for i, g in enumerate(plan.block.dst_ids)}
    for buf in gathered:
        (cnt,) = struct.unpack_from("<I", buf, 0)
        g_ids = np.frombuffer(buf, dtype="<u8", count=cnt, offset=4).astype(np.int64)
        g_rows = np.frombuffer(buf, dtype=dtype, count=cnt * width, offset=4 + 8 * cnt).reshape(cnt, width)
        if cnt:
            table[[pos[int(g)] for g in g_ids]] = g_rows
    return table


def execute_layer(world, plan: LayerPlan, layer, weights, src_inputs: np.ndarray, h_prev_owned: np.ndarray) -> np.ndarray:
    """Local aggregate -> shuffle -> merge -> update; returns owned rows (f32)."""
    x = np.asarray(src_inputs, dtype=np.float64)
    width = _payload_width(layer)
    if layer.kind == GAT:
        dst_prev_table = _gather_owned_rows(world, plan, h_prev_owned, layer.in_dim)
        counts, pay = _local_payloads(layer, plan.block, x, weights, dst_prev_table=dst_prev_table)
        stacked_pay, stacked_cnt = _route_to_owners(world, plan, TAG_SOFTMAX, counts, pay, width)
        agg, total = _merge_arrays("softmax", stacked_pay, stacked_cnt)
    elif layer.kind == MOMENTS:
        counts1, pay1 = _local_payloads(layer, plan.block, x, weights, phase=1)
        sp, sc = _route_to_owners(world, plan, TAG_MOMENTS_P1, counts1, pay1, width)
        means_owned, _ = _merge_arrays("moments_p1", sp, sc)
        means_table = _gather_owned_rows(world, plan, means_owned, layer.in_dim, dtype="<f8")
        counts2, pay2 = _local_payloads(layer, plan.block, x, weights, means_table=means_table.astype(np.float64), phase=2)
        sp2, sc2 = _route_to_owners(world, plan, TAG_MOMENTS_P2, counts2, pay2, width)
        agg, total = _merge_arrays("moments_p2", sp2, sc2, n=layer.n)
    else:
        counts, pay = _local_payloads(layer, plan.block, x, weights)
        tag = _KIND_TAG[layer.merge_kind]
        stacked_pay, stacked_cnt = _route_to_owners(world, plan, tag, counts, pay, width)
        agg, total = _merge_arrays(layer.merge_kind, stacked_pay, stacked_cnt, p=layer.p, n=layer.n)
    return apply_update(layer, np.asarray(h_prev_owned, dtype=np.float64), agg, total, weights)


# ---------------------------------------------------------------------------
# Model execution over a rank's shard
# ---------------------------------------------------------------------------


def _shard_digest(shard: ComputationGraph, model) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack("<III", model.k, shard.num_base, len(shard.query_ids)))
    h.update(shard.targets.astype("<u8").tobytes())
    for spec in model.layers:
        h.update(spec.kind.encode())
        h.update(struct.pack("<II", spec.in_dim, spec.out_dim))
    return h.digest()


def _resolve_shard_inputs(block, num_base, local_partition, prequest, own_state, in_dim) -> np.ndarray:
    X = np.empty((block.num_src, in_dim), dtype=np.float32)
    ids = block.src_ids
    kinds = block.bind_kind
    feat = kinds == BIND_FEATURE
    ft = feat & (ids < num_base)
    if ft.any():
        X[ft] = local_partition.feature_rows(ids[ft])
    fq = feat & (ids >= num_base)
    if fq.any():
        qpos = {int(q): i for i, q in enumerate(prequest.assigned_query_ids)}
        X[fq] = prequest.assigned_features[[qpos[int(g)] for g in ids[fq]]]
    pe_mask = kinds == BIND_PE
    if pe_mask.any():
        if local_partition.pe is None:
            raise ValueError("block binds stored embeddings but the partition has none")
        for layer in np.unique(block.bind_pe_layer[pe_mask]):
            sel = pe_mask & (block.bind_pe_layer == layer)
            X[sel] = local_partition.pe.rows(int(layer), ids[sel])
    comp = kinds == BIND_COMPUTED
    if comp.any():
        X[comp] = np.stack([own_state[int(g)] for g in ids[comp]])
    return X


def execute_model(world, shard: ComputationGraph, model, weights, local_partition, prequest) -> np.ndarray | None:
    """Run all layers over this rank's shard; rank 0 returns the B x H result.

    Intermediate outputs of queries and targets stay on their owner and feed
    the next block's computed bindings; the final query rows are gathered and
    assembled in query-id order.
    """
    digests = world.all_gather(_shard_digest(shard, model))
    if any(d != digests[0] for d in digests):
        raise ValueError("inconsistent shards across ranks")
    base = shard.num_base
    k = model.k
    P = world.size

    def owner_of(ids: np.ndarray) -> np.ndarray:
        out = np.empty(len(ids), dtype=np.int64)
        is_q = ids >= base
        out[is_q] = query_owner(ids[is_q], base, P)
        out[~is_q] = local_partition.owner[ids[~is_q]]
        return out

    own_state: dict[int, np.ndarray] = {}
    for l in range(1, k + 1):
        block = shard.blocks[l - 1]
        spec = model.layers[l - 1]
        dst_owner = owner_of(block.dst_ids)
        owned_idx = np.flatnonzero(dst_owner == world.rank)
        plan = LayerPlan(block=block, dst_owner=dst_owner, owned_idx=owned_idx)
        X = _resolve_shard_inputs(block, base, local_partition, prequest, own_state, spec.in_dim)
        owned_ids = block.dst_ids[owned_idx]
        h_prev = np.empty((len(owned_idx), spec.in_dim), dtype=np.float32)
        if l == 1:
            is_q = owned_ids >= base
            if is_q.any():
                qpos = {int(q): i for i, q in enumerate(prequest.assigned_query_ids)}
                h_prev[is_q] = prequest.assigned_features[[qpos[int(g)] for g in owned_ids[is_q]]]
            if (~is_q).any():
                h_prev[~is_q] = local_partition.feature_rows(owned_ids[~is_q])
        else:
            for i, g in enumerate(owned_ids):
                h_prev[i] = own_state[int(g)]
        out = execute_layer(world, plan, spec, weights.layers[l - 1], X, h_prev)
        for i, g in enumerate(owned_ids):
            own_state[int(g)] = out[i]

    # gather query rows to every rank; rank 0 reports
    h_dim = model.layers[-1].out_dim
    q_mine = shard.query_ids[query_owner(shard.query_ids, base, P) == world.rank]
    mine = [(int(q), own_state[int(q)]) for q in q_mine]
    ids = np.array([g for g, _ in mine], dtype="<u8")
    rows = (
        np.stack([r for _, r in mine]).astype("<f4")
        if mine
        else np.empty((0, h_dim), dtype="<f4")
    )
    blob = struct.pack("<I", len(mine)) + ids.tobytes() + rows.tobytes()
    gathered = world.all_gather(blob)
    if world.rank != 0:
        return None
    result = np.zeros((len(shard.query_ids), h_dim), dtype=np.float32)
    for buf in gathered:
        (cnt,) = struct.unpack_from("<I", buf, 0)
        g_ids = np.frombuffer(buf, dtype="<u8", count=cnt, offset=4).astype(np.int64)
        g_rows = np.frombuffer(buf, dtype="<f4", count=cnt * h_dim, offset=4 + 8 * cnt).reshape(cnt, h_dim)
        for i, g in enumerate(g_ids):
            result[int(g) - base] = g_rows[i]
    return result
