"""Recomputation candidates, scoring policies, and the stochastic estimator.

Direct training neighbors of query nodes are recomputation candidates.
Under a budget gamma, floor(gamma * |R|) of them are selected for
recomputation, ranked by one of:

* ratio   -- |N_Q(u)| / |N(u)|, the fraction of u's in-edges coming from
             query nodes (the serving-time heuristic),
* is      -- node importance over the training graph,
             IS(v) = (1/deg(v)) sum_{u in N(v)} 1/deg(u),
* random  -- a seeded uniform shuffle,
* oracle  -- the measured stored-embedding approximation error
             (test/benchmark only: it needs full embeddings).

The estimator machinery mirrors the mean-of-messages simplification: for
each candidate, f_u = q_u + t_u per layer, and the randomized estimate
recomputes q_u with probability p_u at weight 1/p_u, which is unbiased.
The summed per-dimension variance has the closed form
``S = sum_u ||sum_l q_u^(l)||^2 (1/p_u - 1)``, minimized over a fixed
probability mass by p_u proportional to ||sum_l q_u^(l)||.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compgraph import ServingRequest, build_srpe, candidate_arrays
from .models import forward_all_blocks

POLICY_RATIO = "ratio"
POLICY_IS = "is"
POLICY_RANDOM = "random"
POLICY_ORACLE = "oracle"


@dataclass
class CandidateSet:
    ids: np.ndarray                # ascending training node ids
    query_edge_counts: np.ndarray  # |N_Q(u)|: query->u edges
    total_degrees: np.ndarray      # |N(u)|: training in-degree + query in-edges

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RecomputationPlan:
    policy: str
    gamma: float
    candidate_ids: np.ndarray
    scores: np.ndarray
    targets: np.ndarray  # ascending subset of candidate_ids

    def to_text(self) -> str:
        sel = set(int(t) for t in self.targets)
        lines = ["candidate,score,selected"]
        for cid, score in zip(self.candidate_ids, self.scores):
            lines.append(f"{int(cid)},{score!r},{int(int(cid) in sel)}")
        return "\n".join(lines) + "\n"


def find_candidates(request: ServingRequest, dataset) -> CandidateSet:
    ids, nq = candidate_arrays(request)
    total = dataset.in_degrees()[ids] + nq if ids.size else nq
    return CandidateSet(ids=ids, query_edge_counts=nq, total_degrees=total.astype(np.int64))


def candidate_set_from_parts(ids: np.ndarray, nq: np.ndarray, train_in_deg: np.ndarray) -> CandidateSet:
    """Assemble a candidate set from gathered per-partition query-edge counts."""
    ids = np.asarray(ids, dtype=np.int64)
    nq = np.asarray(nq, dtype=np.int64)
    return CandidateSet(ids=ids, query_edge_counts=nq, total_degrees=train_in_deg[ids] + nq)


def score_query_edge_ratio(candidates: CandidateSet) -> np.ndarray:
    total = candidates.total_degrees.astype(np.float64)
    if np.any(total <= 0):
        raise ValueError("candidate with zero total degree")
    return candidates.query_edge_counts / total


def score_importance(candidates: CandidateSet, dataset) -> np.ndarray:
    """IS over the training graph only; zero-in-degree neighbors contribute 0."""
    deg = dataset.in_degrees().astype(np.float64)
    scores = np.zeros(len(candidates), dtype=np.float64)
    for i, v in enumerate(candidates.ids):
        d = deg[v]
        if d <= 0:
            continue
        nbrs = dataset.in_neighbors_of(int(v))
        nd = deg[nbrs]
        scores[i] = np.sum(np.where(nd > 0, 1.0 / np.maximum(nd, 1.0), 0.0)) / d
    return scores


def importance_partial_sums(candidate_ids: np.ndarray, local_partition) -> np.ndarray:
    """This partition's share of each candidate's importance numerator."""
    deg = local_partition.train_in_degrees.astype(np.float64)
    out = np.zeros(len(candidate_ids), dtype=np.float64)
    for i, v in enumerate(candidate_ids):
        nbrs = local_partition.local_in_sources(int(v))
        if nbrs.size:
            nd = deg[nbrs]
            out[i] = np.sum(np.where(nd > 0, 1.0 / np.maximum(nd, 1.0), 0.0))
    return out


def select_targets(
    candidates: CandidateSet,
    scores: np.ndarray,
    gamma: float,
    policy: str,
    tie_seed: int = 0,
) -> RecomputationPlan:
    """Pick the top floor(gamma * |R|); ties broken by ascending node id."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    m = len(candidates)
    budget = int(np.floor(gamma * m))
    scores = np.asarray(scores, dtype=np.float64)
    if policy == POLICY_RANDOM:
        rng = np.random.default_rng(tie_seed)
        order = rng.permutation(m)
    else:
        order = np.lexsort((candidates.ids, -scores))
    chosen = np.sort(candidates.ids[order[:budget]])
    return RecomputationPlan(
        policy=policy,
        gamma=gamma,
        candidate_ids=candidates.ids,
        scores=scores,
        targets=chosen.astype(np.int64),
    )


def optimal_probabilities(q_norms: np.ndarray, gamma: float) -> np.ndarray:
    """Probabilities proportional to the norms, clamped to (0, 1].

    Any p exceeding 1 is fixed at 1 and the residual mass redistributed
    proportionally among the rest, repeated to the fixpoint; this is the
    variance-minimizing allocation for a fixed total probability mass.
    """
    norms = np.asarray(q_norms, dtype=np.float64)
    if np.any(norms < 0):
        raise ValueError("norms must be nonnegative")
    if gamma < 0 or gamma > len(norms):
        raise ValueError("gamma must lie in [0, |R|]")
    p = np.zeros(len(norms), dtype=np.float64)
    if gamma == 0:
        return p
    if not np.any(norms > 0):
        raise ValueError("all-zero norms with positive budget")
    free = norms > 0
    residual = float(gamma)
    while True:
        denom = norms[free].sum()
        p[free] = residual * norms[free] / denom
        over = free & (p > 1.0)
        if not over.any():
            break
        p[over] = 1.0
        residual -= int(over.sum())
        free = free & ~over
        if residual <= 0 or not free.any():
            break
    return p


def analytic_variance(q_norms: np.ndarray, probabilities: np.ndarray) -> float:
    """S = sum_u ||Q_u||^2 (1/p_u - 1)."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in (0, 1]")
    norms = np.asarray(q_norms, dtype=np.float64)
    return float(np.sum(norms**2 * (1.0 / p - 1.0)))


@dataclass
class EstimatorInstance:
    """Per-candidate layer-summed query and training aggregation vectors."""

    candidate_ids: np.ndarray
    q_vectors: np.ndarray  # |R| x d, sum over layers of q_u^(l)
    t_vectors: np.ndarray  # |R| x d

    @property
    def q_norms(self) -> np.ndarray:
        return np.linalg.norm(self.q_vectors, axis=1)

    @property
    def total(self) -> np.ndarray:
        return (self.q_vectors + self.t_vectors).sum(axis=0)


def build_estimator_instance(dataset, request: ServingRequest, model, weights, pe_store) -> EstimatorInstance:
    """Derive q_u and t_u from actual embeddings under mean aggregation.

    Messages are the senders' previous-layer embeddings; query and
    candidate rows come from a full recomputation pass, other training rows
    from the store (exact for nodes untouched by query edges).
    """
    dims = {model.layers[0].in_dim} | {s.out_dim for s in model.layers} | {s.in_dim for s in model.layers}
    if len(dims) != 1:
        raise ValueError("estimator analysis needs uniform layer dimensions")
    d = dims.pop()
    cand = find_candidates(request, dataset)
    graph = build_srpe(request, dataset, pe_store, model.k, cand.ids)
    outs = forward_all_blocks(model, graph, weights, dataset.features, request.query_features, pe_store)
    mid_pos = {int(g): i for i, g in enumerate(graph.blocks[0].dst_ids)}
    base = request.num_base

    def h_rows(level: int, ids: np.ndarray) -> np.ndarray:
        """Embedding h^(level) for arbitrary node ids (level 0 = inputs)."""
        rows = np.empty((len(ids), d), dtype=np.float64)
        for i, g in enumerate(ids):
            g = int(g)
            if level == 0:
                rows[i] = request.query_features[g - base] if g >= base else dataset.features[g]
            elif g in mid_pos:
                rows[i] = outs[level - 1][mid_pos[g]]
            else:
                rows[i] = pe_store.row(level, g)
        return rows

    from .compgraph import _EdgeIndex  # grouped request edges

    req_idx = _EdgeIndex(request.edges)
    m = len(cand)
    q_vec = np.zeros((m, d), dtype=np.float64)
    t_vec = np.zeros((m, d), dtype=np.float64)
    for i, u in enumerate(cand.ids):
        u = int(u)
        q_nbrs = req_idx.sources_into(u)
        t_nbrs = dataset.in_neighbors_of(u)
        denom = float(len(q_nbrs) + len(t_nbrs))
        if denom == 0:
            continue
        for l in range(1, model.k):
            if len(q_nbrs):
                q_vec[i] += h_rows(l - 1, q_nbrs).sum(axis=0) / denom
            if len(t_nbrs):
                t_vec[i] += h_rows(l - 1, t_nbrs).sum(axis=0) / denom
    return EstimatorInstance(candidate_ids=cand.ids, q_vectors=q_vec, t_vectors=t_vec)


def estimator_variance_suite(
    instance: EstimatorInstance,
    probabilities: np.ndarray,
    num_samples: int,
    seed: int,
) -> tuple[float, float, float]:
    """Monte-Carlo check of the estimator against the closed-form variance.

    Returns (norm of mean deviation from the exact total, empirical summed
    variance, analytic S).
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in (0, 1]")
    Q = instance.q_vectors
    exact = instance.total
    t_total = instance.t_vectors.sum(axis=0)
    rng = np.random.default_rng(seed)
    z = (rng.random((num_samples, len(p))) < p).astype(np.float64)
    samples = (z / p) @ Q + t_total
    mean_err = float(np.linalg.norm(samples.mean(axis=0) - exact))
    emp_var = float(samples.var(axis=0, ddof=1).sum())
    return mean_err, emp_var, analytic_variance(instance.q_norms, p)


def approximation_error(full_embs: list[np.ndarray], pe_store, candidates: CandidateSet) -> np.ndarray:
    """Per-candidate sum over layers of ||f_u^(l) - stored_u^(l)||_2."""
    if len(full_embs) != pe_store.num_layers:
        raise ValueError("layer count mismatch between embeddings and store")
    err = np.zeros(len(candidates), dtype=np.float64)
    for l, f_l in enumerate(full_embs, start=1):
        diff = f_l.astype(np.float64) - pe_store.rows(l, candidates.ids).astype(np.float64)
        err += np.linalg.norm(diff, axis=1)
    return err


def full_candidate_embeddings(
    dataset, request: ServingRequest, model, weights, pe_store
) -> tuple[CandidateSet, list[np.ndarray]]:
    """Per-layer embeddings of all candidates with query edges included.

    Implemented by recomputing every candidate; rows for training nodes
    without query edges equal their stored values exactly, so the result
    matches the fully expanded forward pass.
    """
    cand = find_candidates(request, dataset)
    graph = build_srpe(request, dataset, pe_store, model.k, cand.ids)
    outs = forward_all_blocks(model, graph, weights, dataset.features, request.query_features, pe_store)
    pos = {int(g): i for i, g in enumerate(graph.blocks[0].dst_ids)}
    rows = [pos[int(u)] for u in cand.ids]
    return cand, [outs[l - 1][rows] for l in range(1, model.k)]


def recomputed_candidate_embeddings(
    dataset, request: ServingRequest, model, weights, pe_store, targets: np.ndarray
) -> tuple[CandidateSet, list[np.ndarray]]:
    """Candidate rows after recomputing only ``targets``; others keep stored rows."""
    cand = find_candidates(request, dataset)
    out_layers = [
        pe_store.rows(l, cand.ids).astype(np.float64).copy() for l in range(1, model.k)
    ]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size:
        graph = build_srpe(request, dataset, pe_store, model.k, targets)
        outs = forward_all_blocks(model, graph, weights, dataset.features, request.query_features, pe_store)
        pos = {int(g): i for i, g in enumerate(graph.blocks[0].dst_ids)}
        idx = np.flatnonzero(np.isin(cand.ids, targets))
        for l in range(1, model.k):
            out_layers[l - 1][idx] = outs[l - 1][[pos[int(cand.ids[i])] for i in idx]]
    return cand, out_layers
