import numpy as np
import pytest

from conftest import DEMO_EDGES, small_workload
from gnnserve import models
from gnnserve.graphstore import (
    build_csr,
    build_feature_cache,
    export_edges,
    load_dataset,
    make_dataset,
    node_hash64,
    partition_random_hash,
    precompute_embeddings,
    save_dataset,
    scatter_pe,
)
from gnnserve.models import init_weights, make_model


def test_build_csr_groups_by_destination():
    offsets, neighbors = build_csr([(1, 0), (2, 0)], 3)
    assert offsets.tolist() == [0, 2, 2, 2]
    assert neighbors.tolist() == [1, 2]


def test_build_csr_empty():
    offsets, neighbors = build_csr([], 2)
    assert offsets.tolist() == [0, 0, 0]
    assert neighbors.size == 0


def test_build_csr_rejects_out_of_range():
    with pytest.raises(ValueError):
        build_csr([(0, 5)], 3)


def test_build_csr_keeps_duplicates():
    offsets, neighbors = build_csr([(1, 0), (1, 0)], 2)
    assert neighbors.tolist() == [1, 1]


def test_demo_graph_export_roundtrip(demo_dataset):
    edges = export_edges(demo_dataset)
    rebuilt = make_dataset(edges, demo_dataset.num_nodes, demo_dataset.features)
    assert np.array_equal(rebuilt.in_offsets, demo_dataset.in_offsets)
    assert np.array_equal(rebuilt.in_neighbors, demo_dataset.in_neighbors)


def test_demo_graph_neighborhoods(demo_dataset):
    assert demo_dataset.in_neighbors_of(0).tolist() == [1, 2, 3]
    assert demo_dataset.in_neighbors_of(3).tolist() == [0, 5, 7]
    assert demo_dataset.in_neighbors_of(2).tolist() == [1, 4]


def test_partition_single_is_identity(demo_dataset):
    pmap, parts = partition_random_hash(demo_dataset, 1, seed=0)
    assert pmap.owner.tolist() == [0] * 8
    assert parts[0].owned_ids.tolist() == list(range(8))
    assert np.array_equal(parts[0].features, demo_dataset.features)
    assert len(parts[0].edge_srcs) == demo_dataset.num_edges


def test_partition_cover_and_disjoint(demo_dataset):
    _, parts = partition_random_hash(demo_dataset, 2, seed=5)
    all_owned = np.concatenate([p.owned_ids for p in parts])
    assert len(all_owned) == demo_dataset.num_nodes
    assert len(np.unique(all_owned)) == demo_dataset.num_nodes


def test_partition_rejects_zero():
    ds = make_dataset([], 2, np.zeros((2, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        partition_random_hash(ds, 0, seed=1)


def test_partition_balance_binomial():
    n = 1000
    owner = (node_hash64(np.arange(n), 7) % np.uint64(4)).astype(int)
    counts = np.bincount(owner, minlength=4)
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - 250) <= 3 * sigma)


def test_partition_deterministic(demo_dataset):
    a, _ = partition_random_hash(demo_dataset, 3, seed=9)
    b, _ = partition_random_hash(demo_dataset, 3, seed=9)
    assert np.array_equal(a.owner, b.owner)


def test_partition_source_split_reconstructs_neighborhoods():
    serving, _ = small_workload(seed=4)
    _, parts = partition_random_hash(serving, 3, seed=2)
    for v in range(0, serving.num_nodes, 17):
        union = np.sort(np.concatenate([p.local_in_sources(v) for p in parts]))
        assert union.tolist() == np.sort(serving.in_neighbors_of(v)).tolist()


def test_partition_stores_edges_at_source_owner():
    serving, _ = small_workload(seed=6)
    pmap, parts = partition_random_hash(serving, 4, seed=3)
    for p in parts:
        if p.edge_srcs.size:
            assert np.all(pmap.owner[p.edge_srcs] == p.index)


def test_feature_cache_capacity_zero(demo_dataset):
    cache = build_feature_cache(demo_dataset, 0)
    assert all(cache.lookup(v) is None for v in range(8))


def test_feature_cache_everything_fits(demo_dataset):
    cache = build_feature_cache(demo_dataset, 8 * 4 * 4)
    for v in range(8):
        assert np.array_equal(cache.lookup(v), demo_dataset.features[v])


def test_feature_cache_star_graph_keeps_center():
    n = 6
    edges = [(0, i) for i in range(1, n)]  # center 0 has out-degree n-1
    ds = make_dataset(edges, n, np.random.default_rng(0).standard_normal((n, 3)).astype(np.float32))
    cache = build_feature_cache(ds, 3 * 4)  # one row
    assert cache.node_ids.tolist() == [0]
    assert cache.lookup(0) is not None
    assert cache.lookup(1) is None


def test_feature_cache_tie_breaks_ascending():
    # all nodes out-degree zero: ties resolved by ascending id
    ds = make_dataset([], 5, np.zeros((5, 2), dtype=np.float32))
    cache = build_feature_cache(ds, 2 * 4 * 2)
    assert cache.node_ids.tolist() == [0, 1]


def test_precompute_single_layer_store(demo_dataset):
    model = make_model(models.SAGE_MEAN, 2, 4, 6)
    pe = precompute_embeddings(demo_dataset, model, init_weights(model, 0))
    assert pe.num_layers == 1
    assert pe.layers[0].shape == (8, 6)


def test_precompute_isolated_node_mean_agg():
    # node 1 has no in-edges: layer-1 row is relu(W_self . x_1)
    ds = make_dataset([(0, 2)], 3, np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32))
    model = make_model(models.SAGE_MEAN, 2, 4, 5)
    w = init_weights(model, 1)
    pe = precompute_embeddings(ds, model, w)
    expected = np.maximum(ds.features[1].astype(np.float64) @ w.layers[0]["w_self"].astype(np.float64), 0.0)
    assert np.max(np.abs(pe.layers[0][1] - expected)) < 1e-6


def test_precompute_matches_independent_single_layer_oracle():
    serving, _ = small_workload(seed=12, n=20, avg_degree=3.0, feature_dim=5)
    model = make_model(models.SAGE_MEAN, 2, 5, 4)
    w = init_weights(model, 3)
    pe = precompute_embeddings(serving, model, w)
    w_self = w.layers[0]["w_self"].astype(np.float64)
    w_neigh = w.layers[0]["w_neigh"].astype(np.float64)
    for v in range(serving.num_nodes):
        nbrs = serving.in_neighbors_of(v)
        x = serving.features.astype(np.float64)
        agg = x[nbrs].mean(axis=0) if len(nbrs) else np.zeros(5)
        expected = np.maximum(x[v] @ w_self + agg @ w_neigh, 0.0)
        assert np.max(np.abs(pe.layers[0][v] - expected)) < 1e-5


def test_precompute_layer2_matches_chained_loop_oracle():
    serving, _ = small_workload(seed=19, n=20, avg_degree=3.0, feature_dim=5)
    model = make_model(models.SAGE_MEAN, 3, 5, 4)
    w = init_weights(model, 8)
    pe = precompute_embeddings(serving, model, w)

    def layer(xs, wl):
        out = np.zeros((serving.num_nodes, wl["w_self"].shape[1]))
        for v in range(serving.num_nodes):
            nbrs = serving.in_neighbors_of(v)
            agg = xs[nbrs].mean(axis=0) if len(nbrs) else np.zeros(xs.shape[1])
            out[v] = np.maximum(
                xs[v] @ wl["w_self"].astype(np.float64) + agg @ wl["w_neigh"].astype(np.float64), 0.0
            )
        return out.astype(np.float32).astype(np.float64)

    h1 = layer(serving.features.astype(np.float64), w.layers[0])
    h2 = layer(h1, w.layers[1])
    assert np.max(np.abs(pe.layers[0] - h1)) < 1e-5
    assert np.max(np.abs(pe.layers[1] - h2)) < 1e-5


def test_pe_rows_follow_partitions(demo_dataset):
    model = make_model(models.SAGE_MEAN, 3, 4, 6)
    pe = precompute_embeddings(demo_dataset, model, init_weights(model, 0))
    _, parts = partition_random_hash(demo_dataset, 2, seed=1)
    scatter_pe(pe, parts)
    for part in parts:
        for l in (1, 2):
            assert np.array_equal(part.pe.rows(l, part.owned_ids), pe.rows(l, part.owned_ids))
        with pytest.raises(KeyError):
            other = [v for v in range(8) if not part.owns(np.asarray([v]))[0]][0]
            part.pe.row(1, other)


def test_dataset_dir_roundtrip(tmp_path, demo_dataset):
    model = make_model(models.SAGE_MEAN, 2, 4, 6)
    pe = precompute_embeddings(demo_dataset, model, init_weights(model, 0))
    save_dataset(demo_dataset, str(tmp_path / "ds"), pe)
    loaded, loaded_pe = load_dataset(str(tmp_path / "ds"))
    assert np.array_equal(loaded.in_offsets, demo_dataset.in_offsets)
    assert np.array_equal(loaded.in_neighbors, demo_dataset.in_neighbors)
    assert np.array_equal(loaded.features, demo_dataset.features)
    assert np.array_equal(loaded.train_mask, demo_dataset.train_mask)
    assert np.array_equal(loaded_pe.layers[0], pe.layers[0])


def test_dataset_files_little_endian(tmp_path, demo_dataset):
    save_dataset(demo_dataset, str(tmp_path / "ds"))
    raw = np.fromfile(tmp_path / "ds" / "offsets.bin", dtype="<u8")
    assert raw.tolist() == demo_dataset.in_offsets.tolist()
    feats = np.fromfile(tmp_path / "ds" / "features.bin", dtype="<f4").reshape(8, 4)
    assert np.array_equal(feats, demo_dataset.features)
    mask = np.fromfile(tmp_path / "ds" / "train_mask.bin", dtype=np.uint8)
    assert mask.shape == (8,)
