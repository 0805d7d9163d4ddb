"""Command-line entry point.

Subcommands: gen-graph, partition, precompute, serve, verify, bench-policy,
bench-latency, bench-throughput.  All randomness is seeded via --seed and
machine-readable outputs go to --out.  Exit codes: 0 success, 1 runtime
failure (single-line error on stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import models, policy as policy_mod, runtime, workload
from .collectives import make_tcp_world, parse_peers
from .compgraph import build_full_k_hop, build_srpe, load_request, partition_request, save_request
from .graphstore import load_dataset, partition_random_hash, precompute_embeddings, save_dataset, scatter_pe
from .models import forward_full, init_weights, load_weights, make_model, save_weights

MODEL_NAMES = {
    "gcn": models.GCN,
    "sage": models.SAGE_MEAN,
    "gat": models.GAT,
    "powermean": models.POWER_MEAN,
    "moments": models.MOMENTS,
}


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="gnnserve")
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None)
        return p

    g = common(sub.add_parser("gen-graph", help="generate a synthetic dataset directory"))
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--avg-degree", type=float, default=10.0)
    g.add_argument("--exponent", type=float, default=2.1)
    g.add_argument("--features", type=int, default=32)
    g.add_argument("--holdout", type=float, default=0.25)

    p = common(sub.add_parser("partition", help="report the random-hash partitioning"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--p", type=int, default=2)

    pc = common(sub.add_parser("precompute", help="store layer embeddings and weights"))
    pc.add_argument("--dataset", required=True)
    pc.add_argument("--model", choices=sorted(MODEL_NAMES), default="sage")
    pc.add_argument("--layers", type=int, default=2)
    pc.add_argument("--hidden", type=int, default=16)

    s = common(sub.add_parser("serve", help="serve one synthesized or saved request"))
    s.add_argument("--dataset", required=True)
    s.add_argument("--strategy", choices=runtime.STRATEGIES, default="full")
    s.add_argument("--fanouts", type=str, default=None)
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--policy", choices=["ratio", "is", "random", "oracle"], default="ratio")
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--p", type=int, default=1)
    s.add_argument("--cache-bytes", type=int, default=0)
    s.add_argument("--transport", choices=["sim", "tcp"], default="sim")
    s.add_argument("--rank", type=int, default=0)
    s.add_argument("--world-size", type=int, default=1)
    s.add_argument("--peers", type=str, default=None)
    s.add_argument("--request", type=str, default=None, help="saved request directory")
    s.add_argument("--save-request", type=str, default=None)

    v = common(sub.add_parser("verify", help="run a built-in verification suite"))
    v.add_argument("--suite", choices=["cgp-equivalence", "srpe-exactness", "estimator"], required=True)
    v.add_argument("--p", type=int, default=2)

    bp = common(sub.add_parser("bench-policy", help="residual error per policy and budget"))
    bp.add_argument("--dataset", required=True)
    bp.add_argument("--policies", type=str, default="ratio,is,random,oracle")
    bp.add_argument("--budgets", type=str, default="0,0.05,0.1,0.2")
    bp.add_argument("--batch", type=int, default=128)
    bp.add_argument("--num-batches", type=int, default=4)

    bl = common(sub.add_parser("bench-latency", help="latency breakdown per strategy"))
    bl.add_argument("--dataset", required=True)
    bl.add_argument("--batch", type=int, default=64)
    bl.add_argument("--p", type=int, default=2)
    bl.add_argument("--gamma", type=float, default=0.1)
    bl.add_argument("--policy", choices=["ratio", "is", "random"], default="ratio")
    bl.add_argument("--fanouts", type=str, default=None)
    bl.add_argument("--requests", type=int, default=3)
    bl.add_argument("--cache-bytes", type=int, default=0)

    bt = common(sub.add_parser("bench-throughput", help="Poisson arrival load test"))
    bt.add_argument("--dataset", required=True)
    bt.add_argument("--strategy", choices=runtime.STRATEGIES, default="srpe")
    bt.add_argument("--gamma", type=float, default=0.1)
    bt.add_argument("--batch", type=int, default=32)
    bt.add_argument("--p", type=int, default=1)
    bt.add_argument("--rate", type=float, default=50.0)
    bt.add_argument("--duration-s", type=float, default=2.0)
    return top


def _load_all(dataset_dir: str):
    dataset, pe = load_dataset(dataset_dir)
    weights_path = os.path.join(dataset_dir, "weights.bin")
    if not os.path.exists(weights_path):
        raise RuntimeError(f"no weights.bin in {dataset_dir}; run precompute first")
    model, weights = load_weights(weights_path)
    pool = workload.load_pool(dataset_dir, dataset)
    return dataset, pe, model, weights, pool


def _request_for(args, dataset, pool):
    if getattr(args, "request", None):
        request, _ = load_request(args.request, dataset.num_nodes)
        return request
    if pool is None:
        raise RuntimeError("dataset has no holdout pool; pass --request")
    return workload.make_request(pool, dataset, args.batch, args.seed)


def _write_lines(path: str, lines: list[str]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _cmd_gen_graph(args) -> int:
    if not args.out:
        raise RuntimeError("gen-graph needs --out")
    full = workload.gen_powerlaw_graph(args.n, args.avg_degree, args.exponent, args.features, args.seed)
    serving, pool = workload.split_holdout(full, args.holdout, args.seed)
    save_dataset(serving, args.out)
    workload.save_pool(pool, args.out)
    print(f"dataset: {serving.num_nodes} nodes, {serving.num_edges} edges, pool {len(pool.ids)}")
    return 0


def _cmd_partition(args) -> int:
    dataset, _ = load_dataset(args.dataset)
    pmap, parts = partition_random_hash(dataset, args.p, args.seed)
    counts = [len(part.owned_ids) for part in parts]
    lines = ["partition,owned_nodes,local_edges"]
    for part in parts:
        lines.append(f"{part.index},{len(part.owned_ids)},{len(part.edge_srcs)}")
    if args.out:
        _write_lines(args.out, lines)
        pmap.owner.astype("<u8").tofile(os.path.join(os.path.dirname(args.out) or ".", "owners.bin"))
    print(f"owned nodes per partition: {counts}")
    return 0


def _cmd_precompute(args) -> int:
    dataset, _ = load_dataset(args.dataset)
    model = make_model(MODEL_NAMES[args.model], args.layers, dataset.feature_dim, args.hidden)
    weights = init_weights(model, args.seed)
    pe = precompute_embeddings(dataset, model, weights)
    save_dataset(dataset, args.dataset, pe)
    save_weights(model, weights, os.path.join(args.dataset, "weights.bin"))
    print(f"stored embeddings for layers 1..{pe.num_layers}, weights.bin written")
    return 0


def _serve_outputs(args, emb: np.ndarray, bd: runtime.LatencyBreakdown, batch: int, partitions: int) -> None:
    if not args.out:
        return
    os.makedirs(args.out, exist_ok=True)
    emb.astype("<f4").tofile(os.path.join(args.out, "embeddings.bin"))
    _write_lines(
        os.path.join(args.out, "metrics.csv"),
        [runtime.METRICS_HEADER, runtime.metrics_line(0, args.strategy, batch, partitions, bd)],
    )


def _cmd_serve(args) -> int:
    dataset, pe, model, weights, pool = _load_all(args.dataset)
    fanouts = tuple(int(x) for x in args.fanouts.split(",")) if args.fanouts else None
    request = _request_for(args, dataset, pool)
    if args.save_request:
        save_request(request, args.save_request, model.k)

    if args.transport == "tcp":
        if args.strategy != "srpe-cgp":
            raise RuntimeError("tcp transport applies to the srpe-cgp strategy")
        peers = parse_peers(args.peers)
        world = make_tcp_world(args.rank, peers)
        try:
            pmap, parts = partition_random_hash(dataset, args.world_size, args.seed)
            if pe is not None:
                scatter_pe(pe, parts)
            prequests = partition_request(request, pmap, args.world_size)
            emb, stats = runtime.run_cgp_request(
                world, parts[args.rank], prequests[args.rank], model, weights,
                args.gamma, args.policy, args.seed,
            )
        finally:
            world.close()
        if args.rank == 0 and emb is not None:
            bd = runtime.LatencyBreakdown(
                fetch_ms=stats["fetch_ms"], compute_ms=stats["compute_ms"],
                collective_bytes=stats["collective_bytes"], fetch_bytes=stats["fetch_bytes"],
            )
            _serve_outputs(args, emb, bd, request.num_queries, args.world_size)
            print(f"served batch {request.num_queries}: total {bd.total_ms:.2f} ms")
        return 0

    config = runtime.ServeConfig(
        strategy=args.strategy,
        fanouts=fanouts,
        gamma=args.gamma,
        policy=args.policy,
        num_partitions=args.p,
        cache_bytes=args.cache_bytes,
        seed=args.seed,
    )
    engine = runtime.ServingEngine(dataset, pe, model, weights, config)
    emb, bd = engine.serve(request)
    _serve_outputs(args, emb, bd, request.num_queries, args.p)
    print(f"served batch {request.num_queries}: total {bd.total_ms:.2f} ms "
          f"(fetch {bd.fetch_ms:.2f}, transfer {bd.transfer_ms:.2f}, compute {bd.compute_ms:.2f})")
    return 0


def _verify_dataset(seed: int):
    full = workload.gen_powerlaw_graph(400, 8.0, 2.1, 12, seed)
    serving, pool = workload.split_holdout(full, 0.25, seed)
    return serving, pool


def _cmd_verify(args) -> int:
    failures = 0
    if args.suite == "cgp-equivalence":
        serving, pool = _verify_dataset(args.seed)
        for kind in (models.SAGE_MEAN, models.GCN):
            model = make_model(kind, 2, serving.feature_dim, 8)
            weights = init_weights(model, args.seed)
            pe = precompute_embeddings(serving, model, weights)
            request = workload.make_request(pool, serving, 8, args.seed)
            config = runtime.ServeConfig(strategy="srpe-cgp", gamma=0.5, num_partitions=args.p, seed=args.seed)
            engine = runtime.ServingEngine(serving, pe, model, weights, config)
            emb, _ = engine.serve(request)
            plan = engine._centralized_plan(request)
            graph = build_srpe(request, serving, pe, model.k, plan)
            ref = forward_full(model, graph, weights, serving.features, request.query_features, pe)
            err = float(np.max(np.abs(emb - ref))) if emb.size else 0.0
            ok = err <= 1e-5
            failures += 0 if ok else 1
            print(f"cgp-equivalence {kind} p={args.p}: max_abs_err={err:.2e} {'PASS' if ok else 'FAIL'}")
    elif args.suite == "srpe-exactness":
        serving, pool = _verify_dataset(args.seed)
        model = make_model(models.SAGE_MEAN, 2, serving.feature_dim, 8)
        weights = init_weights(model, args.seed)
        pe = precompute_embeddings(serving, model, weights)
        request = workload.make_request(pool, serving, 8, args.seed)
        cand = policy_mod.find_candidates(request, serving)
        graph = build_srpe(request, serving, pe, model.k, cand.ids)
        ours = forward_full(model, graph, weights, serving.features, request.query_features, pe)
        ref = forward_full(model, build_full_k_hop(request, serving, model.k), weights,
                           serving.features, request.query_features)
        err = float(np.max(np.abs(ours - ref)))
        ok = err <= 1e-5
        failures += 0 if ok else 1
        print(f"srpe-exactness gamma=1 k=2: max_abs_err={err:.2e} {'PASS' if ok else 'FAIL'}")
    else:  # estimator
        rng = np.random.default_rng(args.seed)
        norms = rng.uniform(0.5, 2.0, size=5)
        p = policy_mod.optimal_probabilities(norms, 1.0)
        s_opt = policy_mod.analytic_variance(norms, p)
        uniform = np.full(5, 0.2)
        ok = s_opt <= policy_mod.analytic_variance(norms, uniform) + 1e-9
        failures += 0 if ok else 1
        print(f"estimator optimality vs uniform: {'PASS' if ok else 'FAIL'}")
    return 1 if failures else 0


def _cmd_bench_policy(args) -> int:
    dataset, pe, model, weights, pool = _load_all(args.dataset)
    if pe is None:
        raise RuntimeError("run precompute first")
    policies = [p for p in args.policies.split(",") if p]
    budgets = [float(b) for b in args.budgets.split(",") if b != ""]
    table = runtime.policy_benchmark(
        dataset, pool, model, weights, pe, policies, budgets, args.num_batches, args.batch, args.seed
    )
    lines = ["policy,budget,mean_residual_error"]
    for pol in policies:
        for budget in budgets:
            lines.append(f"{pol},{budget},{table[(pol, budget)]!r}")
    if args.out:
        _write_lines(args.out, lines)
    print("\n".join(lines))
    return 0


def _cmd_bench_latency(args) -> int:
    dataset, pe, model, weights, pool = _load_all(args.dataset)
    fanouts = tuple(int(x) for x in args.fanouts.split(",")) if args.fanouts else None
    strategies = ["full", "srpe", "srpe-cgp"] + (["sampled"] if fanouts else [])
    lines = [runtime.METRICS_HEADER]
    for req_id in range(args.requests):
        request = workload.make_request(pool, dataset, args.batch, args.seed + req_id)
        for strategy in strategies:
            config = runtime.ServeConfig(
                strategy=strategy,
                fanouts=fanouts,
                gamma=args.gamma if strategy.startswith("srpe") else 0.0,
                policy=args.policy,
                num_partitions=args.p if strategy == "srpe-cgp" else 1,
                cache_bytes=args.cache_bytes,
                seed=args.seed,
            )
            engine = runtime.ServingEngine(dataset, pe, model, weights, config)
            _, bd = engine.serve(request)
            lines.append(runtime.metrics_line(req_id, strategy, args.batch, config.num_partitions, bd))
    if args.out:
        _write_lines(args.out, lines)
    print("\n".join(lines))
    return 0


def _cmd_bench_throughput(args) -> int:
    dataset, pe, model, weights, pool = _load_all(args.dataset)
    config = runtime.ServeConfig(
        strategy=args.strategy, gamma=args.gamma, num_partitions=args.p, seed=args.seed
    )
    engine = runtime.ServingEngine(dataset, pe, model, weights, config)
    requests = [workload.make_request(pool, dataset, args.batch, args.seed + i) for i in range(8)]
    report = runtime.throughput_benchmark(
        lambda r: engine.serve(r), lambda i: requests[i % len(requests)],
        args.rate, args.duration_s, args.seed,
    )
    lines = [
        "offered_rate,achieved_rate,completed,p50_ms,p95_ms,p99_ms",
        f"{report.offered_rate},{report.achieved_rate},{report.completed},"
        f"{report.p50_ms:.3f},{report.p95_ms:.3f},{report.p99_ms:.3f}",
    ]
    if args.out:
        _write_lines(args.out, lines)
    print("\n".join(lines))
    return 0


_COMMANDS = {
    "gen-graph": _cmd_gen_graph,
    "partition": _cmd_partition,
    "precompute": _cmd_precompute,
    "serve": _cmd_serve,
    "verify": _cmd_verify,
    "bench-policy": _cmd_bench_policy,
    "bench-latency": _cmd_bench_latency,
    "bench-throughput": _cmd_bench_throughput,
}


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    return _COMMANDS[args.command](args)


def main() -> None:
    try:
        sys.exit(run())
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
