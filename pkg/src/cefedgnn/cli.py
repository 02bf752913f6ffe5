"""Command-line entry point.

Subcommands: gen, train, accountant, attack, report.  Exit codes:
0 success, 1 validation error, 2 runtime failure.  Errors print one
machine-readable line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .config import ConfigError, ExperimentConfig, load_config
from .datagen import GENERATORS, GenSpec, generate
from .federation import run_experiment, write_metrics_csv
from .graphs import GraphError, NodeRecord, EdgeRecord, build_graph, load_graph_csv, \
    save_graph_csv
from .metrics import infer_task
from .models import ConfigurationError, load_params, save_params
from .privacy import DEFAULT_KNN, DEFAULT_PERCENTILES, NoiseConfig, aia_attack, \
    mdp_epsilon, privacy_report, rho_percentiles

REPORT_HEADER = ["percentile", "rho", "sigma0", "epsilon", "delta", "rounds_shared", "knn_k"]


def _write_privacy_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.get("percentile", ""), repr(r["rho"]), repr(r["sigma0"]),
                        repr(r["epsilon"]), repr(r["delta"]),
                        r["rounds_shared"], r.get("knn_k", "")])


def _load_graph_args(args) -> "PartitionedGraph":
    return load_graph_csv(args.nodes, args.edges, args.clients)


def cmd_gen(args) -> int:
    spec = GenSpec(generator=args.generator, n=args.n, clients=args.clients,
                   feature_dim=args.feature_dim, density=args.density,
                   pattern_count=args.pattern_count, pattern_length=args.pattern_length,
                   illicit_ratio=args.illicit_ratio, imbalance=args.imbalance,
                   num_blocks=args.num_blocks, p_intra=args.p_intra,
                   p_inter=args.p_inter, feature_noise=args.feature_noise,
                   seed=args.seed)
    graph = generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graph_csv(graph, out / "nodes.csv", out / "edges.csv")
    print(f"wrote {out / 'nodes.csv'} ({graph.num_nodes} nodes) and "
          f"{out / 'edges.csv'} ({graph.num_edges} edges); seed {spec.seed}")
    return 0


def _resolve_graph(cfg: ExperimentConfig):
    if cfg.genspec is not None:
        return generate(cfg.genspec)
    return load_graph_csv(cfg.nodes_path, cfg.edges_path, cfg.clients)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    graph = _resolve_graph(cfg)
    task = None if cfg.task == "auto" else cfg.task
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    seeds = [cfg.seed + i for i in range(cfg.repeats)]
    print(f"effective master seeds: {seeds}")
    finals = []
    for s in seeds:
        run_dir = out_root if cfg.repeats == 1 else out_root / f"run_{s}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = run_experiment(graph, cfg.hyper, cfg.model, s, task=task,
                                split_spec=cfg.split,
                                compute_grad_norm=cfg.compute_grad_norm,
                                timing=cfg.timing)
        write_metrics_csv(result.metrics, run_dir / "metrics.csv")
        save_params(result.final_params, run_dir / "model.ckpt")
        noise = NoiseConfig(sigma0=cfg.hyper.sigma0, sigma1=cfg.hyper.sigma1,
                            sigma2=cfg.hyper.sigma2, clip_embed=cfg.hyper.clip_embed,
                            clip_model=cfg.hyper.clip_model, delta=cfg.delta)
        report = privacy_report(result.buffer.values(), result.buffer.release_counts(),
                                noise, k=cfg.knn_k, percentiles=cfg.percentiles)
        rows = [dict(r, sigma0=noise.sigma0, delta=noise.delta, knn_k=report.knn_k)
                for r in report.rows]
        _write_privacy_csv(rows, run_dir / "privacy_report.csv")
        final_f1 = result.metrics[-1].mean_macro_f1 if result.metrics else 0.0
        finals.append(final_f1)
        print(f"seed {s}: final mean_macro_f1 {final_f1:.4f} -> {run_dir}")

    if cfg.repeats > 1:
        with open(out_root / "summary.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["seed", "final_mean_macro_f1"])
            for s, v in zip(seeds, finals):
                w.writerow([s, repr(v)])
            w.writerow(["mean", repr(float(np.mean(finals)))])
            w.writerow(["std", repr(float(np.std(finals)))])
        print(f"final mean_macro_f1: {np.mean(finals):.4f} +/- {np.std(finals):.4f}")
    return 0


def cmd_accountant(args) -> int:
    sigmas = [float(s) for s in args.sigma0.split(",")]
    if any(s < 0 for s in sigmas):
        raise ConfigError("sigma0 values must be >= 0")
    percentiles = [float(p) for p in args.percentiles.split(",")]
    rows = []
    if args.rho is not None:
        pairs = [("", args.rho)]
    else:
        if args.embeddings is None:
            raise ConfigError("accountant needs --rho or --embeddings")
        emb = np.loadtxt(args.embeddings, delimiter=",", ndmin=2)
        rhos = rho_percentiles(emb, args.k, percentiles)
        pairs = list(zip(percentiles, rhos))
    for q, rho in pairs:
        for s0 in sigmas:
            eps = mdp_epsilon(rho, s0, args.rounds_shared, args.delta) if s0 > 0 \
                else float("inf")
            rows.append({"percentile": q, "rho": rho, "sigma0": s0, "epsilon": eps,
                         "delta": args.delta, "rounds_shared": args.rounds_shared,
                         "knn_k": args.k if args.rho is None else ""})
    _write_privacy_csv(rows, args.out)
    for r in rows:
        q = f"q={r['percentile']}" if r["percentile"] != "" else "explicit"
        print(f"{q} rho={r['rho']:.6g} sigma0={r['sigma0']:.6g} "
              f"-> epsilon={r['epsilon']:.6g}")
    return 0


def cmd_attack(args) -> int:
    graph = _load_graph_args(args)
    params = load_params(args.checkpoint)
    rng = rngmod.stream(args.seed, rngmod.DOMAIN_ATTACK)
    target_ids = [int(t) for t in args.target.split(",")]
    rows = []
    for tid in target_ids:
        gi = graph.index_of(tid)
        host = int(graph.host[gi])
        view = graph.view(host)
        row = view.row_of(tid)
        nbrs = view.neighbors(row)
        take = min(args.fanout, len(nbrs))
        chosen = sorted(set(int(view.local_ids[r]) for r in
                            (nbrs[np.sort(rng.choice(len(nbrs), take, replace=False))]
                             if len(nbrs) > take else nbrs)))
        sub_ids = sorted(set(chosen) | {tid})
        idmap = {nid: i for i, nid in enumerate(sub_ids)}
        nodes = [NodeRecord(idmap[nid], 0, view.features[view.row_of(nid)], None)
                 for nid in sub_ids]
        edges = []
        eid = 0
        for nid in sub_ids:
            r = view.row_of(nid)
            for rr in view.neighbors(r):
                other = int(view.local_ids[rr])
                if other in idmap and idmap[nid] < idmap[other]:
                    edges.append(EdgeRecord(eid, idmap[nid], idmap[other], None, None))
                    eid += 1
        sub = build_graph(nodes, edges, 1)
        subview = sub.view(0)
        from .models import compute_stack
        observed = compute_stack(params, subview).top()[subview.row_of(idmap[tid])]
        true_x = view.features[row].copy()
        res = aia_attack(params, subview, idmap[tid], observed,
                         iterations=args.iterations, step_size=args.step_size,
                         true_features=true_x)
        rows.append((tid, res.mse, res.objective, res.iterations, res.converged))
        print(f"target {tid}: mse={res.mse:.6g} objective={res.objective:.3g} "
              f"iterations={res.iterations} converged={res.converged}")
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["target", "mse", "objective", "iterations", "converged"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), r[3], r[4]])
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            last = None
            for last in reader:
                pass
        if last is None:
            raise ConfigError(f"{path}: no data rows")
        rows.append((path, float(last["mean_macro_f1"])))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "source", "final_mean_macro_f1"])
        for path, v in rows:
            w.writerow(["run", path, repr(v)])
        vals = [v for _, v in rows]
        w.writerow(["aggregate", "mean", repr(float(np.mean(vals)))])
        w.writerow(["aggregate", "std", repr(float(np.std(vals)))])
    print(f"{len(rows)} runs: final f1 {np.mean(vals):.4f} +/- {np.std(vals):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cefedgnn")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic partitioned graph")
    g.add_argument("--generator", choices=GENERATORS, default="planted_cycles")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--clients", type=int, default=2)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--density", type=float, default=2.0)
    g.add_argument("--pattern-count", type=int, default=None)
    g.add_argument("--pattern-length", type=int, default=6)
    g.add_argument("--illicit-ratio", type=float, default=0.15)
    g.add_argument("--imbalance", type=float, default=1.0)
    g.add_argument("--num-blocks", type=int, default=2)
    g.add_argument("--p-intra", type=float, default=0.1)
    g.add_argument("--p-inter", type=float, default=0.02)
    g.add_argument("--feature-noise", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run a training experiment from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default=None)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("accountant", help="metric-DP accountant")
    a.add_argument("--rho", type=float, default=None)
    a.add_argument("--embeddings", default=None, help="CSV, one embedding per row")
    a.add_argument("--k", type=int, default=DEFAULT_KNN)
    a.add_argument("--percentiles", default=",".join(str(q) for q in DEFAULT_PERCENTILES))
    a.add_argument("--sigma0", required=True, help="comma-separated noise levels")
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--rounds-shared", type=int, required=True)
    a.add_argument("--out", default="accountant.csv")
    a.set_defaults(func=cmd_accountant)

    k = sub.add_parser("attack", help="attribute-inference attack on node features")
    k.add_argument("--nodes", required=True)
    k.add_argument("--edges", required=True)
    k.add_argument("--clients", type=int, required=True)
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--target", required=True, help="comma-separated node ids")
    k.add_argument("--fanout", type=int, default=10)
    k.add_argument("--iterations", type=int, default=500)
    k.add_argument("--step-size", type=float, default=0.1)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", default="attack_report.csv")
    k.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="aggregate sweep metrics files")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out", default="summary.csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, GraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
