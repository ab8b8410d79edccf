"""Command-line entry point: ``topoguard <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import accountant as acc
from . import audit
from . import index as gindex
from .act import (ActConfig, LabeledBatch, act_total, margin_table, MarginState)
from .attention import AttentionParams, geo_attention_forward
from .camera_graph import build_adjacency, load_graph, load_layout, perturbation_bound
from .dp import DpParams, privatize_batch
from .embeddings import load_embeddings, load_matrix_csv, save_embeddings
from .errors import TopoguardError
from .synthetic import SyntheticSpec, generate_synthetic
from .temporal import TemporalSnapshot, TgnConfig, stability_constants, tgn_step
from .transport import TransportProblem, exact_ot_oracle, sinkhorn


# ---------------------------------------------------------------- output helpers

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return "inf" if math.isinf(x) and x > 0 else x
    if isinstance(x, np.integer):
        return int(x)
    return x


def emit(doc, args, rows=None) -> None:
    """Write ``doc`` as JSON, or ``rows`` (list of dicts) as CSV when --format csv."""
    fmt = getattr(args, "format", "json")
    if fmt == "csv" and rows is not None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()) if rows else [])
        w.writeheader()
        for r in rows:
            w.writerow(_jsonable(r))
        text = buf.getvalue()
    else:
        text = json.dumps(_jsonable(doc), indent=2) + "\n"
    out = getattr(args, "output", None)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def write_matrix(M, path) -> None:
    np.savetxt(path, np.atleast_2d(M), delimiter=",", fmt="%.17g")


def _eps(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "infinity") else float(text)


def _dp_from(args) -> DpParams:
    if getattr(args, "dp_config", None):
        return DpParams.from_dict(json.loads(Path(args.dp_config).read_text()))
    return DpParams.calibrated(args.clip, _eps(args.epsilon), args.delta, args.seed)


def _add_format(p) -> None:
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--output", "-o", help="write to this file instead of stdout")


def _add_dp(p, epsilon="2") -> None:
    p.add_argument("--epsilon", default=epsilon, help="per-release epsilon ('inf' for none)")
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--clip", type=float, default=1.0, help="clip radius B")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dp-config", help="JSON file with explicit DP parameters")


# ---------------------------------------------------------------- commands

def cmd_graph(args):
    if args.action == "build":
        poses, sigma = load_layout(args.layout)
        g = build_adjacency(poses, args.sigma or sigma)
        if args.out:
            g.save(args.out)
        emit(g.to_dict(), args, [dict(zip(["camera"] + g.ids, [i] + list(row)))
                                 for i, row in zip(g.ids, g.affinity)])
    else:
        emit({"delta_p": args.delta_p, "sigma": args.sigma,
              "bound": perturbation_bound(args.delta_p, args.sigma)}, args)


def cmd_attn(args):
    g = load_graph(args.graph)
    X = load_matrix_csv(args.features)
    params = (AttentionParams.load(args.params) if args.params
              else AttentionParams.random(X.shape[1], np.random.default_rng(args.seed)))
    X_hat, attn = geo_attention_forward(X, g, params)
    if args.out:
        write_matrix(X_hat, args.out)
    if args.attention_out:
        write_matrix(attn, args.attention_out)
    emit({"refined": X_hat, "attention": attn}, args,
         [{f"f{j}": v for j, v in enumerate(row)} for row in X_hat])


def cmd_tgn(args):
    g = load_graph(args.graph)
    F = load_matrix_csv(args.features)
    d = F.shape[1]
    rng = np.random.default_rng(args.seed)
    cfg = TgnConfig.load(args.config) if args.config else TgnConfig.random(d, args.hidden, rng)
    attn_p = AttentionParams.load(args.params) if args.params else AttentionParams.random(d, rng)
    ts = np.loadtxt(args.timestamps, delimiter=",").reshape(-1) if args.timestamps else None
    snap = TemporalSnapshot(F, ts)
    out, A = tgn_step(snap, g, attn_p, cfg, return_attention=True)
    sc = stability_constants(g, cfg, A)
    if args.out:
        write_matrix(out, args.out)
    emit({"features": out, "norm_in": float(np.linalg.norm(F)),
          "norm_out": float(np.linalg.norm(out)), "stability_C": sc.C,
          "L_m": sc.L_m, "L_a": sc.L_a, "L_a_prior": sc.L_a_prior,
          "attention_norm": sc.attention_norm}, args,
         [{f"f{j}": v for j, v in enumerate(row)} for row in out])


def cmd_loss(args):
    batch = load_embeddings(args.embeddings)
    if batch.labels is None:
        raise TopoguardError("loss needs labelled embeddings")
    cfg = ActConfig(gamma0=args.gamma0, alpha=args.alpha, beta=args.beta, scale_s=args.scale,
                    lambda_tri=args.lambda_tri)
    uniq, y = np.unique(batch.labels, return_inverse=True)
    F = batch.features
    P = np.zeros((uniq.size, F.shape[1]))
    np.add.at(P, y, F / np.linalg.norm(F, axis=1, keepdims=True))
    if args.prototypes:
        P = load_matrix_csv(args.prototypes)
    state = MarginState(F.shape[1], location=False)
    state.update(F, y)
    margins = margin_table(state, cfg) if args.adaptive else None
    res = act_total(LabeledBatch(F, y, P), margins, cfg)
    table = {int(uniq[k]): v for k, v in (margins or {}).items()}
    emit({"loss": res.loss, "id_loss": res.id_loss, "triplet_loss": res.tri_loss,
          "grad_norm": float(np.linalg.norm(res.grad)), "margins": table}, args,
         [{"identity": k, "gamma": v} for k, v in table.items()] or
         [{"loss": res.loss, "id_loss": res.id_loss, "triplet_loss": res.tri_loss}])


def cmd_ot(args):
    C = load_matrix_csv(args.cost)
    n, m = C.shape
    p = load_matrix_csv(args.p).reshape(-1) if args.p else np.full(n, 1.0 / n)
    q = load_matrix_csv(args.q).reshape(-1) if args.q else np.full(m, 1.0 / m)
    prob = TransportProblem(C, p, q, args.epsilon_ot, args.lambda_marginal)
    plan = sinkhorn(prob, args.tol, args.max_iters, log_domain=not args.plain)
    doc = plan.to_dict()
    if args.exact:
        doc["exact_cost"] = exact_ot_oracle(prob)
    if args.out:
        write_matrix(plan.coupling, args.out)
    emit(doc, args, [{f"c{j}": v for j, v in enumerate(row)} for row in plan.coupling])


def cmd_privatize(args):
    batch = load_embeddings(args.input)
    dp = _dp_from(args)
    if args.ledger:
        led = acc.PrivacyLedger(args.budget_epsilon, args.budget_delta, path=args.ledger)
        if dp.is_private:
            dec = led.try_spend(dp.epsilon, dp.delta, "release")
            if not dec.accepted:
                emit({"refused": True, "reason": dec.reason,
                      "epsilon_total": dec.epsilon_total, "delta_total": dec.delta_total}, args)
                return 3
    X = privatize_batch(batch.features, dp, counter=args.counter)
    save_embeddings(batch.with_features(X, privatization=dp.to_dict()), args.out)
    emit({"written": args.out, "count": len(batch), "dp": dp.to_dict()}, args)


def cmd_account(args):
    if args.action == "compose":
        recs = [acc.SpendRecord(0.0, args.epsilon, args.delta)] * args.count
        e, d = acc.compose(recs, args.delta_prime)
        emit({"epsilon_total": e, "delta_total": d, "count": args.count}, args,
             [{"epsilon_total": e, "delta_total": d, "count": args.count}])
        return
    led = acc.PrivacyLedger(args.budget_epsilon, args.budget_delta, args.delta_prime,
                            path=args.ledger)
    if args.action == "spend":
        dec = led.try_spend(args.epsilon, args.delta, args.tag)
        emit({"accepted": dec.accepted, "epsilon_total": dec.epsilon_total,
              "delta_total": dec.delta_total, "reason": dec.reason}, args)
        return 0 if dec.accepted else 3
    rep = led.report()
    rows = [{"tag": t, **v} for t, v in rep["per_tag"].items()]
    emit(rep, args, rows or [{"tag": "", "count": 0, "epsilon_sum": 0.0, "delta_sum": 0.0}])


def cmd_index(args):
    if args.action == "build":
        batch = load_embeddings(args.embeddings)
        mode = "graph-approximate" if args.mode == "approx" else args.mode
        params = gindex.GraphParams(args.M, args.ef_construction, args.ef_search, args.seed)
        idx = gindex.build(batch, mode, params)
        idx.save(args.out)
        emit({"written": args.out, "count": len(idx), "mode": idx.mode, "dim": idx.dim}, args)
    elif args.action == "query":
        idx = gindex.GalleryIndex.load(args.index)
        Q = load_matrix_csv(args.query)
        results, rows = [], []
        for qi, q in enumerate(Q):
            r = gindex.query(idx, q, args.k, ef_search=args.ef_search,
                             exact=True if args.exact else None)
            results.append(r.to_dict()["results"])
            rows += [{"query": qi, "rank": k + 1, "id": i, "dissimilarity": d}
                     for k, (i, d) in enumerate(r.pairs())]
        emit({"queries": results}, args, rows)
    else:
        idx = gindex.GalleryIndex.load(args.index)
        q = load_embeddings(args.queries)
        qids = np.loadtxt(args.query_ids, delimiter=",", dtype=np.int64).reshape(-1) \
            if args.query_ids else None
        m = gindex.evaluate(idx, q, args.k, query_ids=qids)
        emit(m, args, [m])


def cmd_audit(args):
    if args.action == "mia":
        M = load_embeddings(args.members).features
        N = load_embeddings(args.nonmembers).features
        dp = _dp_from(args)
        reps = [audit.run_mia_audit(M, N, dp, args.seed + t) for t in range(args.trials)]
        rows = [r.to_dict() for r in reps]
        adv = [r.advantage for r in reps]
        emit({"trials": rows, "mean_advantage": float(np.mean(adv)),
              "std_advantage": float(np.std(adv))}, args, rows)
    else:
        g = load_embeddings(args.gallery)
        q = load_embeddings(args.queries)
        base = _dp_from(args)
        rows = audit.privacy_utility_sweep(g, q, audit.parse_eps_list(args.eps), base,
                                           args.seeds, args.k)
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            audit.write_sweep(rows, out / "sweep.csv", out / "sweep.json")
            from .plotting import plot_sweep
            plot_sweep(rows, out / "sweep.png")
        emit([r.to_dict() for r in rows], args, [
            {k: v for k, v in r.to_dict().items() if k != "rank1_runs"} for r in rows])


def cmd_diagnose(args):
    if args.action == "compactness":
        rep = audit.compactness(load_embeddings(args.embeddings))
        doc = rep.to_dict()
        emit(doc, args, doc["clusters"])
    elif args.action == "pac":
        b = audit.pac_bound(args.risk, args.kl, args.n, args.delta)
        emit({"bound": b}, args, [{"bound": b}])
    else:
        heads = [load_matrix_csv(p) for p in args.heads]
        grads = [load_matrix_csv(p) for p in args.grads]
        S = audit.attention_saliency(heads, grads)
        if args.out:
            write_matrix(S, args.out)
        emit({"saliency": S}, args, [{f"c{j}": v for j, v in enumerate(r)} for r in S])


def cmd_synth(args):
    spec = SyntheticSpec(args.identities, args.samples, args.dim, args.intra_sigma,
                         args.separation, args.cameras, args.view_shift, args.seed)
    batch, graph = generate_synthetic(spec)
    save_embeddings(batch, args.out)
    if args.graph_out:
        graph.save(args.graph_out)
    emit({"written": args.out, "count": len(batch), "dim": batch.dim}, args)


def cmd_pipeline(args):
    from .pipeline import run_pipeline
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.epochs is not None:
        doc.setdefault("train", {})["epochs"] = args.epochs
    if args.no_figures:
        doc["figures"] = False
    manifest = run_pipeline(doc, args.out_dir, seed=args.seed)
    emit(manifest, args)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="topoguard",
                                 description="Topology-guided private embedding retrieval toolkit")
    ap.add_argument("--version", action="version", version=f"topoguard {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph", help="camera topology")
    gs = p.add_subparsers(dest="action", required=True)
    b = gs.add_parser("build")
    b.add_argument("--layout", required=True)
    b.add_argument("--sigma", type=float)
    b.add_argument("--out")
    _add_format(b)
    b = gs.add_parser("bound", help="affinity perturbation bound")
    b.add_argument("--delta-p", type=float, required=True)
    b.add_argument("--sigma", type=float, required=True)
    _add_format(b)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("attn", help="geometry-aware attention refinement")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True, help="N x d CSV")
    p.add_argument("--params", help="attention parameter JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--attention-out")
    _add_format(p)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("tgn", help="one temporal graph step")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--timestamps")
    p.add_argument("--config", help="TGN parameter JSON")
    p.add_argument("--params", help="attention parameter JSON")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_format(p)
    p.set_defaults(func=cmd_tgn)

    p = sub.add_parser("loss", help="ACT loss on labelled embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--prototypes")
    p.add_argument("--adaptive", action="store_true", help="use batch-estimated adaptive margins")
    p.add_argument("--gamma0", type=float, default=0.4)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--lambda-tri", type=float, default=1.0)
    _add_format(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("ot", help="entropic optimal transport")
    p.add_argument("--cost", required=True)
    p.add_argument("--p")
    p.add_argument("--q")
    p.add_argument("--epsilon-ot", type=float, default=0.1)
    p.add_argument("--lambda-marginal", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--plain", action="store_true", help="plain scaling instead of log domain")
    p.add_argument("--exact", action="store_true", help="also report the unregularized optimum")
    p.add_argument("--out")
    _add_format(p)
    p.set_defaults(func=cmd_ot)

    p = sub.add_parser("privatize", help="clip and noise an embedding file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counter", type=int, default=0)
    p.add_argument("--ledger")
    p.add_argument("--budget-epsilon", type=float, default=math.inf)
    p.add_argument("--budget-delta", type=float, default=1.0)
    _add_dp(p)
    _add_format(p)
    p.set_defaults(func=cmd_privatize)

    p = sub.add_parser("account", help="privacy accounting")
    asub = p.add_subparsers(dest="action", required=True)
    for name in ("spend", "report"):
        a = asub.add_parser(name)
        a.add_argument("--ledger", required=True)
        a.add_argument("--budget-epsilon", type=float, default=math.inf)
        a.add_argument("--budget-delta", type=float, default=1.0)
        a.add_argument("--delta-prime", type=float, default=1e-6)
        if name == "spend":
            a.add_argument("--epsilon", type=float, required=True)
            a.add_argument("--delta", type=float, required=True)
            a.add_argument("--tag", default="query")
        _add_format(a)
    a = asub.add_parser("compose", help="advanced composition of identical spends")
    a.add_argument("--epsilon", type=float, required=True)
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--count", type=int, required=True)
    a.add_argument("--delta-prime", type=float, default=1e-6)
    _add_format(a)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("index", help="gallery index")
    isub = p.add_subparsers(dest="action", required=True)
    a = isub.add_parser("build")
    a.add_argument("--embeddings", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", choices=("exact", "approx", "graph-approximate"), default="exact")
    a.add_argument("--M", type=int, default=16)
    a.add_argument("--ef-construction", type=int, default=200)
    a.add_argument("--ef-search", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)
    _add_format(a)
    a = isub.add_parser("query")
    a.add_argument("--index", required=True)
    a.add_argument("--query", required=True, help="CSV with one query vector per row")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--ef-search", type=int)
    a.add_argument("--exact", action="store_true")
    _add_format(a)
    a = isub.add_parser("eval")
    a.add_argument("--index", required=True)
    a.add_argument("--queries", required=True)
    a.add_argument("--query-ids", help="CSV of gallery ids to exclude per query")
    a.add_argument("--k", type=int, default=10)
    _add_format(a)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("audit", help="privacy audits")
    asub = p.add_subparsers(dest="action", required=True)
    a = asub.add_parser("mia")
    a.add_argument("--members", required=True)
    a.add_argument("--nonmembers", required=True)
    a.add_argument("--trials", type=int, default=1)
    _add_dp(a, epsilon="inf")
    _add_format(a)
    a = asub.add_parser("sweep")
    a.add_argument("--gallery", required=True)
    a.add_argument("--queries", required=True)
    a.add_argument("--eps", default="inf,8,2,0.5")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--out-dir")
    _add_dp(a)
    _add_format(a)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("diagnose", help="embedding and model diagnostics")
    dsub = p.add_subparsers(dest="action", required=True)
    a = dsub.add_parser("compactness")
    a.add_argument("--embeddings", required=True)
    _add_format(a)
    a = dsub.add_parser("pac")
    a.add_argument("--risk", type=float, required=True)
    a.add_argument("--kl", type=float, required=True)
    a.add_argument("--n", type=int, required=True)
    a.add_argument("--delta", type=float, default=0.05)
    _add_format(a)
    a = dsub.add_parser("saliency")
    a.add_argument("--heads", nargs="+", required=True)
    a.add_argument("--grads", nargs="+", required=True)
    a.add_argument("--out")
    _add_format(a)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="generate synthetic identity embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--graph-out")
    p.add_argument("--identities", type=int, default=200)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--intra-sigma", type=float, default=0.25)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--view-shift", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    _add_format(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="end-to-end run")
    psub = p.add_subparsers(dest="action", required=True)
    a = psub.add_parser("run")
    a.add_argument("--config")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--no-figures", action="store_true")
    _add_format(a)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except TopoguardError as exc:
        kind = getattr(exc, "kind", type(exc).__name__)
        print(f"topoguard: error [{kind}]: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
