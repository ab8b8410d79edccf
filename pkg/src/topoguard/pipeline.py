"""End-to-end run: generate, refine, train, release, index, evaluate, sweep.

Every stage is a pure function of the configuration and its seed.  The
manifest lists each artifact with its SHA-256 digest together with the seeds
and parameter hashes used.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from . import audit, plotting
from . import index as gindex
from .accountant import PrivacyLedger
from .attention import AttentionParams, geo_attention_forward
from .camera_graph import CameraGraph
from .dp import privatize_batch
from .embeddings import EmbeddingBatch, read_tgeb, write_tgeb
from .errors import InvalidInput, StageFailure
from .synthetic import SyntheticSpec, generate_synthetic, inflate_identity_variance, \
    query_gallery_split
from .train import TrainConfig, train_toy

SEED_ENV = "TOPOGUARD_SEED"

DEFAULT_CONFIG = {
    "seed": 0,
    "synthetic": {"identities": 50, "samples_per_identity": 10, "dim": 32,
                  "intra_sigma": 0.5, "inter_separation": 4.0, "cameras": 6,
                  "camera_view_shift": 0.3},
    "inflate": {"identities": [], "factor": 1.0},
    "refine": {"attention": False},
    "train": {"epochs": 30, "identities_per_batch": 8, "learning_rate": 0.05,
              "weight_decay": 1e-3, "lambda_ot": 0.0, "out_dim": 16,
              "act": {"beta": 0.2},
              "dp": {"clip_radius_B": 1.0, "epsilon": 2.0, "delta": 1e-5},
              "recalibration_period": 5, "index_mode": "exact"},
    "ledger": {"budget_epsilon": None, "budget_delta": 1.0, "delta_prime": 1e-6},
    "evaluate": {"k": 10, "charge_queries": True},
    "sweep": {"enabled": True, "eps": ["inf", 8, 2, 0.5], "seeds": 5},
    "figures": True,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(doc: dict | None = None, seed: int | None = None) -> dict:
    """Defaults, then the document, then the seed override (env var, then argument).

    The top-level seed is copied into every stage that draws randomness.
    """
    cfg = _merge(DEFAULT_CONFIG, doc or {})
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        cfg["seed"] = int(env)
    if seed is not None:
        cfg["seed"] = int(seed)
    s = int(cfg["seed"])
    cfg["synthetic"]["seed"] = s
    cfg["train"]["seed"] = s
    cfg["train"]["dp"]["rng_seed"] = s
    cfg["train"].setdefault("index_params", {})["seed"] = s
    return cfg


def digest_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _eps_value(e) -> float:
    return math.inf if isinstance(e, str) and e.lower() in ("inf", "infinity") else float(e)


def refine_by_camera(batch: EmbeddingBatch, graph: CameraGraph, seed: int) -> EmbeddingBatch:
    """Add the attention-propagated change of each camera's mean feature to its samples."""
    if batch.cameras is None:
        raise InvalidInput("camera ids are required for geometric refinement")
    d = batch.dim
    means = np.zeros((graph.n, d))
    for c in range(graph.n):
        rows = batch.cameras == c
        if rows.any():
            means[c] = batch.features[rows].mean(axis=0)
    params = AttentionParams.random(d, np.random.default_rng(seed))
    refined, _ = geo_attention_forward(means, graph, params)
    delta = refined - means
    return batch.with_features(batch.features + delta[batch.cameras], refined_by="camera-attention")


class _Run:
    def __init__(self, out_dir: Path, cfg: dict):
        self.out = out_dir
        self.cfg = cfg
        self.manifest = {"config_hash": digest_json(cfg), "seed": cfg["seed"],
                         "parameter_hashes": {k: digest_json(cfg[k]) for k in
                                              ("synthetic", "train", "ledger", "sweep")},
                         "stages": [], "artifacts": {}}

    def add(self, name: str, path: Path) -> None:
        self.manifest["artifacts"][name] = {"path": path.name, "sha256": _file_digest(path)}

    def write_manifest(self) -> Path:
        p = self.out / "manifest.json"
        p.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return p

    def stage(self, name, fn, *args):
        try:
            result = fn(*args)
        except Exception as exc:
            self.manifest["stages"].append({"stage": name, "status": "failed", "error": str(exc)})
            self.manifest["failed_stage"] = name
            self.write_manifest()
            raise StageFailure(name, f"stage {name!r} failed: {exc}", self.manifest) from exc
        self.manifest["stages"].append({"stage": name, "status": "ok"})
        return result


def run_pipeline(config: dict | str | Path | None, out_dir, seed: int | None = None) -> dict:
    """Execute every stage, write artifacts into ``out_dir``; return the manifest."""
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    cfg = resolve_config(config, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out, cfg)
    s = cfg["seed"]

    def generate():
        spec = SyntheticSpec.from_dict(cfg["synthetic"])
        batch, graph = generate_synthetic(spec)
        inf = cfg.get("inflate") or {}
        if inf.get("identities") and float(inf.get("factor", 1.0)) != 1.0:
            batch = inflate_identity_variance(batch, inf["identities"], float(inf["factor"]))
        graph.save(out / "graph.json")
        run.add("graph", out / "graph.json")
        write_tgeb(batch, out / "embeddings.tgeb")
        run.add("embeddings", out / "embeddings.tgeb")
        return batch, graph

    batch, graph = run.stage("generate", generate)
    if cfg["refine"].get("attention"):
        batch = run.stage("refine", refine_by_camera, batch, graph, s)

    tcfg = TrainConfig.from_dict(cfg["train"])

    def train():
        res = train_toy(batch, tcfg)
        np.save(out / "encoder.npy", res.encoder)
        run.add("encoder", out / "encoder.npy")
        (out / "history.json").write_text(json.dumps(res.history, indent=1))
        run.add("history", out / "history.json")
        return res

    res = run.stage("train", train)

    led_cfg = cfg["ledger"]
    ledger_path = out / "ledger.jsonl"

    def release():
        ledger = PrivacyLedger(
            budget_epsilon=math.inf if led_cfg.get("budget_epsilon") is None
            else float(led_cfg["budget_epsilon"]),
            budget_delta=float(led_cfg.get("budget_delta", 1.0)),
            delta_prime=float(led_cfg.get("delta_prime", 1e-6)), path=ledger_path)
        if res.dp.is_private:
            dec = ledger.try_spend(res.dp.epsilon, res.dp.delta, "gallery-release")
            if not dec.accepted:
                raise RuntimeError(f"gallery release refused: {dec.reason}")
        write_tgeb(res.released, out / "released.tgeb")
        run.add("released_embeddings", out / "released.tgeb")
        res.index.save(out / "index.tgix")
        run.add("index", out / "index.tgix")
        return ledger

    ledger = run.stage("release", release)

    def evaluate():
        encoded = batch.with_features(res.encode(batch.features))
        queries, gallery, q_rows, _ = query_gallery_split(encoded)
        write_tgeb(queries, out / "encoded_queries.tgeb")
        write_tgeb(gallery, out / "encoded_gallery.tgeb")
        run.add("encoded_queries", out / "encoded_queries.tgeb")
        run.add("encoded_gallery", out / "encoded_gallery.tgeb")
        K = int(cfg["evaluate"]["k"])
        # private queries: counter 1 keeps their noise apart from the gallery release
        Qp = privatize_batch(queries.features, res.dp, counter=1, first_stream=0)
        answered = np.ones(len(queries), bool)
        if res.dp.is_private and cfg["evaluate"].get("charge_queries", True):
            for r in range(len(queries)):
                answered[r] = ledger.try_spend(res.dp.epsilon, res.dp.delta, "query").accepted
        if not answered.any():
            raise RuntimeError("privacy budget refused every evaluation query")
        sub = np.flatnonzero(answered)
        private = gindex.evaluate(res.index, queries.with_features(Qp).subset(sub), K,
                                  query_ids=q_rows[sub])
        plain_idx = gindex.build(encoded)
        plain = gindex.evaluate(plain_idx, queries, K, query_ids=q_rows)
        hist = res.history
        metrics = {
            "seed": s,
            "private": private,
            "non_private": plain,
            "answered_queries": int(answered.sum()),
            "noise_sigma": res.dp.noise_sigma,
            "epsilon_per_release": None if not res.dp.is_private else res.dp.epsilon,
            "compactness_initial": hist[0]["Q"],
            "compactness_final": hist[-1]["Q"],
            "training_steps": res.steps,
            "norm_bound_violations": res.norm_bound_violations,
            "final_margins": {str(k): v for k, v in sorted(res.margins.items())},
        }
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
        run.add("metrics", out / "metrics.json")
        (out / "ledger_report.json").write_text(json.dumps(ledger.report(), indent=2, default=str))
        run.add("ledger", ledger_path) if ledger_path.exists() else None
        run.add("ledger_report", out / "ledger_report.json")
        return metrics

    metrics = run.stage("evaluate", evaluate)

    def sweep():
        q = read_tgeb(out / "encoded_queries.tgeb")
        g = read_tgeb(out / "encoded_gallery.tgeb")
        eps = [_eps_value(e) for e in cfg["sweep"]["eps"]]
        rows = audit.privacy_utility_sweep(g, q, eps, res.dp, int(cfg["sweep"]["seeds"]),
                                           int(cfg["evaluate"]["k"]))
        audit.write_sweep(rows, out / "sweep.csv", out / "sweep.json")
        run.add("sweep_csv", out / "sweep.csv")
        run.add("sweep_json", out / "sweep.json")
        return rows

    rows = run.stage("sweep", sweep) if cfg["sweep"].get("enabled", True) else None

    def figures():
        plotting.plot_compactness(res.history, out / "compactness.png")
        run.add("figure_compactness", out / "compactness.png")
        hi = (cfg.get("inflate") or {}).get("identities", [])
        plotting.plot_margin_dynamics(res.history, out / "margins.png", hi)
        run.add("figure_margins", out / "margins.png")
        if rows is not None:
            plotting.plot_sweep(rows, out / "sweep.png")
            run.add("figure_sweep", out / "sweep.png")

    if cfg.get("figures", True):
        run.stage("figures", figures)
    run.manifest["metrics_summary"] = {"rank1_private": metrics["private"]["rank1"],
                                       "rank1_non_private": metrics["non_private"]["rank1"]}
    run.write_manifest()
    return run.manifest
