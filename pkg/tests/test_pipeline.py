import json
import math

import numpy as np
import pytest

from topoguard import index as gindex
from topoguard.act import ActConfig, LabeledBatch, act_total
from topoguard.cli import main
from topoguard.dp import DpParams
from topoguard.embeddings import read_tgeb, write_tgeb
from topoguard.errors import InvalidInput, InvalidParameter, StageFailure
from topoguard.pipeline import SEED_ENV, resolve_config, run_pipeline
from topoguard.synthetic import SyntheticSpec, generate_synthetic, query_gallery_split
from topoguard.train import TrainConfig, total_loss, train_toy
from topoguard.transport import TransportProblem, sinkhorn

SMALL = {"synthetic": {"identities": 12, "samples_per_identity": 5, "dim": 16},
         "train": {"epochs": 3, "out_dim": 8},
         "sweep": {"eps": ["inf", 2], "seeds": 2}}


# ---------------------------------------------------------------- synthetic data

def test_single_identity_single_sample():
    batch, graph = generate_synthetic(SyntheticSpec(identities=1, samples_per_identity=1, dim=4))
    assert batch.features.shape == (1, 4) and list(batch.labels) == [0]
    assert graph.n == 6


def test_synthetic_determinism(tmp_path):
    spec = SyntheticSpec(identities=20, samples_per_identity=4, dim=8, seed=5)
    write_tgeb(generate_synthetic(spec)[0], tmp_path / "a.tgeb")
    write_tgeb(generate_synthetic(spec)[0], tmp_path / "b.tgeb")
    assert (tmp_path / "a.tgeb").read_bytes() == (tmp_path / "b.tgeb").read_bytes()


def test_centroid_separation_and_loo_rank1():
    spec = SyntheticSpec(identities=50, samples_per_identity=5, dim=16, intra_sigma=0.05,
                         inter_separation=4.0, seed=1)
    batch, _ = generate_synthetic(spec)
    mus = np.array([batch.features[batch.labels == i].mean(axis=0) for i in range(50)])
    D = np.linalg.norm(mus[:, None] - mus[None], axis=2)
    np.fill_diagonal(D, np.inf)
    assert D.min() >= 4.0 - 0.2  # sample means sit near the separated centroids
    idx = gindex.build(batch)
    m = gindex.evaluate(idx, batch, 1, query_ids=np.arange(len(batch)))
    assert m["rank1"] == 1.0


def test_spec_validation():
    with pytest.raises(InvalidParameter):
        SyntheticSpec(identities=0)
    with pytest.raises(InvalidParameter):
        SyntheticSpec(intra_sigma=0.0)


# ---------------------------------------------------------------- total loss

def two_identity_batch():
    F = np.array([[1.0, 0.1], [0.9, -0.2], [-0.1, 1.0], [0.2, 0.8]])
    return LabeledBatch(F, [0, 0, 1, 1], np.eye(2))


def test_total_loss_equals_act_without_extra_terms():
    b = two_identity_batch()
    cfg = TrainConfig()
    tl = total_loss(b, None, cfg)
    ref = act_total(b, None, cfg.act)
    assert tl.value == ref.loss and np.array_equal(tl.grad, ref.grad)


def test_total_loss_with_transport_term():
    b = two_identity_batch()
    cfg = TrainConfig(lambda_ot=1.0)
    tl = total_loss(b, None, cfg)
    Fn = b.features / np.linalg.norm(b.features, axis=1, keepdims=True)
    plan = sinkhorn(TransportProblem.uniform(np.maximum(1.0 - Fn @ Fn.T, 0.0),
                                            epsilon_ot=cfg.ot_epsilon))
    assert tl.value == pytest.approx(act_total(b, None, cfg.act).loss + plan.objective, abs=1e-12)
    assert np.array_equal(tl.grad, act_total(b, None, cfg.act).grad)


def test_train_config_validation_and_roundtrip():
    with pytest.raises(InvalidParameter):
        TrainConfig(learning_rate=10.0, weight_decay=1.0)
    with pytest.raises(InvalidParameter):
        TrainConfig(lambda_ot=-1.0)
    cfg = TrainConfig(epochs=4, out_dim=3, act=ActConfig(beta=0.2))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- trainer

def small_data(seed=0):
    return generate_synthetic(SyntheticSpec(identities=10, samples_per_identity=6, dim=12,
                                            intra_sigma=0.5, seed=seed))[0]


def test_zero_epochs_keeps_initialization():
    data = small_data()
    res = train_toy(data, TrainConfig(epochs=0, out_dim=6, seed=4))
    W0 = np.random.default_rng(4).normal(size=(12, 6)) / math.sqrt(12)
    assert np.array_equal(res.encoder, W0)
    assert len(res.index) == len(data) and res.steps == 0
    assert len(res.history) == 1


def test_training_records_history_and_bounds():
    res = train_toy(small_data(), TrainConfig(epochs=6, out_dim=6, recalibration_period=3))
    assert [h["epoch"] for h in res.history] == list(range(7))
    assert res.norm_bound_violations == 0
    assert res.history[-1]["sensitivity"] == 2.0 * res.dp.clip_radius_B
    assert set(res.margins) == set(range(10))
    g = ActConfig()
    assert all(g.gamma0 <= v <= g.gamma0 * (1 + g.alpha) for v in res.margins.values())
    assert np.all(np.linalg.norm(res.released.features, axis=1) > 0)


def test_training_needs_two_identities():
    data = small_data()
    with pytest.raises(InvalidInput):
        train_toy(data.subset(np.flatnonzero(data.labels == 0)), TrainConfig(epochs=1))


# ---------------------------------------------------------------- pipeline

def test_pipeline_manifest_and_determinism(tmp_path):
    m1 = run_pipeline(SMALL, tmp_path / "a", seed=3)
    m2 = run_pipeline(SMALL, tmp_path / "b", seed=3)
    for name in ("graph", "encoder", "index", "ledger", "metrics", "sweep_csv",
                 "figure_sweep", "figure_margins", "figure_compactness"):
        assert name in m1["artifacts"]
    assert (tmp_path / "a" / "metrics.json").read_bytes() == \
        (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "index.tgix").read_bytes() == \
        (tmp_path / "b" / "index.tgix").read_bytes()
    # ledger records carry wall-clock times; everything else is bit-identical
    m1["artifacts"].pop("ledger")
    m2["artifacts"].pop("ledger")
    assert m1["seed"] == 3 and m1 == m2
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [s["stage"] for s in manifest["stages"]] == [
        "generate", "train", "release", "evaluate", "sweep", "figures"]


def test_env_seed_and_argument_precedence(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "11")
    cfg = resolve_config({"seed": 2})
    assert cfg["seed"] == 11 and cfg["train"]["dp"]["rng_seed"] == 11
    assert resolve_config({"seed": 2}, seed=5)["synthetic"]["seed"] == 5


def test_stage_failure_reports_stage(tmp_path):
    bad = dict(SMALL, inflate={"identities": [0], "factor": 2.0},
               synthetic={"identities": 1, "samples_per_identity": 3, "dim": 4})
    with pytest.raises(StageFailure) as ei:
        run_pipeline(bad, tmp_path)
    assert ei.value.stage == "train"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["failed_stage"] == "train" and "graph" in manifest["artifacts"]


def test_pipeline_sweep_matches_cli_sweep(tmp_path, capsys):
    run_pipeline(SMALL, tmp_path / "run", seed=2)
    out = tmp_path / "run"
    rc = main(["audit", "sweep", "--gallery", str(out / "encoded_gallery.tgeb"),
               "--queries", str(out / "encoded_queries.tgeb"), "--eps", "inf,2",
               "--seeds", "2", "--seed", "2", "--clip", "1", "--delta", "1e-5"])
    assert rc == 0
    cli_rows = json.loads(capsys.readouterr().out)
    assert cli_rows == json.loads((out / "sweep.json").read_text())


# ---------------------------------------------------------------- CLI smoke tests

def run_cli(capsys, *argv):
    rc = main(list(argv))
    return rc, capsys.readouterr().out


def test_cli_account_compose(capsys):
    rc, out = run_cli(capsys, "account", "compose", "--epsilon", "0.03", "--delta", "1e-6",
                      "--count", "100", "--delta-prime", "1e-6")
    assert rc == 0 and json.loads(out)["epsilon_total"] == pytest.approx(4.577, abs=1e-3)


def test_cli_graph_bound_and_pac(capsys):
    rc, out = run_cli(capsys, "graph", "bound", "--delta-p", "0.5", "--sigma", "5")
    assert rc == 0 and json.loads(out)["bound"] < 0.005
    rc, out = run_cli(capsys, "diagnose", "pac", "--risk", "0.1", "--kl", "1", "--n", "100",
                      "--format", "csv")
    assert rc == 0 and out.splitlines()[0] == "bound"


def test_cli_synth_index_privatize(tmp_path, capsys):
    emb = tmp_path / "e.tgeb"
    assert run_cli(capsys, "synth", "--out", str(emb), "--identities", "8", "--samples", "3",
                   "--dim", "6", "--graph-out", str(tmp_path / "g.json"))[0] == 0
    assert len(read_tgeb(emb)) == 24
    idx = tmp_path / "i.tgix"
    assert run_cli(capsys, "index", "build", "--embeddings", str(emb), "--out", str(idx),
                   "--mode", "approx")[0] == 0
    np.savetxt(tmp_path / "q.csv", read_tgeb(emb).features[:2], delimiter=",")
    rc, out = run_cli(capsys, "index", "query", "--index", str(idx), "--query",
                      str(tmp_path / "q.csv"), "--k", "3")
    assert rc == 0
    priv = tmp_path / "p.tgeb"
    rc, _ = run_cli(capsys, "privatize", "--in", str(emb), "--out", str(priv),
                    "--ledger", str(tmp_path / "l.jsonl"), "--budget-epsilon", "1.0")
    assert rc == 3 and not priv.exists()
    rc, _ = run_cli(capsys, "privatize", "--in", str(emb), "--out", str(priv))
    assert rc == 0 and np.all(np.linalg.norm(read_tgeb(priv).features, axis=1) > 0)
    rc, out = run_cli(capsys, "diagnose", "compactness", "--embeddings", str(emb))
    assert rc == 0 and "Q" in json.loads(out)


def test_cli_error_exit_code(tmp_path, capsys):
    np.savetxt(tmp_path / "z.csv", np.zeros((2, 3)), delimiter=",")
    rc = main(["index", "build", "--embeddings", str(tmp_path / "z.csv"),
               "--out", str(tmp_path / "x.tgix")])
    assert rc == 2
    assert "error" in capsys.readouterr().err
