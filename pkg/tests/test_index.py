import math

import numpy as np
import pytest

from topoguard import index as gindex
from topoguard.accountant import PrivacyLedger
from topoguard.dp import DpParams
from topoguard.embeddings import EmbeddingBatch
from topoguard.errors import DegenerateInput, InvalidEvalSetup


def brute_force(V, ids, q, K):
    """Plain scan: sort by (dissimilarity, id)."""
    Vn = V / np.linalg.norm(V, axis=1, keepdims=True)
    qn = q / np.linalg.norm(q)
    scored = sorted((1.0 - float(Vn[i] @ qn), int(ids[i])) for i in range(len(V)))
    return [s[1] for s in scored[:K]]


def test_single_entry_index():
    idx = gindex.build(np.array([[1.0, 2.0, 3.0]]))
    r = gindex.query(idx, np.array([-1.0, 0.5, 0.0]), K=5)
    assert list(r.ids) == [0]


def test_duplicates_retained():
    v = np.array([1.0, 1.0])
    idx = gindex.build(np.vstack([v, v, [0.0, 1.0]]), ids=[7, 3, 9])
    r = gindex.query(idx, v, K=2)
    assert list(r.ids) == [3, 7]  # tie broken by smaller id
    assert np.allclose(r.dissimilarities, 0.0, atol=1e-12)


def test_dissimilarity_examples():
    idx = gindex.build(np.array([[0.0, 2.0]]))
    assert gindex.query(idx, [0.0, 5.0], 1).dissimilarities[0] == pytest.approx(0.0, abs=1e-12)
    assert gindex.query(idx, [3.0, 0.0], 1).dissimilarities[0] == pytest.approx(1.0, abs=1e-12)
    assert gindex.query(idx, [0.0, -1.0], 1).dissimilarities[0] == pytest.approx(2.0, abs=1e-12)


def test_zero_vectors_rejected():
    with pytest.raises(DegenerateInput, match="id 5"):
        gindex.build(np.array([[1.0, 0.0], [0.0, 0.0]]), ids=[4, 5])
    idx = gindex.build(np.eye(2))
    with pytest.raises(DegenerateInput):
        gindex.query(idx, np.zeros(2), 1)


def test_exact_matches_brute_force_1000_trials():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        d = int(rng.integers(1, 9))
        V = rng.normal(size=(n, d))
        if rng.random() < 0.3:
            V = np.round(V)  # exact ties
            V[np.all(V == 0, axis=1)] = 1.0
        ids = rng.permutation(10 * n)[:n]
        q = rng.normal(size=d)
        if not np.any(q):
            q[0] = 1.0
        K = int(rng.integers(1, 20))
        idx = gindex.build(V, ids=ids)
        r = gindex.query(idx, q, K)
        assert list(r.ids) == brute_force(V, ids, q, K)
        assert np.all(np.diff(r.dissimilarities) >= 0)
        assert np.all((r.dissimilarities >= 0) & (r.dissimilarities <= 2))


def test_approximate_recall_small():
    rng = np.random.default_rng(1)
    centers = rng.normal(size=(20, 16)) * 3
    X = centers[rng.integers(0, 20, 2000)] + rng.normal(size=(2000, 16))
    approx = gindex.build(X, "graph-approximate")
    exact = gindex.build(X)
    assert gindex.recall_at_k(approx, exact, X[:100] + 0.01, 10) >= 0.95


def test_index_file_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 8))
    for mode in ("exact", "graph-approximate"):
        a, b = tmp_path / f"a_{mode}.tgix", tmp_path / f"b_{mode}.tgix"
        gindex.build(X, mode, gindex.GraphParams(seed=3)).save(a)
        gindex.build(X, mode, gindex.GraphParams(seed=3)).save(b)
        assert a.read_bytes() == b.read_bytes()
        loaded = gindex.GalleryIndex.load(a)
        q = rng.normal(size=8)
        assert list(gindex.query(loaded, q, 5).ids) == list(
            gindex.query(gindex.build(X, mode, gindex.GraphParams(seed=3)), q, 5).ids)


def test_private_query():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 6))
    idx = gindex.build(X)
    q = X[4] * 0.1  # inside the clip ball
    dp0 = DpParams.calibrated(1.0, math.inf, 1e-5)
    r = gindex.private_query(idx, q, 5, dp0, PrivacyLedger())
    assert list(r.ids) == list(gindex.query(idx, q, 5).ids)
    dp = DpParams.calibrated(1.0, 2.0, 1e-5)
    led = PrivacyLedger(budget_epsilon=1.0)
    ref = gindex.private_query(idx, q, 5, dp, led)
    assert isinstance(ref, gindex.QueryRefusal)
    assert led.records == [] and ref.epsilon_total == 0.0


def labelled(X, labels):
    return EmbeddingBatch(np.asarray(X, float), np.asarray(labels))


def test_evaluate_self_match():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 5))
    y = np.repeat(np.arange(10), 3)
    idx = gindex.build(labelled(X, y))
    m = gindex.evaluate(idx, labelled(X, y), K=1, query_ids=np.arange(30), exclude_self=False)
    assert m["rank1"] == 1.0


def test_ap_and_minp_examples():
    match = np.zeros(10, bool)
    match[1] = True
    assert gindex.average_precision(match) == 0.5
    for r in range(1, 11):
        m = np.zeros(10, bool)
        m[r - 1] = True
        assert gindex.inverse_negative_penalty(m) == pytest.approx(1.0 / r)
    # evaluate: correct item at rank 2 of 10
    G = np.array([[math.cos(a), math.sin(a)] for a in np.linspace(0, 1, 10)])
    labels = np.arange(10) + 100
    labels[1] = 0
    idx = gindex.build(labelled(G, labels))
    m = gindex.evaluate(idx, labelled([[1.0, 0.0]], [0]), K=1)
    assert m["mAP"] == 0.5 and m["rank1"] == 0.0


def test_sole_gallery_item_metrics_are_perfect():
    rng = np.random.default_rng(5)
    C = rng.normal(size=(20, 8)) * 10
    idx = gindex.build(labelled(C, np.arange(20)))
    m = gindex.evaluate(idx, labelled(C + rng.normal(size=C.shape) * 0.01, np.arange(20)), 5)
    assert m["rank1"] == m["mAP"] == m["mINP"] == 1.0


def test_evaluate_errors():
    idx = gindex.build(labelled(np.eye(3), [0, 1, 2]))
    with pytest.raises(InvalidEvalSetup):
        gindex.evaluate(idx, labelled([[1.0, 0, 0]], [9]))
    with pytest.raises(InvalidEvalSetup):
        gindex.evaluate(idx, labelled([[1.0, 0, 0]], [0]), query_ids=[0])
    with pytest.raises(InvalidEvalSetup):
        gindex.evaluate(gindex.build(np.eye(3)), labelled([[1.0, 0, 0]], [0]))


def test_metrics_in_unit_interval():
    rng = np.random.default_rng(6)
    for _ in range(20):
        y = rng.integers(0, 5, 40)
        X = rng.normal(size=(40, 4))
        m = gindex.evaluate(gindex.build(labelled(X, y)), labelled(X[:10], y[:10]), 5,
                            query_ids=np.arange(10)) if all(
            (y == y[i]).sum() > 1 for i in range(10)) else None
        if m:
            assert all(0 <= m[k] <= 1 for k in ("rank1", "mAP", "mINP", "rank5"))
