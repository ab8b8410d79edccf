"""Privacy audit and embedding diagnostics.

Membership inference, privacy/utility sweeps, cluster compactness,
gradient-weighted attention saliency and the PAC-Bayes risk bound.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import index as gindex
from .attention import AttentionParams, compute_context, geometry_bias, attention_matrix
from .camera_graph import CameraGraph
from .dp import DpParams, privatize_batch
from .embeddings import EmbeddingBatch
from .errors import InvalidInput, InvalidParameter
from .rng import derive_seed


# ---------------------------------------------------------------- membership inference

def mia_advantage(precision: float) -> float:
    if not 0.0 <= precision <= 1.0:
        raise InvalidParameter(f"precision must lie in [0, 1], got {precision}")
    return 2.0 * (precision - 0.5)


@dataclass
class MiaReport:
    attack_precision: float
    advantage: float
    epsilon_setting: float
    trial_count: int
    threshold: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.epsilon_setting):
            d["epsilon_setting"] = "inf"
        return d


def _best_threshold(scores: np.ndarray, is_member: np.ndarray) -> float:
    """Threshold on 'score <= t means member' maximizing training accuracy."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    m = is_member[order].astype(np.int64)
    # predicting the first k as members: correct = members among first k + nonmembers after
    tp = np.concatenate([[0], np.cumsum(m)])
    fn_neg = np.concatenate([[0], np.cumsum(1 - m)])
    correct = tp + ((1 - m).sum() - fn_neg)
    k = int(np.argmax(correct))
    if k == 0:
        return -np.inf
    if k == s.size:
        return np.inf
    return 0.5 * (s[k - 1] + s[k])


def run_mia_audit(members, nonmembers, dp: DpParams | None, seed: int = 0,
                  train_fraction: float = 0.5) -> MiaReport:
    """Threshold attack on the distance to the attacker-estimated member centroid.

    Both sets are released through ``dp`` (``None`` releases them raw), then
    split per seed into attacker-train and held-out halves.  The attacker
    estimates the member centroid from its training members, fits the
    accuracy-maximizing distance threshold, and is scored by held-out precision
    (a run with no predicted members scores 0.5, i.e. no advantage).
    """
    M = np.atleast_2d(np.asarray(members, dtype=np.float64))
    N = np.atleast_2d(np.asarray(nonmembers, dtype=np.float64))
    if M.size == 0 or N.size == 0:
        raise InvalidInput("member and nonmember sets must be nonempty")
    if M.shape[1] != N.shape[1]:
        raise InvalidInput(f"dimension mismatch: {M.shape[1]} vs {N.shape[1]}")
    if dp is not None:
        M = privatize_batch(M, dp, counter=seed, first_stream=0)
        N = privatize_batch(N, dp, counter=seed, first_stream=M.shape[0])
    rng = np.random.default_rng(derive_seed(seed, 0x4D4941))
    pm, pn = rng.permutation(len(M)), rng.permutation(len(N))
    km = max(1, int(round(train_fraction * len(M))))
    kn = max(1, int(round(train_fraction * len(N))))
    Mtr, Mte = M[pm[:km]], M[pm[km:]]
    Ntr, Nte = N[pn[:kn]], N[pn[kn:]]
    if len(Mte) == 0 or len(Nte) == 0:
        raise InvalidInput("too few samples for a held-out split")
    centroid = Mtr.mean(axis=0)
    score = lambda X: np.linalg.norm(X - centroid, axis=1)  # noqa: E731
    tr_scores = np.concatenate([score(Mtr), score(Ntr)])
    tr_member = np.concatenate([np.ones(len(Mtr), bool), np.zeros(len(Ntr), bool)])
    t = _best_threshold(tr_scores, tr_member)
    pred_m = score(Mte) <= t
    pred_n = score(Nte) <= t
    positives = int(pred_m.sum() + pred_n.sum())
    precision = 0.5 if positives == 0 else float(pred_m.sum() / positives)
    eps = dp.epsilon if dp is not None else math.inf
    return MiaReport(precision, mia_advantage(precision), eps, len(Mte) + len(Nte), float(t))


def separable_membership_data(n: int = 200, dim: int = 16, shift: float = 2.0, seed: int = 0):
    """Members and nonmembers with unit-variance noise; members are mean-shifted."""
    rng = np.random.default_rng(seed)
    direction = np.zeros(dim)
    direction[0] = 1.0
    members = rng.normal(size=(n, dim)) * 0.5 + shift * direction
    nonmembers = rng.normal(size=(n, dim)) * 0.5
    return members, nonmembers


# ---------------------------------------------------------------- privacy / utility sweep

def parse_eps_list(text: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok:
            out.append(math.inf if tok in ("inf", "infinity") else float(tok))
    return out


@dataclass
class SweepRow:
    epsilon: float
    sigma: float
    rank1_mean: float
    rank1_std: float
    mAP_mean: float
    mAP_std: float
    mINP_mean: float
    seeds: int
    rank1_runs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.epsilon):
            d["epsilon"] = "inf"
        return d


def privacy_utility_sweep(gallery: EmbeddingBatch, queries: EmbeddingBatch,
                          eps_list: Sequence[float], dp_base: DpParams, seeds: int = 5,
                          K: int = 10) -> list[SweepRow]:
    """Rank-1 / mAP / mINP per epsilon, averaged over ``seeds`` noise draws.

    Gallery rows use noise streams ``0..n-1`` and query rows continue from
    ``n``; the seed index selects the counter.  No ledger is charged.  An
    infinite epsilon releases the clipped vectors without noise; clipping only
    rescales rows, so that row is the plain evaluation.
    """
    if seeds < 1:
        raise InvalidParameter("seeds must be >= 1")
    rows = []
    for eps in eps_list:
        if math.isinf(eps):
            idx = gindex.build(gallery)
            m = gindex.evaluate(idx, queries, K)
            rows.append(SweepRow(eps, 0.0, m["rank1"], 0.0, m["mAP"], 0.0, m["mINP"], seeds,
                                 [m["rank1"]] * seeds))
            continue
        dp = DpParams.calibrated(dp_base.clip_radius_B, eps, dp_base.delta, dp_base.rng_seed)
        r1, ap, inp = [], [], []
        for r in range(seeds):
            G = privatize_batch(gallery.features, dp, counter=r)
            Q = privatize_batch(queries.features, dp, counter=r, first_stream=len(gallery))
            idx = gindex.build(gallery.with_features(G))
            m = gindex.evaluate(idx, queries.with_features(Q), K)
            r1.append(m["rank1"])
            ap.append(m["mAP"])
            inp.append(m["mINP"])
        rows.append(SweepRow(eps, dp.noise_sigma, float(np.mean(r1)), float(np.std(r1)),
                             float(np.mean(ap)), float(np.std(ap)), float(np.mean(inp)),
                             seeds, r1))
    return rows


def write_sweep(rows: Sequence[SweepRow], csv_path=None, json_path=None) -> None:
    cols = ["epsilon", "sigma", "rank1_mean", "rank1_std", "mAP_mean", "mAP_std",
            "mINP_mean", "seeds"]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                d = r.to_dict()
                w.writerow([d[c] for c in cols])
    if json_path is not None:
        Path(json_path).write_text(json.dumps([r.to_dict() for r in rows], indent=2))


# ---------------------------------------------------------------- compactness

@dataclass
class CompactnessReport:
    Q: float
    labels: np.ndarray
    intra_mean: np.ndarray
    nearest_gap: np.ndarray

    def to_dict(self) -> dict:
        return {"Q": self.Q, "clusters": [
            {"label": int(l), "intra_mean": float(a), "nearest_centroid_gap": float(g)}
            for l, a, g in zip(self.labels, self.intra_mean, self.nearest_gap)]}


def compactness(embeddings: EmbeddingBatch | np.ndarray, labels=None) -> CompactnessReport:
    """Mean over clusters of (mean distance to own centroid - nearest other centroid distance)."""
    if isinstance(embeddings, EmbeddingBatch):
        X, labels = embeddings.features, embeddings.labels
    else:
        X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if labels is None:
        raise InvalidInput("compactness needs labels")
    labels = np.asarray(labels).reshape(-1)
    uniq, inv = np.unique(labels, return_inverse=True)
    K = uniq.size
    if K < 2:
        raise InvalidInput("compactness needs at least two clusters")
    counts = np.bincount(inv, minlength=K).astype(np.float64)
    mu = np.zeros((K, X.shape[1]))
    np.add.at(mu, inv, X)
    mu /= counts[:, None]
    dist_own = np.linalg.norm(X - mu[inv], axis=1)
    intra = np.bincount(inv, weights=dist_own, minlength=K) / counts
    C = np.linalg.norm(mu[:, None, :] - mu[None, :, :], axis=2)
    np.fill_diagonal(C, np.inf)
    gap = C.min(axis=1)
    return CompactnessReport(float(np.mean(intra - gap)), uniq, intra, gap)


# ---------------------------------------------------------------- saliency

def attention_saliency(heads: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> np.ndarray:
    """ReLU of the sum over heads of (grad * A) / N^2."""
    if len(heads) != len(grads) or not heads:
        raise InvalidInput("need one gradient matrix per attention head")
    total = None
    for A, G in zip(heads, grads):
        A = np.asarray(A, dtype=np.float64)
        G = np.asarray(G, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or G.shape != A.shape:
            raise InvalidInput("attention and gradient matrices must be matching N x N")
        if total is not None and A.shape != total.shape:
            raise InvalidInput("all heads must share N")
        term = G * A / float(A.shape[0] ** 2)
        total = term if total is None else total + term
    return np.maximum(total, 0.0)


def retrieval_score_gradient(X, graph: CameraGraph, params: AttentionParams, row: int,
                             target, h: float = 1e-6):
    """Attention matrix and d y / d A by central differences.

    ``y(A) = cos((A X W_v + X)[row], target)``, the similarity between a refined
    query row and its top-1 gallery vector.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    C = compute_context(X, graph, params.Theta)
    A = attention_matrix(X, C, params, geometry_bias(graph, params.tau_b, params.affinity_floor))

    def y(Am):
        r = Am[row] @ X @ params.W_v + X[row]
        return float(r @ t / (np.linalg.norm(r) * np.linalg.norm(t)))

    G = np.zeros_like(A)
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            Ap = A.copy()
            Am = A.copy()
            Ap[i, j] += h
            Am[i, j] -= h
            G[i, j] = (y(Ap) - y(Am)) / (2 * h)
    return A, G


# ---------------------------------------------------------------- PAC-Bayes

def pac_bound(empirical_risk: float, kl: float, n: int, delta: float) -> float:
    """``R_hat + sqrt((KL + ln(2 sqrt(n) / delta)) / (2 n))``."""
    if not 0.0 <= empirical_risk <= 1.0:
        raise InvalidParameter("empirical risk must lie in [0, 1]")
    if not kl >= 0:
        raise InvalidParameter("KL must be nonnegative")
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    if not 0 < delta < 1:
        raise InvalidParameter("delta must lie in (0, 1)")
    return empirical_risk + math.sqrt((kl + math.log(2.0 * math.sqrt(n) / delta)) / (2.0 * n))
