"""Top-K gallery retrieval by cosine dissimilarity, exact or graph-approximate."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _hnsw
from .accountant import PrivacyLedger
from .dp import DpParams, privatize
from .embeddings import EmbeddingBatch
from .errors import DegenerateInput, InvalidEvalSetup, InvalidInput, InvalidParameter

INDEX_MAGIC = b"TGIX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class GraphParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.M < 2 or self.ef_construction < 1 or self.ef_search < 1:
            raise InvalidParameter("graph parameters must be positive (M >= 2)")


@dataclass
class QueryResult:
    ids: np.ndarray
    dissimilarities: np.ndarray

    def __len__(self) -> int:
        return self.ids.size

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.dissimilarities)]

    def to_dict(self) -> dict:
        return {"results": [{"id": i, "dissimilarity": d} for i, d in self.pairs()]}


@dataclass
class QueryRefusal:
    epsilon_total: float
    delta_total: float
    reason: str

    def to_dict(self) -> dict:
        return {"refused": True, "epsilon_total": self.epsilon_total,
                "delta_total": self.delta_total, "reason": self.reason}


def _normalize_rows(X, ids):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise DegenerateInput(f"zero-norm embedding rejected (id {int(ids[bad[0]])})")
    return X / norms[:, None]


@dataclass
class GalleryIndex:
    dim: int
    ids: np.ndarray
    vectors: np.ndarray
    mode: str = "exact"
    labels: Optional[np.ndarray] = None
    params: GraphParams = field(default_factory=GraphParams)
    metadata: dict = field(default_factory=dict)
    # graph state (approximate mode)
    _data32: Optional[np.ndarray] = field(default=None, repr=False)
    _nbr0: Optional[np.ndarray] = field(default=None, repr=False)
    _cnt0: Optional[np.ndarray] = field(default=None, repr=False)
    _nbrU: Optional[np.ndarray] = field(default=None, repr=False)
    _cntU: Optional[np.ndarray] = field(default=None, repr=False)
    _entry: int = 0
    _top: int = 0

    def __len__(self) -> int:
        return self.ids.size

    @property
    def approximate(self) -> bool:
        return self.mode == "graph-approximate"

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """Deterministic binary layout: header JSON then raw little-endian arrays."""
        arrays = {"ids": self.ids.astype("<i8"), "vectors": self.vectors.astype("<f8")}
        if self.labels is not None:
            arrays["labels"] = self.labels.astype("<i8")
        if self.approximate:
            arrays.update(nbr0=self._nbr0.astype("<i8"), cnt0=self._cnt0.astype("<i8"),
                          nbrU=self._nbrU.astype("<i8"), cntU=self._cntU.astype("<i8"))
        header = {
            "dim": self.dim, "mode": self.mode, "entry": self._entry, "top": self._top,
            "params": vars(self.params), "metadata": self.metadata,
            "arrays": {k: [list(v.shape), v.dtype.str] for k, v in arrays.items()},
        }
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC + struct.pack("<II", INDEX_VERSION, len(hb)) + hb)
            for k in sorted(arrays):
                fh.write(np.ascontiguousarray(arrays[k]).tobytes())

    @classmethod
    def load(cls, path) -> "GalleryIndex":
        raw = Path(path).read_bytes()
        if raw[:4] != INDEX_MAGIC:
            raise InvalidInput("not a topoguard index file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != INDEX_VERSION:
            raise InvalidInput(f"unsupported index version {version}")
        header = json.loads(raw[12:12 + hlen])
        off = 12 + hlen
        arrays = {}
        for k in sorted(header["arrays"]):
            shape, dt = header["arrays"][k]
            count = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape)
            off += a.nbytes
            arrays[k] = a.copy()
        idx = cls(dim=header["dim"], ids=arrays["ids"].astype(np.int64),
                  vectors=arrays["vectors"].astype(np.float64), mode=header["mode"],
                  labels=arrays.get("labels"), params=GraphParams(**header["params"]),
                  metadata=header["metadata"])
        if idx.approximate:
            idx._data32 = idx.vectors.astype(np.float32)
            idx._nbr0 = arrays["nbr0"].astype(np.int64)
            idx._cnt0 = arrays["cnt0"].astype(np.int64)
            idx._nbrU = arrays["nbrU"].astype(np.int64)
            idx._cntU = arrays["cntU"].astype(np.int64)
            idx._entry = header["entry"]
            idx._top = header["top"]
        return idx


def build(embeddings: EmbeddingBatch | np.ndarray, mode: str = "exact",
          params: GraphParams | None = None, ids=None,
          dp_params: DpParams | None = None, created: float | None = None) -> GalleryIndex:
    """Normalize and store the gallery; build the proximity graph in approximate mode.

    ``created`` is stored verbatim (default 0.0) so that a fixed seed yields a
    byte-identical index file; callers wanting wall-clock provenance pass it.
    """
    if isinstance(embeddings, EmbeddingBatch):
        X, labels, prov = embeddings.features, embeddings.labels, embeddings.provenance
    else:
        X, labels, prov = np.asarray(embeddings, dtype=np.float64), None, {}
    X = np.atleast_2d(X)
    if X.shape[0] < 1:
        raise InvalidInput("cannot build an index over zero embeddings")
    ids = np.arange(X.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, np.int64)
    if np.unique(ids).size != ids.size:
        raise InvalidInput("gallery ids must be unique")
    if mode not in ("exact", "graph-approximate"):
        raise InvalidParameter(f"unknown index mode {mode!r}")
    params = params or GraphParams()
    V = _normalize_rows(X, ids)
    meta = {"created": 0.0 if created is None else float(created),
            "count": int(X.shape[0])}
    if dp_params is not None:
        meta["privatization_hash"] = dp_params.digest()
    elif "privatization" in prov:
        meta["privatization_hash"] = hashlib.sha256(
            json.dumps(prov["privatization"], sort_keys=True).encode()).hexdigest()
    idx = GalleryIndex(dim=X.shape[1], ids=ids, vectors=V, mode=mode, labels=labels,
                       params=params, metadata=meta)
    if mode == "graph-approximate":
        _build_graph(idx)
    return idx


def _build_graph(idx: GalleryIndex) -> None:
    n = len(idx)
    p = idx.params
    rng = np.random.default_rng(p.seed)
    mL = 1.0 / math.log(p.M)
    u = rng.random(n)
    levels = np.floor(-np.log(np.maximum(u, 1e-300)) * mL).astype(np.int64)
    max_level = max(int(levels.max()), 1)
    data32 = np.ascontiguousarray(idx.vectors.astype(np.float32))
    nbr0 = np.full((n, 2 * p.M), -1, np.int64)
    cnt0 = np.zeros(n, np.int64)
    nbrU = np.full((n, max_level, p.M), -1, np.int64)
    cntU = np.zeros((n, max_level), np.int64)
    entry, top = _hnsw.build_graph(data32, levels, p.M, p.ef_construction,
                                   nbr0, cnt0, nbrU, cntU)
    idx._data32, idx._nbr0, idx._cnt0, idx._nbrU, idx._cntU = data32, nbr0, cnt0, nbrU, cntU
    idx._entry, idx._top = int(entry), int(top)


def _exact_topk(V, ids, q, K):
    d = 1.0 - V @ q
    K = min(K, d.size)
    if K < d.size:
        kth = np.partition(d, K - 1)[K - 1]
        cand = np.flatnonzero(d <= kth)
    else:
        cand = np.arange(d.size)
    order = np.lexsort((ids[cand], d[cand]))[:K]
    sel = cand[order]
    return ids[sel], d[sel]


class _Visited:
    """Per-thread visit-mark buffer for graph queries."""

    def __init__(self, n):
        self.marks = np.zeros(n, np.int64)
        self.tag = 0


def query(index: GalleryIndex, q, K: int = 10, ef_search: int | None = None,
          exact: bool | None = None, _visited: _Visited | None = None) -> QueryResult:
    if K < 1:
        raise InvalidParameter("K must be >= 1")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != index.dim:
        raise InvalidInput(f"query has dimension {q.size}, index has {index.dim}")
    nq = np.linalg.norm(q)
    if not nq > 0:
        raise DegenerateInput("zero query vector")
    q = q / nq
    use_exact = (not index.approximate) if exact is None else exact
    if use_exact:
        ids, d = _exact_topk(index.vectors, index.ids, q, K)
        return QueryResult(ids, np.clip(d, 0.0, 2.0))
    vis = _visited or _Visited(len(index))
    ef = index.params.ef_search if ef_search is None else ef_search
    dd, ii, vis.tag = _hnsw.knn_query(index._data32, q.astype(np.float32), K, ef,
                                      index._entry, index._top, index._nbr0, index._cnt0,
                                      index._nbrU, index._cntU, vis.marks, vis.tag)
    # re-score in float64 so ties and values match the exact path
    d64 = 1.0 - index.vectors[ii] @ q
    order = np.lexsort((index.ids[ii], d64))
    return QueryResult(index.ids[ii][order], np.clip(d64[order], 0.0, 2.0))


def private_query(index: GalleryIndex, q, K: int, dp: DpParams, ledger: PrivacyLedger,
                  counter: int = 0, stream: int = 0, **kw):
    """Privatize the query, charge the ledger, then search; refusal leaks nothing."""
    q_priv = privatize(q, dp, stream=stream, counter=counter)
    decision = ledger.try_spend(dp.epsilon, dp.delta, "query")
    if not decision.accepted:
        return QueryRefusal(decision.epsilon_total, decision.delta_total, decision.reason)
    return query(index, q_priv, K, **kw)


# ---------------------------------------------------------------- evaluation

def _rank_metrics(match_sorted: np.ndarray, ks) -> tuple[dict, float, float]:
    hits = np.flatnonzero(match_sorted)
    cmc = {k: float(hits.size > 0 and hits[0] < k) for k in ks}
    precisions = (np.arange(hits.size) + 1) / (hits + 1)
    ap = float(precisions.mean())
    inp = float(hits.size / (hits[-1] + 1))
    return cmc, ap, inp


def average_precision(match_sorted) -> float:
    return _rank_metrics(np.asarray(match_sorted, bool), (1,))[1]


def inverse_negative_penalty(match_sorted) -> float:
    return _rank_metrics(np.asarray(match_sorted, bool), (1,))[2]


def evaluate(index: GalleryIndex, queries: EmbeddingBatch, K: int = 10,
             query_ids=None, exclude_self: bool = True) -> dict:
    """Rank-1, Rank-K, mAP and mINP over identity labels.

    Every query is ranked against the full stored gallery (exhaustive cosine
    ranking).  With ``query_ids`` and ``exclude_self`` a query never matches
    the gallery entry that carries its own id.
    """
    if index.labels is None or queries.labels is None:
        raise InvalidEvalSetup("evaluation needs labels on both gallery and queries")
    glabels = index.labels
    present = set(np.unique(glabels).tolist())
    Q = _normalize_rows(queries.features, np.arange(len(queries)))
    D = 1.0 - Q @ index.vectors.T
    ks = sorted({1, int(K)})
    cmc_sum = {k: 0.0 for k in ks}
    aps, inps = [], []
    for r in range(len(queries)):
        lab = int(queries.labels[r])
        if lab not in present:
            raise InvalidEvalSetup(f"query label {lab} does not appear in the gallery")
        keep = np.ones(len(index), bool)
        if exclude_self and query_ids is not None:
            keep &= index.ids != int(query_ids[r])
        ids = index.ids[keep]
        d = D[r, keep]
        order = np.lexsort((ids, d))
        match = glabels[keep][order] == lab
        if not match.any():
            raise InvalidEvalSetup(f"query {r} has no gallery positive after self-exclusion")
        cmc, ap, inp = _rank_metrics(match, ks)
        for k in ks:
            cmc_sum[k] += cmc[k]
        aps.append(ap)
        inps.append(inp)
    n = len(queries)
    out = {"rank1": cmc_sum[1] / n, "mAP": float(np.mean(aps)), "mINP": float(np.mean(inps)),
           "queries": n}
    out[f"rank{K}"] = cmc_sum[ks[-1]] / n
    return out


def recall_at_k(approx: GalleryIndex, exact: GalleryIndex, queries: np.ndarray, K: int = 10,
                ef_search: int | None = None) -> float:
    vis = _Visited(len(approx))
    hit = 0
    for q in np.atleast_2d(queries):
        a = query(approx, q, K, ef_search=ef_search, _visited=vis).ids
        e = query(exact, q, K).ids
        hit += np.intersect1d(a, e).size
    return hit / (K * len(np.atleast_2d(queries)))
