"""Temporal graph message passing over camera nodes.

One step takes node features observed at lag ``tau``, computes pairwise
messages with a small ReLU perceptron, mean-aggregates them per node together
with the node prior, mixes the aggregates with geometry-conditioned
attention, and adds the residual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import (AttentionParams, attention_matrix, compute_context,
                        geometry_bias, spectral_norm, spectral_normalize)
from .camera_graph import CameraGraph, neighborhoods
from .errors import InvalidInput, InvalidParameter

EDGE_DIM = 2


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class Mlp:
    """Two-layer perceptron ``W2 relu(W1 x + b1) + b2``."""

    W1: np.ndarray
    W2: np.ndarray
    b1: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W2.shape[1] != self.W1.shape[0]:
            raise InvalidInput(f"incompatible layer shapes {self.W1.shape}, {self.W2.shape}")
        if self.W1.shape[0] < 1:
            raise InvalidInput("hidden width must be >= 1")
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))):
            raise InvalidInput("perceptron weights must be finite")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x @ self.W1.T
        if self.b1 is not None:
            h = h + self.b1
        y = _relu(h) @ self.W2.T
        if self.b2 is not None:
            y = y + self.b2
        return y

    def lipschitz(self, cols: slice | None = None) -> float:
        """Product of layer spectral norms, optionally restricted to input columns."""
        W1 = self.W1 if cols is None else self.W1[:, cols]
        return spectral_norm(self.W2) * spectral_norm(W1)

    def to_dict(self) -> dict:
        out = {"W1": self.W1.tolist(), "W2": self.W2.tolist()}
        if self.b1 is not None:
            out["b1"] = np.asarray(self.b1).tolist()
        if self.b2 is not None:
            out["b2"] = np.asarray(self.b2).tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        b1 = doc.get("b1")
        b2 = doc.get("b2")
        return cls(W1=doc["W1"], W2=doc["W2"],
                   b1=None if b1 is None else np.asarray(b1, dtype=np.float64),
                   b2=None if b2 is None else np.asarray(b2, dtype=np.float64))


@dataclass
class TgnConfig:
    message: Mlp
    aggregate: Mlp
    tau: float = 1.0
    use_edge_descriptor: bool = True
    neighbor_threshold: float = 0.05

    def __post_init__(self):
        if not (self.tau > 0):
            raise InvalidParameter("tau must be positive")
        d = self.aggregate.out_dim
        want = 2 * d + (EDGE_DIM if self.use_edge_descriptor else 0)
        if self.message.in_dim != want or self.message.out_dim != d:
            raise InvalidInput(
                f"message perceptron must map {want} -> {d}, got "
                f"{self.message.in_dim} -> {self.message.out_dim}")
        if self.aggregate.in_dim != 2 * d:
            raise InvalidInput(f"aggregate perceptron must take {2 * d} inputs")

    @property
    def dim(self) -> int:
        return self.aggregate.out_dim

    @classmethod
    def random(cls, d: int, hidden: int, rng: np.random.Generator, *, scale: float = 1.0,
               tau: float = 1.0, use_edge_descriptor: bool = True,
               bias: bool = False) -> "TgnConfig":
        m_in = 2 * d + (EDGE_DIM if use_edge_descriptor else 0)

        def layer(o, i):
            return rng.normal(scale=scale / np.sqrt(i), size=(o, i))

        def b(n):
            return rng.normal(scale=0.1, size=n) if bias else None

        msg = Mlp(layer(hidden, m_in), layer(d, hidden), b(hidden), b(d))
        agg = Mlp(layer(hidden, 2 * d), layer(d, hidden), b(hidden), b(d))
        return cls(message=msg, aggregate=agg, tau=tau, use_edge_descriptor=use_edge_descriptor)

    @classmethod
    def zeros(cls, d: int, hidden: int = 1, use_edge_descriptor: bool = True) -> "TgnConfig":
        m_in = 2 * d + (EDGE_DIM if use_edge_descriptor else 0)
        return cls(message=Mlp(np.zeros((hidden, m_in)), np.zeros((d, hidden))),
                   aggregate=Mlp(np.zeros((hidden, 2 * d)), np.zeros((d, hidden))),
                   use_edge_descriptor=use_edge_descriptor)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "use_edge_descriptor": self.use_edge_descriptor,
                "neighbor_threshold": self.neighbor_threshold,
                "message": self.message.to_dict(), "aggregate": self.aggregate.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TgnConfig":
        return cls(message=Mlp.from_dict(doc["message"]),
                   aggregate=Mlp.from_dict(doc["aggregate"]),
                   tau=float(doc.get("tau", 1.0)),
                   use_edge_descriptor=bool(doc.get("use_edge_descriptor", True)),
                   neighbor_threshold=float(doc.get("neighbor_threshold", 0.05)))

    @classmethod
    def load(cls, path) -> "TgnConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TemporalSnapshot:
    features: np.ndarray
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or not np.all(np.isfinite(self.features)):
            raise InvalidInput("snapshot features must be a finite N x d matrix")
        n = self.features.shape[0]
        if self.timestamps is None:
            self.timestamps = np.zeros(n)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if self.timestamps.shape != (n,) or not np.all(np.isfinite(self.timestamps)):
            raise InvalidInput("one finite timestamp per node is required")

    def check_window(self, tau: float) -> None:
        anchor = self.timestamps.max()
        if np.any(anchor - self.timestamps > tau):
            raise InvalidInput(f"snapshot timestamps span more than tau={tau}s")


def message(src, dst, edge, cfg: TgnConfig) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    parts = [src, dst]
    if cfg.use_edge_descriptor:
        edge = np.asarray(edge, dtype=np.float64)
        if edge.shape[-1] != EDGE_DIM:
            raise InvalidInput("edge descriptor must be (affinity, dt)")
        parts.append(edge)
    if src.shape[-1] != cfg.dim or dst.shape[-1] != cfg.dim:
        raise InvalidInput(f"node vectors must have dimension {cfg.dim}")
    return cfg.message(np.concatenate(parts, axis=-1))


def aggregate(messages: Sequence[np.ndarray], prior, cfg: TgnConfig) -> np.ndarray:
    """``phi_a(mean(messages), prior)``; an empty neighborhood contributes zeros."""
    prior = np.asarray(prior, dtype=np.float64)
    if len(messages) == 0:
        mbar = np.zeros(cfg.dim)
    else:
        mbar = np.mean(np.asarray(messages, dtype=np.float64), axis=0)
    return cfg.aggregate(np.concatenate([mbar, prior]))


def aggregate_all(F: np.ndarray, graph: CameraGraph, cfg: TgnConfig,
                  timestamps: np.ndarray | None = None) -> np.ndarray:
    """Per-node aggregates stacked into an N x d matrix."""
    n, d = F.shape
    if timestamps is None:
        timestamps = np.zeros(n)
    A = graph.affinity
    out = np.empty((n, d))
    for i, nbrs in enumerate(neighborhoods(graph, cfg.neighbor_threshold)):
        if nbrs.size:
            src = np.broadcast_to(F[i], (nbrs.size, d))
            edge = np.stack([A[i, nbrs], timestamps[nbrs] - timestamps[i]], axis=1)
            msgs = message(src, F[nbrs], edge, cfg)
            mbar = msgs.mean(axis=0)
        else:
            mbar = np.zeros(d)
        out[i] = cfg.aggregate(np.concatenate([mbar, F[i]]))
    return out


def tgn_step(snapshot: TemporalSnapshot, graph: CameraGraph, attn_params: AttentionParams,
             cfg: TgnConfig, *, return_attention: bool = False):
    """``attn (Agg W_v) + F`` for the lagged snapshot ``F``."""
    F = snapshot.features
    if F.shape[0] != graph.n:
        raise InvalidInput(f"snapshot has {F.shape[0]} nodes, graph has {graph.n}")
    if F.shape[1] != cfg.dim or attn_params.dim != cfg.dim:
        raise InvalidInput("feature, TGN and attention dimensions disagree")
    W_v = spectral_normalize(attn_params.W_v, 1.0)
    agg = aggregate_all(F, graph, cfg, snapshot.timestamps)
    C = compute_context(F, graph, attn_params.Theta)
    B = geometry_bias(graph, attn_params.tau_b, attn_params.affinity_floor)
    attn = attention_matrix(F, C, attn_params, B)
    out = attn @ (agg @ W_v) + F
    if return_attention:
        return out, attn
    return out


@dataclass(frozen=True)
class StabilityConstants:
    L_m: float
    L_a: float
    L_a_prior: float
    attention_norm: float

    @property
    def C(self) -> float:
        return 1.0 + max(1.0, self.attention_norm) * (self.L_a * self.L_m + self.L_a_prior)


def stability_constants(graph: CameraGraph, cfg: TgnConfig,
                        attn: np.ndarray | None = None) -> StabilityConstants:
    """Layer-norm Lipschitz constants bounding one TGN step.

    ``L_m`` bounds the stacked mean-message matrix against the features:
    per message ``|m_ij| <= L_phi |(F_i, F_j)|`` and the mean over
    neighborhoods distributes ``|F_j|^2`` with weight equal to the column sums
    of the row-normalized neighborhood indicator, hence the ``sqrt(1 + c_max)``
    factor.  Valid for bias-free perceptrons without edge descriptors.
    ``attention_norm`` is the measured spectral norm of the attention matrix,
    which can exceed one for row-stochastic matrices.
    """
    d = cfg.dim
    L_phi = cfg.message.lipschitz(slice(0, 2 * d))
    n = graph.n
    S = np.zeros((n, n))
    for i, nbrs in enumerate(neighborhoods(graph, cfg.neighbor_threshold)):
        if nbrs.size:
            S[i, nbrs] = 1.0 / nbrs.size
    c_max = float(S.sum(axis=0).max()) if n else 0.0
    L_m = L_phi * np.sqrt(1.0 + c_max)
    W2 = spectral_norm(cfg.aggregate.W2)
    L_a = W2 * spectral_norm(cfg.aggregate.W1[:, :d])
    L_a_prior = W2 * spectral_norm(cfg.aggregate.W1[:, d:])
    a_norm = 1.0 if attn is None else spectral_norm(attn)
    return StabilityConstants(L_m=float(L_m), L_a=float(L_a), L_a_prior=float(L_a_prior),
                              attention_norm=a_norm)
