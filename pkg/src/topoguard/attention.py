"""Geometry-conditioned single-head graph attention over camera nodes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera_graph import CameraGraph, row_normalize
from .errors import InvalidInput, NumericOverflow


@dataclass
class AttentionParams:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    Theta: np.ndarray
    tau_b: float = 1.0
    affinity_floor: float = 1e-9

    def __post_init__(self):
        for name in ("W_q", "W_k", "W_v", "Theta"):
            M = np.asarray(getattr(self, name), dtype=np.float64)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise InvalidInput(f"{name} must be a square matrix, got shape {M.shape}")
            if not np.all(np.isfinite(M)):
                raise InvalidInput(f"{name} has non-finite entries")
            setattr(self, name, M)
        d = self.W_q.shape[0]
        if any(getattr(self, n).shape != (d, d) for n in ("W_k", "W_v", "Theta")):
            raise InvalidInput("attention matrices must share one dimension")
        if self.tau_b <= 0 or self.affinity_floor <= 0:
            raise InvalidInput("tau_b and affinity_floor must be positive")

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, *, scale: float = 1.0,
               normalize_value: bool = True, tau_b: float = 1.0) -> "AttentionParams":
        """Gaussian init with 1/sqrt(d) scaling; W_v spectrally normalized to 1."""
        def draw():
            return rng.normal(scale=scale / np.sqrt(d), size=(d, d))
        W_v = draw()
        if normalize_value:
            W_v = spectral_normalize(W_v, 1.0)
        return cls(W_q=draw(), W_k=draw(), W_v=W_v, Theta=draw(), tau_b=tau_b)

    def to_dict(self) -> dict:
        d = self.dim
        return {
            "dim": d,
            "W_q": self.W_q.reshape(-1).tolist(),
            "W_k": self.W_k.reshape(-1).tolist(),
            "W_v": self.W_v.reshape(-1).tolist(),
            "Theta": self.Theta.reshape(-1).tolist(),
            "tau_b": self.tau_b,
            "affinity_floor": self.affinity_floor,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AttentionParams":
        d = int(doc["dim"])
        mats = {k: np.asarray(doc[k], dtype=np.float64).reshape(d, d)
                for k in ("W_q", "W_k", "W_v", "Theta")}
        return cls(**mats, tau_b=float(doc.get("tau_b", 1.0)),
                   affinity_floor=float(doc.get("affinity_floor", 1e-9)))

    @classmethod
    def load(cls, path) -> "AttentionParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_features(X, n: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInput(f"node features must be N x d, got shape {X.shape}")
    if n is not None and X.shape[0] != n:
        raise InvalidInput(f"feature rows ({X.shape[0]}) do not match graph nodes ({n})")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("node features must be finite")
    return X


def compute_context(X, graph: CameraGraph | np.ndarray, Theta) -> np.ndarray:
    """C = S X Theta^T with S the L1 row-normalized affinity."""
    A = graph.affinity if isinstance(graph, CameraGraph) else np.asarray(graph)
    X = _check_features(X, A.shape[0])
    Theta = np.asarray(Theta, dtype=np.float64)
    if Theta.shape != (X.shape[1], X.shape[1]):
        raise InvalidInput(f"Theta must be {X.shape[1]}x{X.shape[1]}, got {Theta.shape}")
    return row_normalize(A) @ X @ Theta.T


def geometry_bias(graph: CameraGraph | np.ndarray, tau_b: float = 1.0,
                  floor: float = 1e-9) -> np.ndarray:
    A = graph.affinity if isinstance(graph, CameraGraph) else np.asarray(graph, dtype=np.float64)
    return tau_b * np.log(np.maximum(A, floor))


def row_softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericOverflow("attention logits are not finite; rescale the inputs")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention_logits(X, C, params: AttentionParams, B_geom) -> np.ndarray:
    X = _check_features(X)
    C = np.asarray(C, dtype=np.float64)
    if C.shape != X.shape:
        raise InvalidInput(f"context shape {C.shape} does not match features {X.shape}")
    d = X.shape[1]
    with np.errstate(over="ignore", invalid="ignore"):
        return (X @ params.W_q) @ (C @ params.W_k).T / np.sqrt(d) + B_geom


def attention_matrix(X, C, params: AttentionParams, B_geom) -> np.ndarray:
    """Row-softmax of the scaled query/key scores plus the geometry bias."""
    return row_softmax(attention_logits(X, C, params, B_geom))


def refine(X, attn, W_v) -> np.ndarray:
    """Residual update ``attn (X W_v) + X``."""
    X = _check_features(X)
    attn = np.asarray(attn, dtype=np.float64)
    W_v = np.asarray(W_v, dtype=np.float64)
    if attn.shape != (X.shape[0], X.shape[0]) or W_v.shape != (X.shape[1], X.shape[1]):
        raise InvalidInput("attention / value shapes do not match the features")
    return attn @ (X @ W_v) + X


def geo_attention_forward(X, graph: CameraGraph, params: AttentionParams):
    """Full pass: context, bias, attention, refined features.  Returns (X_hat, attn)."""
    C = compute_context(X, graph, params.Theta)
    B = geometry_bias(graph, params.tau_b, params.affinity_floor)
    attn = attention_matrix(X, C, params, B)
    return refine(X, attn, params.W_v), attn


def spectral_norm(M) -> float:
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def spectral_normalize(W, target: float = 1.0) -> np.ndarray:
    """Scale W down (never up) so that its spectral norm is at most ``target``."""
    W = np.asarray(W, dtype=np.float64)
    s = spectral_norm(W)
    if s <= target or s == 0:
        return W.copy()
    out = W * (target / s)
    # guard the last ulp so the postcondition holds strictly
    s2 = spectral_norm(out)
    if s2 > target:
        out *= target / s2
    return out


def power_iteration_spectral_norm(M, iters: int = 10_000, tol: float = 1e-12,
                                  seed: int = 0) -> float:
    """Largest singular value by power iteration on M^T M."""
    M = np.asarray(M, dtype=np.float64)
    if not np.any(M):
        return 0.0
    v = np.random.default_rng(seed).normal(size=M.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = np.sqrt(nw)
        if abs(new - est) <= tol * max(new, 1.0):
            est = new
            break
        est = new
    return float(np.linalg.norm(M @ v))


def power_iteration_spectral_radius(M, iters: int = 10_000, tol: float = 1e-12,
                                    seed: int = 0) -> float:
    """Dominant eigenvalue modulus of a nonnegative square matrix.

    Starts from a positive vector, so for primitive matrices the iterate
    converges to the Perron vector.
    """
    M = np.asarray(M, dtype=np.float64)
    v = np.random.default_rng(seed).uniform(0.5, 1.5, size=M.shape[0])
    v /= np.abs(v).sum()
    est = 0.0
    for _ in range(iters):
        w = M @ v
        new = np.abs(w).sum()
        if new == 0:
            return 0.0
        v = w / new
        if abs(new - est) <= tol:
            return float(new)
        est = new
    return float(est)
