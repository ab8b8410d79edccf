"""Dispersion-aware adaptive margins and the ACT identification/triplet losses.

Dissimilarity throughout is cosine dissimilarity ``1 - cos(u, v)``.  Losses
return ``(value, grad)`` where ``grad`` is taken w.r.t. the unnormalized
features.  Mined indices and margins are constants within a step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import (DegenerateInput, EmptyBatch, InvalidInput, InvalidParameter,
                     MissingIdentity, NoNegative, NoPositive)

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class ActConfig:
    gamma0: float = 0.4
    alpha: float = 0.2
    beta: float = 1.0
    scale_s: float = 30.0
    lambda_tri: float = 1.0

    def __post_init__(self):
        for name in ("gamma0", "alpha", "beta", "scale_s"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if not self.lambda_tri >= 0:
            raise InvalidParameter("lambda_tri must be nonnegative")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ActConfig":
        keys = ("gamma0", "alpha", "beta", "scale_s", "lambda_tri")
        return cls(**{k: float(doc[k]) for k in keys if k in doc})

    def to_dict(self) -> dict:
        return {"gamma0": self.gamma0, "alpha": self.alpha, "beta": self.beta,
                "scale_s": self.scale_s, "lambda_tri": self.lambda_tri}


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray
    prototypes: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise InvalidInput("features must be B x d with one label per row")
        if self.prototypes.ndim != 2 or self.prototypes.shape[1] != self.features.shape[1]:
            raise InvalidInput("prototypes must be Kc x d")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.prototypes)):
            raise InvalidInput("every label must index a prototype")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInput("features must be finite")

    @property
    def size(self) -> int:
        return self.labels.size


# ---------------------------------------------------------------- margins

def adaptive_margin(kl: float, cfg: ActConfig) -> float:
    if kl < 0 or math.isnan(kl):
        raise InvalidParameter(f"KL must be nonnegative, got {kl}")
    return cfg.gamma0 * (1.0 + cfg.alpha * math.tanh(cfg.beta * kl))


def adaptive_margins(kl: np.ndarray, cfg: ActConfig) -> np.ndarray:
    kl = np.asarray(kl, dtype=np.float64)
    if np.any(kl < 0) or np.any(np.isnan(kl)):
        raise InvalidParameter("KL values must be nonnegative")
    return cfg.gamma0 * (1.0 + cfg.alpha * np.tanh(cfg.beta * kl))


def gaussian_kl(mu_p, var_p, mu_q, var_q) -> float:
    """KL(N(mu_p, diag var_p) || N(mu_q, diag var_q))."""
    mu_p, var_p, mu_q, var_q = (np.asarray(a, dtype=np.float64) for a in (mu_p, var_p, mu_q, var_q))
    ratio = var_p / var_q
    val = 0.5 * np.sum(ratio - 1.0 - np.log(ratio) + (mu_p - mu_q) ** 2 / var_q)
    return max(float(val), 0.0)


@dataclass
class MarginState:
    """EMA moments of per-identity and global diagonal Gaussians.

    ``location=True`` compares full Gaussians against the moment-matched
    global feature distribution.  ``location=False`` compares spreads only:
    each identity's features are centered on that identity's mean and the
    reference is the pooled within-identity spread.
    """

    dim: int
    ema_decay: float = 0.9
    location: bool = True
    var_floor: float = VAR_FLOOR
    per_identity_mean: dict = field(default_factory=dict)
    per_identity_var: dict = field(default_factory=dict)
    per_identity_count: dict = field(default_factory=dict)
    global_mean: np.ndarray | None = None
    global_var: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.ema_decay < 1:
            raise InvalidParameter("ema_decay must be in (0, 1)")

    def _ema(self, old, new):
        if old is None:
            return new
        return self.ema_decay * old + (1.0 - self.ema_decay) * new

    def update(self, features, labels) -> None:
        """Fold one batch into the running moments (the single mutation point)."""
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels).reshape(-1)
        if X.ndim != 2 or X.shape[1] != self.dim or X.shape[0] != y.size:
            raise InvalidInput("feature/label shapes do not match the margin state")
        centered = np.empty_like(X)
        for ident in np.unique(y):
            rows = X[y == ident]
            key = int(ident)
            m = rows.mean(axis=0)
            v = rows.var(axis=0)
            centered[y == ident] = rows - m
            self.per_identity_mean[key] = self._ema(self.per_identity_mean.get(key), m)
            self.per_identity_var[key] = np.maximum(
                self._ema(self.per_identity_var.get(key), v), self.var_floor)
            self.per_identity_count[key] = self.per_identity_count.get(key, 0) + rows.shape[0]
        if self.location:
            gm, gv = X.mean(axis=0), X.var(axis=0)
        else:
            # pooled within-identity spread; singleton identities carry no spread
            multi = np.isin(y, [k for k in np.unique(y) if np.sum(y == k) > 1])
            src = centered[multi] if multi.any() else centered
            gm, gv = np.zeros(self.dim), (src**2).mean(axis=0)
        self.global_mean = self._ema(self.global_mean, gm)
        self.global_var = np.maximum(self._ema(self.global_var, gv), self.var_floor)

    @property
    def identities(self) -> list[int]:
        return sorted(self.per_identity_mean)


def estimate_kl(state: MarginState, identity: int) -> float:
    key = int(identity)
    if key not in state.per_identity_mean:
        raise MissingIdentity(f"identity {identity} has no accumulated statistics")
    if state.per_identity_count.get(key, 0) < 2:
        raise MissingIdentity(f"identity {identity} has fewer than 2 samples")
    if state.global_mean is None:
        raise MissingIdentity("global reference statistics are not initialized")
    mu_p = state.per_identity_mean[key] if state.location else np.zeros(state.dim)
    return gaussian_kl(mu_p, state.per_identity_var[key], state.global_mean, state.global_var)


def margin_table(state: MarginState, cfg: ActConfig) -> dict[int, float]:
    """Per-identity gamma; identities without enough samples get the base margin."""
    out = {}
    for ident in state.identities:
        try:
            out[ident] = adaptive_margin(estimate_kl(state, ident), cfg)
        except MissingIdentity:
            out[ident] = cfg.gamma0
    return out


Margins = Union[float, np.ndarray, Mapping[int, float], MarginState, None]


def resolve_margins(margins: Margins, n_classes: int, cfg: ActConfig) -> np.ndarray:
    """Per-class margin vector from any accepted margin specification."""
    if margins is None:
        return np.full(n_classes, cfg.gamma0)
    if isinstance(margins, MarginState):
        margins = margin_table(margins, cfg)
    if isinstance(margins, Mapping):
        g = np.full(n_classes, cfg.gamma0)
        for k, v in margins.items():
            if 0 <= int(k) < n_classes:
                g[int(k)] = v
        return g
    g = np.asarray(margins, dtype=np.float64)
    if g.ndim == 0:
        return np.full(n_classes, float(g))
    if g.shape != (n_classes,):
        raise InvalidInput(f"expected {n_classes} margins, got shape {g.shape}")
    return g


# ---------------------------------------------------------------- geometry

def _unit_rows(X, what="feature"):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInput(f"zero-norm {what} vector")
    return X / norms, norms


def cosine_dissimilarity_matrix(X: np.ndarray) -> np.ndarray:
    U, _ = _unit_rows(np.asarray(X, dtype=np.float64))
    return 1.0 - U @ U.T


def _dcos_du(u_hat, v_hat, u_norm, cos):
    """Gradient of cos(u, v) with respect to u."""
    return (v_hat - cos * u_hat) / u_norm


# ---------------------------------------------------------------- mining

def mine_hard_positive(batch: LabeledBatch, anchor: int, D: np.ndarray | None = None) -> int:
    if D is None:
        D = cosine_dissimilarity_matrix(batch.features)
    mask = batch.labels == batch.labels[anchor]
    mask[anchor] = False
    if not mask.any():
        raise NoPositive(f"anchor {anchor} has no positive in the batch")
    cand = np.where(mask, D[anchor], -np.inf)
    return int(np.argmax(cand))


def mine_semi_hard_negative(batch: LabeledBatch, anchor: int, hardest_pos_dist: float,
                            D: np.ndarray | None = None) -> int:
    if D is None:
        D = cosine_dissimilarity_matrix(batch.features)
    neg = batch.labels != batch.labels[anchor]
    if not neg.any():
        raise NoNegative(f"anchor {anchor} has no negative in the batch")
    semi = neg & (D[anchor] > hardest_pos_dist)
    pool = semi if semi.any() else neg
    return int(np.argmin(np.where(pool, D[anchor], np.inf)))


def mine_triplets(features, labels, D: np.ndarray | None = None):
    """Vectorized mining for every anchor.

    Returns ``(pos, neg)`` index arrays; -1 marks a missing positive/negative.
    Ties go to the smallest index.
    """
    labels = np.asarray(labels).reshape(-1)
    if D is None:
        D = cosine_dissimilarity_matrix(features)
    B = labels.size
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    neg_mask = ~same
    has_pos = pos_mask.any(axis=1)
    has_neg = neg_mask.any(axis=1)
    pos = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)
    d_pos = D[np.arange(B), pos]
    semi = neg_mask & (D > d_pos[:, None]) & has_pos[:, None]
    use_semi = semi.any(axis=1)
    pool = np.where(use_semi[:, None], semi, neg_mask)
    neg = np.argmin(np.where(pool, D, np.inf), axis=1)
    pos = np.where(has_pos, pos, -1)
    neg = np.where(has_neg, neg, -1)
    return pos, neg


# ---------------------------------------------------------------- losses

def act_id_loss(batch: LabeledBatch, margins: Margins, cfg: ActConfig):
    """Additive-angular-margin softmax with class-conditioned margins.

    Returns ``(loss, grad_features)``.
    """
    if batch.size < 1:
        raise EmptyBatch("identification loss needs at least one sample")
    F = batch.features
    Fh, fn = _unit_rows(F)
    Wh, _ = _unit_rows(batch.prototypes, "prototype")
    gam = resolve_margins(margins, len(Wh), cfg)
    y = batch.labels
    B = y.size
    rows = np.arange(B)
    cos = Fh @ Wh.T
    z = cfg.scale_s * cos
    z[rows, y] -= cfg.scale_s * gam[y]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[rows, y]))
    p = np.exp(z - lse[:, None])
    p[rows, y] -= 1.0
    dcos = cfg.scale_s * p / B
    # d cos_ij / d f_i = (w_j - cos_ij f_i_hat) / |f_i|
    grad = (dcos @ Wh - (dcos * cos).sum(axis=1, keepdims=True) * Fh) / fn
    return loss, grad


def act_triplet_loss(batch: LabeledBatch, margins: Margins, cfg: ActConfig,
                     *, return_details: bool = False):
    """Hinge on hardest-positive / semi-hard-negative triplets, mean over valid anchors."""
    F = batch.features
    Fh, fn = _unit_rows(F)
    D = 1.0 - Fh @ Fh.T
    gam = resolve_margins(margins, len(batch.prototypes), cfg)
    pos, neg = mine_triplets(F, batch.labels, D)
    valid = (pos >= 0) & (neg >= 0)
    if not valid.any():
        raise EmptyBatch("no anchor has both a positive and a negative")
    anchors = np.flatnonzero(valid)
    V = anchors.size
    grad = np.zeros_like(F)
    hinge = D[anchors, pos[anchors]] - D[anchors, neg[anchors]] + gam[batch.labels[anchors]]
    active = hinge > 0
    loss = float(np.sum(np.maximum(hinge, 0.0)) / V)
    for a, p_, n_, on in zip(anchors, pos[anchors], neg[anchors], active):
        if not on:
            continue
        cos_ap = 1.0 - D[a, p_]
        cos_an = 1.0 - D[a, n_]
        # loss term = -cos(a,p) + cos(a,n) + const
        grad[a] += (-_dcos_du(Fh[a], Fh[p_], fn[a], cos_ap)
                    + _dcos_du(Fh[a], Fh[n_], fn[a], cos_an)) / V
        grad[p_] += -_dcos_du(Fh[p_], Fh[a], fn[p_], cos_ap) / V
        grad[n_] += _dcos_du(Fh[n_], Fh[a], fn[n_], cos_an) / V
    if return_details:
        return loss, grad, {"pos": pos, "neg": neg, "valid": valid, "hinge": hinge,
                            "anchors": anchors}
    return loss, grad


@dataclass
class ActResult:
    loss: float
    grad: np.ndarray
    id_loss: float
    tri_loss: float


def act_total(batch: LabeledBatch, margins: Margins, cfg: ActConfig) -> ActResult:
    l_id, g_id = act_id_loss(batch, margins, cfg)
    if cfg.lambda_tri == 0:
        return ActResult(l_id, g_id, l_id, 0.0)
    l_tri, g_tri = act_triplet_loss(batch, margins, cfg)
    return ActResult(l_id + cfg.lambda_tri * l_tri, g_id + cfg.lambda_tri * g_tri, l_id, l_tri)


# ---------------------------------------------------------------- weight decay

def sgd_step_with_decay(features, gradient, eta: float, lambda_wd: float,
                        *, check: bool = True) -> np.ndarray:
    """``f - eta (grad + lambda_wd f)`` with the per-row norm bound verified."""
    if not 0 < eta * lambda_wd < 1:
        raise InvalidParameter("need 0 < eta * lambda_wd < 1")
    f = np.asarray(features, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    out = f - eta * (g + lambda_wd * f)
    if check:
        ok = feature_norm_bound_holds(f, g, out, eta, lambda_wd)
        if not np.all(ok):
            raise ArithmeticError("feature-norm step bound violated")
    return out


def feature_norm_bound_holds(f, g, f_new, eta, lambda_wd, rtol: float = 1e-12) -> np.ndarray:
    lhs = np.linalg.norm(np.atleast_2d(f_new), axis=1)
    rhs = ((1 - eta * lambda_wd) * np.linalg.norm(np.atleast_2d(f), axis=1)
           + eta * np.linalg.norm(np.atleast_2d(g), axis=1))
    return lhs <= rhs * (1 + rtol) + 1e-300


def load_config(path) -> ActConfig:
    doc = json.loads(Path(path).read_text())
    return ActConfig.from_dict(doc.get("act", doc))
