"""Desk-scale trainer: a linear encoder fit with the ACT objective, then release.

The loop follows three stages.  Stage I fits the encoder on batches of
identities with adaptive margins.  Stage II periodically re-derives the
encoder sensitivity from the output clip radius and recalibrates the noise
level.  Stage III privatizes the encoded gallery and builds the index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import index as gindex
from .act import (ActConfig, LabeledBatch, MarginState, act_total, cosine_dissimilarity_matrix,
                  margin_table, sgd_step_with_decay)
from .audit import compactness
from .dp import DpParams, calibrate_sigma, privatize_batch, sensitivity_bound
from .embeddings import EmbeddingBatch
from .errors import InvalidInput, InvalidParameter, TrainingFailure
from .transport import TransportProblem, sinkhorn


@dataclass
class TrainConfig:
    epochs: int = 30
    identities_per_batch: int = 8
    learning_rate: float = 0.05
    weight_decay: float = 1e-3
    lambda_ot: float = 0.0
    lambda_aux: float = 0.0
    act: ActConfig = field(default_factory=ActConfig)
    dp: DpParams = field(default_factory=lambda: DpParams.calibrated(1.0, 2.0, 1e-5))
    recalibration_period: int = 5
    out_dim: Optional[int] = None
    ot_epsilon: float = 0.1
    seed: int = 0
    index_mode: str = "exact"
    index_params: gindex.GraphParams = field(default_factory=gindex.GraphParams)
    margin_ema: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidParameter("epochs must be >= 0")
        if self.identities_per_batch < 2:
            raise InvalidParameter("a batch needs at least two identities")
        if not 0 < self.learning_rate * self.weight_decay < 1:
            raise InvalidParameter("need 0 < learning_rate * weight_decay < 1")
        if self.lambda_ot < 0 or self.lambda_aux < 0:
            raise InvalidParameter("loss weights must be nonnegative")
        if self.recalibration_period < 1:
            raise InvalidParameter("recalibration_period must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "identities_per_batch": self.identities_per_batch,
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "lambda_ot": self.lambda_ot, "lambda_aux": self.lambda_aux,
            "act": self.act.to_dict(), "dp": self.dp.to_dict(),
            "recalibration_period": self.recalibration_period, "out_dim": self.out_dim,
            "ot_epsilon": self.ot_epsilon, "seed": self.seed, "index_mode": self.index_mode,
            "index_params": vars(self.index_params), "margin_ema": self.margin_ema,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "act" in doc:
            doc["act"] = ActConfig.from_dict(doc["act"])
        if "dp" in doc:
            d = doc["dp"]
            if "noise_sigma" in d:
                doc["dp"] = DpParams.from_dict(d)
            else:
                doc["dp"] = DpParams.calibrated(float(d.get("clip_radius_B", 1.0)),
                                                float(d.get("epsilon", 2.0)),
                                                float(d.get("delta", 1e-5)),
                                                int(d.get("rng_seed", 0)))
        if "index_params" in doc:
            doc["index_params"] = gindex.GraphParams(**doc["index_params"])
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in fields})


@dataclass
class TotalLoss:
    value: float
    grad: np.ndarray
    act: float
    ot: float
    aux: float = 0.0


def total_loss(batch: LabeledBatch, margins, cfg: TrainConfig) -> TotalLoss:
    """ACT loss plus the weighted transport objective on the batch dissimilarities.

    The transport term enters the value only; the gradient is the ACT gradient.
    The auxiliary term is identically zero.
    """
    res = act_total(batch, margins, cfg.act)
    ot = 0.0
    if cfg.lambda_ot > 0:
        # rounding can leave -1e-16 on the diagonal; costs must be nonnegative
        D = np.maximum(cosine_dissimilarity_matrix(batch.features), 0.0)
        plan = sinkhorn(TransportProblem.uniform(D, epsilon_ot=cfg.ot_epsilon))
        ot = plan.objective
    return TotalLoss(res.loss + cfg.lambda_ot * ot + cfg.lambda_aux * 0.0, res.grad, res.loss, ot)


@dataclass
class TrainResult:
    encoder: np.ndarray
    history: list
    dp: DpParams
    index: gindex.GalleryIndex
    released: EmbeddingBatch
    margins: dict
    steps: int = 0
    norm_bound_violations: int = 0

    def encode(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.encoder


def _unit(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n > 0, n, 1.0)


def _class_means(F, labels, n_classes):
    P = np.zeros((n_classes, F.shape[1]))
    np.add.at(P, labels, _unit(F))
    counts = np.bincount(labels, minlength=n_classes)[:, None]
    return P / np.maximum(counts, 1)


def train_toy(data: EmbeddingBatch, cfg: TrainConfig) -> TrainResult:
    if data.labels is None:
        raise InvalidInput("training data needs identity labels")
    uniq, y = np.unique(data.labels, return_inverse=True)
    if uniq.size < 2:
        raise InvalidInput("training needs at least two identities")
    X = data.features
    d = X.shape[1]
    d_out = cfg.out_dim or d
    rng = np.random.default_rng(cfg.seed)
    W = rng.normal(size=(d, d_out)) / math.sqrt(d)
    state = MarginState(d_out, ema_decay=cfg.margin_ema, location=False)
    dp = cfg.dp
    history = []
    steps = violations = 0

    def snapshot(epoch, loss, act_l, ot_l):
        F = X @ W
        rep = compactness(_unit(F), y)
        table = margin_table(state, cfg.act) if state.identities else {}
        history.append({
            "epoch": epoch, "loss": loss, "act_loss": act_l, "ot_loss": ot_l,
            "Q": rep.Q,
            "gamma": {int(uniq[k]): float(v) for k, v in table.items()},
            "sensitivity": dp.sensitivity_Sf, "noise_sigma": dp.noise_sigma,
            "encoder_norm": float(np.linalg.norm(W)),
        })

    snapshot(0, float("nan"), float("nan"), float("nan"))
    P = min(cfg.identities_per_batch, uniq.size)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(uniq.size)
        losses, acts, ots = [], [], []
        prototypes = _class_means(X @ W, y, uniq.size)
        for start in range(0, uniq.size, P):
            ids = order[start:start + P]
            if ids.size < 2:
                ids = np.concatenate([ids, order[:2 - ids.size]])
            rows = np.flatnonzero(np.isin(y, ids))
            Xb = X[rows]
            Fb = Xb @ W
            state.update(Fb, y[rows])
            margins = margin_table(state, cfg.act)
            tl = total_loss(LabeledBatch(Fb, y[rows], prototypes), margins, cfg)
            if not np.isfinite(tl.value) or not np.all(np.isfinite(tl.grad)):
                raise TrainingFailure(f"loss diverged at epoch {epoch}", {
                    "epoch": epoch, "step": steps, "loss": tl.value,
                    "encoder_norm": float(np.linalg.norm(W))})
            gW = Xb.T @ tl.grad
            W_new = sgd_step_with_decay(W, gW, cfg.learning_rate, cfg.weight_decay, check=False)
            # per-row bound ||w'|| <= (1 - eta lambda)||w|| + eta ||g||
            lhs = np.linalg.norm(W_new, axis=1)
            rhs = ((1 - cfg.learning_rate * cfg.weight_decay) * np.linalg.norm(W, axis=1)
                   + cfg.learning_rate * np.linalg.norm(gW, axis=1))
            violations += int(np.sum(lhs > rhs * (1 + 1e-12) + 1e-300))
            W = W_new
            steps += 1
            losses.append(tl.value)
            acts.append(tl.act)
            ots.append(tl.ot)
        if epoch % cfg.recalibration_period == 0:
            # clipping the output to B bounds the sensitivity by 2B; B is held fixed
            Sf = sensitivity_bound(dp.clip_radius_B)
            dp = DpParams(dp.clip_radius_B, dp.epsilon, dp.delta, Sf,
                          calibrate_sigma(Sf, dp.epsilon, dp.delta), dp.rng_seed)
        snapshot(epoch, float(np.mean(losses)), float(np.mean(acts)), float(np.mean(ots)))

    released = privatize_batch(X @ W, dp)
    rel_batch = data.with_features(released, privatization=dp.to_dict())
    idx = gindex.build(rel_batch, cfg.index_mode, cfg.index_params, dp_params=dp)
    margins = {int(uniq[k]): float(v) for k, v in margin_table(state, cfg.act).items()} \
        if state.identities else {}
    return TrainResult(W, history, dp, idx, rel_batch, margins, steps, violations)


def moving_average(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
