"""Clipping, sensitivity, Gaussian-mechanism calibration and embedding release."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import rng as _rng
from .errors import InvalidParameter


def clip(f, B: float) -> np.ndarray:
    """Project onto the L2 ball of radius B (rows independently for 2-D input)."""
    if not B > 0:
        raise InvalidParameter("clip radius must be positive")
    f = np.asarray(f, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(f), axis=-1, keepdims=True)
    scale = np.where(norms > B, B / np.where(norms > 0, norms, 1.0), 1.0)
    out = np.atleast_2d(f) * scale
    # rounding can leave the rescaled norm one ulp above B; nudge it inside
    for _ in range(4):
        over = np.linalg.norm(out, axis=-1, keepdims=True) > B
        if not over.any():
            break
        out = np.where(over, out * (1.0 - 2.0 ** -52), out)
    return out.reshape(f.shape)


def sensitivity_bound(B: float) -> float:
    if not B > 0:
        raise InvalidParameter("clip radius must be positive")
    return 2.0 * B


def calibrate_sigma(Sf: float, epsilon: float, delta: float) -> float:
    """Smallest noise standard deviation meeting the Gaussian-mechanism condition."""
    if not Sf > 0:
        raise InvalidParameter("sensitivity must be positive")
    if not (epsilon > 0) or math.isnan(epsilon):
        raise InvalidParameter("epsilon must be positive")
    if not 0 < delta < 1:
        raise InvalidParameter("delta must lie in (0, 1)")
    if math.isinf(epsilon):
        return 0.0
    return math.sqrt(2.0 * math.log(1.25 / delta)) * Sf / epsilon


@dataclass(frozen=True)
class DpParams:
    clip_radius_B: float
    epsilon: float
    delta: float
    sensitivity_Sf: float
    noise_sigma: float
    rng_seed: int = 0

    def __post_init__(self):
        if not self.clip_radius_B > 0:
            raise InvalidParameter("clip radius must be positive")
        if not self.epsilon > 0:
            raise InvalidParameter("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise InvalidParameter("delta must lie in (0, 1)")
        if not 0 < self.sensitivity_Sf <= 2 * self.clip_radius_B * (1 + 1e-12):
            raise InvalidParameter("sensitivity must lie in (0, 2B]")
        need = calibrate_sigma(self.sensitivity_Sf, self.epsilon, self.delta)
        if self.noise_sigma < need * (1 - 1e-12):
            raise InvalidParameter(
                f"noise_sigma={self.noise_sigma} is below the calibrated {need}")

    @classmethod
    def calibrated(cls, B: float, epsilon: float, delta: float, seed: int = 0) -> "DpParams":
        Sf = sensitivity_bound(B)
        return cls(clip_radius_B=B, epsilon=epsilon, delta=delta, sensitivity_Sf=Sf,
                   noise_sigma=calibrate_sigma(Sf, epsilon, delta), rng_seed=int(seed))

    @property
    def is_private(self) -> bool:
        return math.isfinite(self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.epsilon):
            d["epsilon"] = "inf"
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "DpParams":
        doc = dict(doc)
        doc["epsilon"] = float(doc["epsilon"])
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def privatize(f, params: DpParams, stream: int = 0, counter: int = 0) -> np.ndarray:
    """Clip then add i.i.d. Gaussian noise with std ``params.noise_sigma``.

    Noise comes from the counter-based stream at (rng_seed, stream, counter),
    so the same address always yields the same output.
    """
    fb = clip(f, params.clip_radius_B)
    if params.noise_sigma == 0:
        return fb
    z = _rng.gaussian(fb.shape, params.rng_seed, stream, counter)
    return fb + params.noise_sigma * z


def privatize_batch(X, params: DpParams, counter: int = 0, first_stream: int = 0) -> np.ndarray:
    """Row i uses stream ``first_stream + i`` (the embedding ordinal)."""
    X = np.asarray(X, dtype=np.float64)
    out = clip(X, params.clip_radius_B)
    if params.noise_sigma == 0:
        return out
    for i in range(X.shape[0]):
        out[i] += params.noise_sigma * _rng.gaussian(X.shape[1], params.rng_seed,
                                                     first_stream + i, counter)
    return out
