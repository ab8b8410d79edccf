"""Geometry-induced camera topology.

Cameras are nodes; edge weights come from a Gaussian kernel on (optionally
rotated) camera positions.  The graph is immutable once built.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameter, InvalidPose

ORTHO_TOL = 1e-6
REPAIR_TOL = 1e-3


def _polar_orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _check_rotation(R, cam_id: str) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.size == 9:
        R = R.reshape(3, 3)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidPose(f"camera {cam_id!r}: rotation must be a finite 3x3 matrix")
    err = max(np.abs(R @ R.T - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    if err <= ORTHO_TOL:
        return R
    if err <= REPAIR_TOL:
        Q = _polar_orthonormalize(R)
        if abs(np.linalg.det(Q) - 1.0) <= ORTHO_TOL:
            return Q
    raise InvalidPose(f"camera {cam_id!r}: rotation is not orthonormal with det +1 (err={err:.3g})")


@dataclass(frozen=True)
class CameraPose:
    id: str
    position: np.ndarray
    rotation: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(-1)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise InvalidPose(f"camera {self.id!r}: position must be a finite 3-vector")
        object.__setattr__(self, "position", p)
        if self.rotation is not None:
            object.__setattr__(self, "rotation", _check_rotation(self.rotation, self.id))


@dataclass(frozen=True)
class CameraGraph:
    poses: tuple
    bandwidth_sigma: float
    affinity: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.poses)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.poses]

    @property
    def has_rotations(self) -> bool:
        return any(p.rotation is not None for p in self.poses)

    def to_dict(self) -> dict:
        cams = []
        for p in self.poses:
            c = {"id": p.id, "position": p.position.tolist()}
            if p.rotation is not None:
                c["rotation"] = p.rotation.reshape(-1).tolist()
            cams.append(c)
        return {
            "cameras": cams,
            "sigma_meters": self.bandwidth_sigma,
            "affinity": self.affinity.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def relative_rotation(pi: CameraPose, pj: CameraPose) -> np.ndarray:
    """R_ij = R_j^T R_i; identity when either camera lacks a rotation."""
    if pi.rotation is None or pj.rotation is None:
        return np.eye(3)
    return pj.rotation.T @ pi.rotation


def build_adjacency(poses: Sequence[CameraPose], sigma: float) -> CameraGraph:
    """Gaussian affinity ``A_ij = exp(-||R_ij p_i - p_j||^2 / (2 sigma^2))``."""
    if not (sigma > 0) or not math.isfinite(sigma):
        raise InvalidParameter(f"sigma must be positive and finite, got {sigma}")
    poses = tuple(poses)
    if len(poses) < 1:
        raise InvalidParameter("at least one camera is required")
    P = np.stack([p.position for p in poses])
    if not any(p.rotation is not None for p in poses):
        # explicit difference form keeps A bit-exactly symmetric
        diff = P[:, None, :] - P[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        n = len(poses)
        sq = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                v = relative_rotation(poses[i], poses[j]) @ P[i] - P[j]
                sq[i, j] = v @ v
    A = np.exp(-sq / (2.0 * sigma * sigma))
    # entries must stay in (0, 1] even for very distant cameras
    A = np.maximum(A, np.finfo(np.float64).tiny)
    A.setflags(write=False)
    return CameraGraph(poses=poses, bandwidth_sigma=float(sigma), affinity=A)


def perturbation_bound(delta_p_norm: float, sigma: float) -> float:
    """Claimed worst-case change of one affinity entry under a position shift.

    Returns ``1 - exp(-||dp||^2 / (2 sigma^2))``.  This bound is tight for
    coincident cameras only; for cameras at distance r > 0 the true change is
    first order in ||dp||.  See :func:`lipschitz_perturbation_bound` for a
    bound valid for every pair.
    """
    if delta_p_norm < 0:
        raise InvalidParameter("delta_p_norm must be nonnegative")
    if not (sigma > 0):
        raise InvalidParameter("sigma must be positive")
    return float(-np.expm1(-(delta_p_norm**2) / (2.0 * sigma * sigma)))


def lipschitz_perturbation_bound(delta_p_norm: float, sigma: float) -> float:
    """Sharp uniform bound on ``|A_ij(p_i + dp) - A_ij(p_i)|``.

    sup over r >= 0 of ``g(r) - g(r + t)`` with ``g(r) = exp(-r^2/(2 sigma^2))``
    and ``t = ||dp||``.  The maximizer satisfies ``g'(r) = g'(r + t)``; it is
    located by a grid scan refined with a bounded scalar search.
    """
    if delta_p_norm < 0:
        raise InvalidParameter("delta_p_norm must be nonnegative")
    if not (sigma > 0):
        raise InvalidParameter("sigma must be positive")
    from scipy.optimize import minimize_scalar

    t = delta_p_norm / sigma
    if t == 0:
        return 0.0

    def gap(r):
        return math.exp(-0.5 * r * r) - math.exp(-0.5 * (r + t) ** 2)

    hi = max(2.0, 1.0 + t)
    grid = np.linspace(0.0, hi, 2001)
    vals = np.exp(-0.5 * grid**2) - np.exp(-0.5 * (grid + t) ** 2)
    k = int(np.argmax(vals))
    lo_r, hi_r = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(lambda r: -gap(r), bounds=(lo_r, hi_r), method="bounded",
                          options={"xatol": 1e-13})
    best = max(float(vals[k]), -float(res.fun))
    return float(min(1.0, best + 1e-15))


def row_normalize(graph: CameraGraph | np.ndarray) -> np.ndarray:
    """Plain L1 row normalization of the affinity matrix."""
    A = graph.affinity if isinstance(graph, CameraGraph) else np.asarray(graph, dtype=np.float64)
    return A / A.sum(axis=1, keepdims=True)


def neighborhoods(graph: CameraGraph, threshold: float = 0.05) -> list[np.ndarray]:
    """Index sets ``{j : A_ij >= threshold}``; every node keeps itself."""
    A = graph.affinity
    return [np.flatnonzero(A[i] >= threshold) for i in range(A.shape[0])]


def load_layout(path) -> tuple[list[CameraPose], float]:
    doc = json.loads(Path(path).read_text())
    return parse_layout(doc)


def parse_layout(doc: dict) -> tuple[list[CameraPose], float]:
    try:
        cams = doc["cameras"]
        sigma = float(doc["sigma_meters"])
    except (KeyError, TypeError) as exc:
        raise InvalidPose(f"layout missing field: {exc}") from exc
    poses = [CameraPose(id=str(c["id"]), position=c["position"], rotation=c.get("rotation"))
             for c in cams]
    return poses, sigma


def load_graph(path) -> CameraGraph:
    """Rebuild a graph from a layout or saved graph file (affinity is recomputed)."""
    poses, sigma = load_layout(path)
    return build_adjacency(poses, sigma)
