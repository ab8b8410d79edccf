"""Synthetic identity/camera embedding data standing in for backbone features."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .camera_graph import CameraGraph, CameraPose, build_adjacency
from .embeddings import EmbeddingBatch
from .errors import InvalidParameter


@dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 200
    samples_per_identity: int = 10
    dim: int = 64
    intra_sigma: float = 0.25
    inter_separation: float = 4.0
    cameras: int = 6
    camera_view_shift: float = 0.3
    seed: int = 0
    layout_radius: float = 10.0
    bandwidth_sigma: float = 10.0

    def __post_init__(self):
        for name in ("identities", "samples_per_identity", "dim", "cameras"):
            if getattr(self, name) < 1:
                raise InvalidParameter(f"{name} must be >= 1")
        for name in ("intra_sigma", "inter_separation", "layout_radius", "bandwidth_sigma"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if self.camera_view_shift < 0:
            raise InvalidParameter("camera_view_shift must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in fields})


STANDARD_BENCHMARK = SyntheticSpec()


def _min_pairwise_distance(Z: np.ndarray) -> float:
    sq = np.sum(Z ** 2, axis=1)
    D2 = sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T
    np.fill_diagonal(D2, np.inf)
    return float(np.sqrt(max(D2.min(), 0.0)))


def _centroids(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    Z = rng.normal(size=(spec.identities, spec.dim))
    if spec.identities == 1:
        return Z / np.linalg.norm(Z) * spec.inter_separation
    # scale up until the closest pair meets the separation (with a little slack
    # so the Gram-form rounding never lands just under it)
    dmin = _min_pairwise_distance(Z)
    return Z * (spec.inter_separation * (1.0 + 1e-9) / dmin)


def camera_ring(n: int, radius: float, sigma: float) -> CameraGraph:
    """Cameras evenly spaced on a circle, all looking at the center."""
    poses = []
    for k in range(n):
        a = 2 * np.pi * k / n
        c, s = np.cos(a), np.sin(a)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        poses.append(CameraPose(f"cam{k}", np.array([radius * c, radius * s, 3.0]), R))
    return build_adjacency(poses, sigma)


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingBatch, CameraGraph]:
    """Gaussian identity clusters with a per-camera additive view shift.

    Sample order is identity-major, so rows ``i*S .. (i+1)*S - 1`` belong to
    identity ``i``.
    """
    rng = np.random.default_rng(spec.seed)
    mu = _centroids(spec, rng)
    shifts = rng.normal(size=(spec.cameras, spec.dim))
    shifts *= spec.camera_view_shift / np.maximum(np.linalg.norm(shifts, axis=1, keepdims=True),
                                                  1e-300)
    S = spec.samples_per_identity
    labels = np.repeat(np.arange(spec.identities), S)
    cams = rng.integers(0, spec.cameras, size=labels.size)
    noise = rng.normal(scale=spec.intra_sigma, size=(labels.size, spec.dim))
    X = mu[labels] + noise + shifts[cams]
    ts = np.sort(rng.uniform(0.0, 100.0, size=labels.size))
    batch = EmbeddingBatch(X, labels, cams, ts, {"synthetic": spec.to_dict()})
    graph = camera_ring(spec.cameras, spec.layout_radius, spec.bandwidth_sigma)
    return batch, graph


def inflate_identity_variance(batch: EmbeddingBatch, identities, factor: float) -> EmbeddingBatch:
    """Scale the deviations from their identity mean by ``factor`` for the chosen identities."""
    X = batch.features.copy()
    for i in np.atleast_1d(identities):
        rows = np.flatnonzero(batch.labels == i)
        m = X[rows].mean(axis=0)
        X[rows] = m + factor * (X[rows] - m)
    return batch.with_features(X, inflated={"identities": [int(i) for i in np.atleast_1d(identities)],
                                            "factor": float(factor)})


def query_gallery_split(batch: EmbeddingBatch, queries_per_identity: int = 1):
    """First samples of every identity become queries; the rest stay in the gallery.

    Returns ``(queries, gallery, query_rows, gallery_rows)``.  An identity with
    a single sample is kept in the gallery only.
    """
    q_rows, g_rows = [], []
    for lab in np.unique(batch.labels):
        rows = np.flatnonzero(batch.labels == lab)
        k = min(queries_per_identity, rows.size - 1)
        q_rows.extend(rows[:k])
        g_rows.extend(rows[k:])
    q_rows = np.asarray(q_rows, dtype=np.int64)
    g_rows = np.asarray(g_rows, dtype=np.int64)
    return batch.subset(q_rows), batch.subset(g_rows), q_rows, g_rows
