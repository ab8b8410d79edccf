"""EmbeddingBatch payload and its on-disk formats (TGEB binary, CSV)."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInput

MAGIC = b"TGEB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB")

FLAG_LABELS = 1
FLAG_CAMERAS = 2
FLAG_TIMESTAMPS = 4


@dataclass
class EmbeddingBatch:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    cameras: Optional[np.ndarray] = None
    timestamps: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        n = self.features.shape[0]
        for name, dtype in (("labels", np.int64), ("cameras", np.int64),
                            ("timestamps", np.float64)):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=dtype).reshape(-1)
                if v.size != n:
                    raise InvalidInput(f"{name} has {v.size} entries for {n} embeddings")
                setattr(self, name, v)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "EmbeddingBatch":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return EmbeddingBatch(self.features[idx], pick(self.labels), pick(self.cameras),
                              pick(self.timestamps), dict(self.provenance))

    def with_features(self, X, **provenance) -> "EmbeddingBatch":
        return EmbeddingBatch(X, self.labels, self.cameras, self.timestamps,
                              {**self.provenance, **provenance})


def write_tgeb(batch: EmbeddingBatch, path) -> None:
    n, d = batch.features.shape
    flags = ((FLAG_LABELS if batch.labels is not None else 0)
             | (FLAG_CAMERAS if batch.cameras is not None else 0)
             | (FLAG_TIMESTAMPS if batch.timestamps is not None else 0))
    parts = [_HEADER.pack(MAGIC, VERSION, n, d, flags),
             batch.features.astype("<f4").tobytes()]
    if batch.labels is not None:
        parts.append(batch.labels.astype("<u4").tobytes())
    if batch.cameras is not None:
        parts.append(batch.cameras.astype("<u4").tobytes())
    if batch.timestamps is not None:
        parts.append(batch.timestamps.astype("<f8").tobytes())
    parts.append(json.dumps(batch.provenance, sort_keys=True).encode())
    Path(path).write_bytes(b"".join(parts))


def read_tgeb(path) -> EmbeddingBatch:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInput("file too short for a TGEB header")
    magic, version, n, d, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise InvalidInput(f"bad magic {magic!r}")
    if version != VERSION:
        raise InvalidInput(f"unsupported TGEB version {version}")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(raw):
            raise InvalidInput("truncated TGEB payload")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    X = take("<f4", n * d).reshape(n, d).astype(np.float64)
    labels = take("<u4", n).astype(np.int64) if flags & FLAG_LABELS else None
    cams = take("<u4", n).astype(np.int64) if flags & FLAG_CAMERAS else None
    ts = take("<f8", n).astype(np.float64) if flags & FLAG_TIMESTAMPS else None
    trailer = raw[off:].decode() if off < len(raw) else ""
    prov = json.loads(trailer) if trailer.strip() else {}
    return EmbeddingBatch(X, labels, cams, ts, prov)


def read_csv(path) -> EmbeddingBatch:
    """CSV with optional ``label``, ``camera``, ``timestamp`` columns; the rest are features."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInput("empty CSV")
    header = rows[0]
    has_header = any(not _is_number(c) for c in header)
    body = rows[1:] if has_header else rows
    if not has_header:
        header = [f"f{i}" for i in range(len(rows[0]))]
    arr = np.array([[float(c) for c in r] for r in body if r], dtype=np.float64)
    meta = {"label": None, "camera": None, "timestamp": None}
    feat_cols = []
    for k, name in enumerate(header):
        key = name.strip().lower()
        if key in meta:
            meta[key] = arr[:, k]
        else:
            feat_cols.append(k)
    return EmbeddingBatch(arr[:, feat_cols], meta["label"], meta["camera"], meta["timestamp"])


def write_csv(batch: EmbeddingBatch, path) -> None:
    cols = [f"f{i}" for i in range(batch.dim)]
    extra = [("label", batch.labels), ("camera", batch.cameras), ("timestamp", batch.timestamps)]
    extra = [(n, v) for n, v in extra if v is not None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [n for n, _ in extra])
        for i in range(len(batch)):
            w.writerow([repr(float(x)) for x in batch.features[i]] + [v[i].item() for _, v in extra])


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_embeddings(path) -> EmbeddingBatch:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    return read_tgeb(path)


def save_embeddings(batch: EmbeddingBatch, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv(batch, path)
    else:
        write_tgeb(batch, path)


def load_matrix_csv(path) -> np.ndarray:
    """Plain numeric CSV (no header) as a 2-D array; single rows/columns stay 2-D."""
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))
