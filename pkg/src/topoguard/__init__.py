"""Topology-guided private embeddings for multi-camera retrieval."""

__version__ = "0.1.0"

from .errors import TopoguardError  # noqa: F401
