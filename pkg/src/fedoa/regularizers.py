"""Feature-distance functions and their gradients in the first argument.

Three kinds are supported:

- ``l2sq``: squared Euclidean distance ``||p - g||^2``
- ``cosine``: ``1 - cos(p, g)``
- ``pearson``: ``1 - corr(p, g)`` with the population (divide-by-n) moments

Every function has a row-wise variant working on ``(n, h)`` arrays; the
vector forms are thin wrappers around those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError

KINDS = ("l2sq", "cosine", "pearson")

# relative floor below which a norm / spread is treated as exactly zero
_DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class RegSpec:
    """Which distance to use and how strongly to weight it."""

    kind: str = "l2sq"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}; expected one of {KINDS}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")

    @property
    def active(self) -> bool:
        return self.lam > 0


def _as_rows(zp, zg):
    zp = np.asarray(zp, dtype=np.float64)
    zg = np.asarray(zg, dtype=np.float64)
    if zp.shape != zg.shape:
        raise ShapeError(f"feature shapes differ: {zp.shape} vs {zg.shape}")
    if zp.ndim == 1:
        zp, zg = zp[None, :], zg[None, :]
    if zp.ndim != 2 or zp.shape[1] < 1:
        raise ShapeError(f"expected vectors or (n, h) rows, got shape {zp.shape}")
    return zp, zg


def _norms(rows, scale_ref, what):
    norms = np.linalg.norm(rows, axis=1)
    floor = _DEGENERATE_RTOL * np.maximum(scale_ref, np.finfo(np.float64).tiny)
    bad = norms <= floor
    if np.any(bad):
        raise DegenerateInputError(f"{what} is degenerate in row {int(np.argmax(bad))}")
    return norms


def _centered(rows):
    return rows - rows.mean(axis=1, keepdims=True)


def dist_rows(zp, zg, kind: str) -> np.ndarray:
    """Per-row distance between two stacks of feature vectors."""
    zp, zg = _as_rows(zp, zg)
    if kind == "l2sq":
        diff = zp - zg
        return np.einsum("ij,ij->i", diff, diff)
    if kind == "cosine":
        np_ = _norms(zp, np.abs(zp).max(axis=1), "cosine: zero-norm first argument")
        ng = _norms(zg, np.abs(zg).max(axis=1), "cosine: zero-norm second argument")
        return 1.0 - np.einsum("ij,ij->i", zp, zg) / (np_ * ng)
    if kind == "pearson":
        pc, gc = _centered(zp), _centered(zg)
        npc = _norms(pc, np.abs(zp).max(axis=1), "pearson: constant first argument")
        ngc = _norms(gc, np.abs(zg).max(axis=1), "pearson: constant second argument")
        return 1.0 - np.einsum("ij,ij->i", pc, gc) / (npc * ngc)
    raise ValueError(f"unknown distance kind {kind!r}")


def dist_grad_rows(zp, zg, kind: str) -> np.ndarray:
    """Row-wise gradient of :func:`dist_rows` with respect to ``zp``; ``zg`` is constant."""
    zp, zg = _as_rows(zp, zg)
    if kind == "l2sq":
        return 2.0 * (zp - zg)
    if kind == "cosine":
        np_ = _norms(zp, np.abs(zp).max(axis=1), "cosine: zero-norm first argument")[:, None]
        ng = _norms(zg, np.abs(zg).max(axis=1), "cosine: zero-norm second argument")[:, None]
        cos = np.einsum("ij,ij->i", zp, zg)[:, None] / (np_ * ng)
        return -(zg / (np_ * ng) - cos * zp / np_**2)
    if kind == "pearson":
        # corr depends on zp only through its centered copy, and the centering
        # projector fixes both centered vectors, so no extra projection is needed
        pc, gc = _centered(zp), _centered(zg)
        npc = _norms(pc, np.abs(zp).max(axis=1), "pearson: constant first argument")[:, None]
        ngc = _norms(gc, np.abs(zg).max(axis=1), "pearson: constant second argument")[:, None]
        corr = np.einsum("ij,ij->i", pc, gc)[:, None] / (npc * ngc)
        return -(gc / (npc * ngc) - corr * pc / npc**2)
    raise ValueError(f"unknown distance kind {kind!r}")


def dist(zp, zg, kind: str = "l2sq") -> float:
    """Distance between two feature vectors of equal length."""
    zp = np.asarray(zp, dtype=np.float64)
    if zp.ndim != 1:
        raise ShapeError("dist expects 1-D vectors; use dist_rows for batches")
    return float(dist_rows(zp, zg, kind)[0])


def dist_grad_zp(zp, zg, kind: str = "l2sq") -> np.ndarray:
    zp = np.asarray(zp, dtype=np.float64)
    if zp.ndim != 1:
        raise ShapeError("dist_grad_zp expects 1-D vectors; use dist_grad_rows for batches")
    return dist_grad_rows(zp, zg, kind)[0]
