"""Similarity scoring between attention probability matrices.

The score between two APMs is 1 minus the row-averaged total variation
distance, so identical matrices score 1 and disjoint-support matrices
score 0. Multi-head comparisons take the unweighted mean over heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Apm

DIST_SUM_TOL = 1e-4


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {p.shape}")
    if p.min() < 0.0:
        raise ValueError(f"{name} has negative entries")
    if abs(p.sum() - 1.0) > DIST_SUM_TOL:
        raise ValueError(f"{name} does not sum to 1 (sum={p.sum():.6f})")
    return p


def tv_distance(p, q) -> float:
    """Total variation distance: half the L1 distance between two rows."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    return 0.5 * float(np.abs(p - q).sum())


def _probs(a) -> np.ndarray:
    return a.probs if isinstance(a, Apm) else np.asarray(a)


def similarity_score(a, b) -> float:
    """1 - mean total-variation distance over the L rows of two APMs."""
    pa = _probs(a).astype(np.float64)
    pb = _probs(b).astype(np.float64)
    if pa.shape != pb.shape:
        raise ValueError(f"APM shape mismatch: {pa.shape} vs {pb.shape}")
    tv_per_row = 0.5 * np.abs(pa - pb).sum(axis=1)
    return float(1.0 - tv_per_row.mean())


def similarity_score_multihead(a: list, b: list) -> float:
    """Mean per-head similarity score across two equal-length head lists."""
    if len(a) != len(b):
        raise ValueError(f"head count mismatch: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("empty head list")
    return float(np.mean([similarity_score(x, y) for x, y in zip(a, b)]))


def similarity_score_stacked(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-head score on stacked (heads, L, L) arrays; same value as
    similarity_score_multihead on the unstacked lists."""
    if a.shape != b.shape:
        raise ValueError(f"stack shape mismatch: {a.shape} vs {b.shape}")
    tv_per_row = 0.5 * np.abs(a.astype(np.float64) - b.astype(np.float64)).sum(axis=-1)
    return float(1.0 - tv_per_row.mean())


@dataclass(frozen=True)
class MemoizationRate:
    """Fraction of (sequence, layer) computations replaced by lookups."""

    successes: int
    sequences: int
    layers: int

    @property
    def value(self) -> float:
        return self.successes / (self.sequences * self.layers)


def memoization_rate(m: int, n: int, l: int) -> MemoizationRate:
    """Memoization rate M / (N x L) with range validation."""
    if n <= 0 or l <= 0:
        raise ValueError(f"sequence and layer counts must be positive (n={n}, l={l})")
    if m < 0 or m > n * l:
        raise ValueError(f"success count {m} outside [0, {n * l}]")
    return MemoizationRate(successes=m, sequences=n, layers=l)
