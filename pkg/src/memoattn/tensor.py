"""Dense linear algebra and the self-attention forward pass.

Matrices are C-contiguous float32 ndarrays of shape (rows, cols). Two
attention paths are provided: the full path computes Q/K projections,
scaled dot products and softmax to produce per-head attention probability
matrices (APMs), while the memoized path takes APMs as given and only
runs the value projection and output assembly. Both paths share the same
value-side code so that feeding the full path's own APMs back through the
memoized path reproduces its output bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

APM_ROW_SUM_TOL = 1e-5


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float32 array, validating shape."""
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit dimension checking."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def normalize_rows(m: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-row mean/variance normalization (simplified layer norm)."""
    mu = m.mean(axis=1, keepdims=True)
    var = m.var(axis=1, keepdims=True)
    return (m - mu) / np.sqrt(var + eps)


@dataclass(frozen=True)
class Apm:
    """Per-head attention probability matrix: L x L, rows sum to 1."""

    probs: np.ndarray

    @property
    def seq_len(self) -> int:
        return self.probs.shape[0]

    def validate(self, tol: float = APM_ROW_SUM_TOL) -> None:
        p = self.probs
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError(f"APM must be square, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise ValueError("APM contains non-finite entries")
        if p.min() < -tol or p.max() > 1.0 + tol:
            raise ValueError("APM entries outside [0, 1]")
        row_err = np.abs(p.sum(axis=1) - 1.0).max()
        if row_err > tol:
            raise ValueError(f"APM rows not stochastic (max |sum-1| = {row_err:.2e})")


@dataclass
class LayerWeights:
    """Projection and FFN weights for one self-attention layer.

    w_q/w_k/w_v/w_out are H x H; the FFN is two linear layers with ReLU
    and biases, applied with a residual connection. H must be divisible
    by num_heads.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    num_heads: int

    def __post_init__(self) -> None:
        h = self.w_q.shape[0]
        if h % self.num_heads != 0:
            raise ValueError(f"hidden dim {h} not divisible by {self.num_heads} heads")

    @property
    def hidden_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.num_heads

    @classmethod
    def random(cls, hidden_dim: int, num_heads: int, ffn_dim: int,
               rng: np.random.Generator) -> "LayerWeights":
        """Seeded Gaussian init scaled by 1/sqrt(fan_in)."""
        def w(rows: int, cols: int) -> np.ndarray:
            return (rng.standard_normal((rows, cols)) / math.sqrt(rows)).astype(np.float32)

        h = hidden_dim
        return cls(
            w_q=w(h, h), w_k=w(h, h), w_v=w(h, h), w_out=w(h, h),
            ffn_w1=w(h, ffn_dim),
            ffn_b1=np.zeros(ffn_dim, dtype=np.float32),
            ffn_w2=w(ffn_dim, h),
            ffn_b2=np.zeros(h, dtype=np.float32),
            num_heads=num_heads,
        )


def _check_hidden(hidden: np.ndarray, w: LayerWeights) -> None:
    if hidden.ndim != 2 or hidden.shape[1] != w.hidden_dim:
        raise ValueError(
            f"hidden state shape {hidden.shape} incompatible with hidden dim {w.hidden_dim}"
        )


def _value_path(hidden: np.ndarray, w: LayerWeights, apm_probs: list[np.ndarray]) -> np.ndarray:
    """Shared V-side computation: concat_h(APM_h V_h) W_out.

    Both attention paths route through here so their outputs agree
    bit-exactly when given identical APMs.
    """
    v = matmul(hidden, w.w_v)
    ctx = np.empty_like(v)
    hd = w.head_dim
    for h in range(w.num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        ctx[:, sl] = apm_probs[h] @ v[:, sl]
    return matmul(ctx, w.w_out)


def attention_full(hidden: np.ndarray, w: LayerWeights) -> tuple[np.ndarray, list[Apm]]:
    """Full self-attention: Q/K/V projection, scaled QK^T, softmax, output.

    Returns the layer output and all per-head APMs (for database
    population). APM_h = softmax(Q_h K_h^T / sqrt(head_dim)).
    """
    _check_hidden(hidden, w)
    q = matmul(hidden, w.w_q)
    k = matmul(hidden, w.w_k)
    hd = w.head_dim
    scale = 1.0 / math.sqrt(hd)
    apm_probs = []
    for h in range(w.num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = (q[:, sl] @ k[:, sl].T) * scale
        apm_probs.append(softmax_rows(logits))
    out = _value_path(hidden, w, apm_probs)
    return out, [Apm(p) for p in apm_probs]


def attention_memoized(hidden: np.ndarray, w: LayerWeights, apms: list[Apm]) -> np.ndarray:
    """Reduced attention path: reuse given APMs, compute only V and output.

    Never touches w_q/w_k and never calls softmax.
    """
    _check_hidden(hidden, w)
    if len(apms) != w.num_heads:
        raise ValueError(f"expected {w.num_heads} APMs, got {len(apms)}")
    n = hidden.shape[0]
    for a in apms:
        p = a.probs if isinstance(a, Apm) else a
        if p.shape != (n, n):
            raise ValueError(f"APM shape {p.shape} does not match sequence length {n}")
    probs = [a.probs if isinstance(a, Apm) else a for a in apms]
    return _value_path(hidden, w, probs)


def feed_forward(hidden: np.ndarray, w: LayerWeights) -> np.ndarray:
    """Two-layer ReLU FFN with residual: x + relu(x W1 + b1) W2 + b2."""
    _check_hidden(hidden, w)
    inner = np.maximum(matmul(hidden, w.ffn_w1) + w.ffn_b1, 0.0)
    return hidden + matmul(inner, w.ffn_w2) + w.ffn_b2
