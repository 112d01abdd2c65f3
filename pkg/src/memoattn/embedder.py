"""Learned embedding of hidden states into a low-dimensional search space.

A three-layer linear MLP maps the mean-pooled hidden state of a sequence
to a d-dimensional feature vector. Two standardization layers (before and
after the first linear layer) use stored statistics and act as fixed
affine maps, so the whole embedder is affine end-to-end; all neurons are
linear by design.

Training is Siamese: both hidden states of a pair go through the same
parameter set, the L2 distance between the two embeddings is converted to
a predicted similarity (1 - distance, clamped at 0), and squared error
against the ground-truth APM similarity is minimized with minibatch SGD
plus momentum. Gradients are hand-written and validated against central
finite differences.

Standardization statistics are computed from the training inputs once,
before the first SGD step, and frozen: training and inference see the
same fixed affine normalization, never batch statistics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .similarity import similarity_score_stacked

EMBEDDER_MAGIC = b"MEMB"
EMBEDDER_VERSION = 1

_SIG_FLOOR = 1e-6


@dataclass(frozen=True)
class EmbedderConfig:
    input_dim: int
    hidden_dims: tuple[int, int] = (128, 128)
    output_dim: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class Embedder:
    """Affine embedding stack with frozen normalization statistics."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    mu0: np.ndarray
    sig0: np.ndarray
    mu1: np.ndarray
    sig1: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dims(self) -> tuple[int, int]:
        return (self.w1.shape[1], self.w2.shape[1])

    @property
    def output_dim(self) -> int:
        return self.w3.shape[1]

    @classmethod
    def init(cls, config: EmbedderConfig, dtype=np.float64) -> "Embedder":
        """Seeded Gaussian init; normalization starts as the identity map."""
        rng = np.random.default_rng([config.seed, 3])
        h = config.input_dim
        h1, h2 = config.hidden_dims
        d = config.output_dim

        def w(rows: int, cols: int) -> np.ndarray:
            return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(dtype)

        return cls(
            w1=w(h, h1), b1=np.zeros(h1, dtype=dtype),
            w2=w(h1, h2), b2=np.zeros(h2, dtype=dtype),
            w3=w(h2, d), b3=np.zeros(d, dtype=dtype),
            mu0=np.zeros(h, dtype=dtype), sig0=np.ones(h, dtype=dtype),
            mu1=np.zeros(h1, dtype=dtype), sig1=np.ones(h1, dtype=dtype),
        )

    def forward_pooled(self, x: np.ndarray) -> np.ndarray:
        """Embed a batch of pooled H-vectors: (B, H) -> (B, d)."""
        u0 = (x - self.mu0) / self.sig0
        z1 = u0 @ self.w1 + self.b1
        u1 = (z1 - self.mu1) / self.sig1
        z2 = u1 @ self.w2 + self.b2
        return z2 @ self.w3 + self.b3

    def finalize(self) -> "Embedder":
        """Cast all parameters and statistics to float32 for serving."""
        return Embedder(**{
            k: getattr(self, k).astype(np.float32)
            for k in (*self.PARAM_NAMES, "mu0", "sig0", "mu1", "sig1")
        })


def pool_hidden(hs: np.ndarray) -> np.ndarray:
    """Mean-pool an L x H hidden state over tokens to an H-vector."""
    if hs.ndim != 2:
        raise ValueError(f"hidden state must be 2-D, got {hs.shape}")
    return hs.mean(axis=0)


def embed(e: Embedder, hs: np.ndarray) -> np.ndarray:
    """Feature vector for one hidden state; always float32."""
    if hs.shape[1] != e.input_dim:
        raise ValueError(f"hidden dim {hs.shape[1]} != embedder input {e.input_dim}")
    out = e.forward_pooled(pool_hidden(hs)[None, :])[0]
    return out.astype(np.float32)


def embed_batch(e: Embedder, hidden_states: list[np.ndarray]) -> np.ndarray:
    """Feature vectors for a batch of hidden states: (B, d) float32."""
    pooled = np.stack([pool_hidden(h) for h in hidden_states])
    return e.forward_pooled(pooled.astype(e.w1.dtype)).astype(np.float32)


def predicted_similarity(fa: np.ndarray, fb: np.ndarray) -> float:
    """max(0, 1 - ||fa - fb||_2): distance 0 scores 1, distance >= 1 scores 0."""
    if fa.shape != fb.shape:
        raise ValueError(f"feature length mismatch: {fa.shape} vs {fb.shape}")
    d = float(np.linalg.norm(np.asarray(fa, dtype=np.float64) -
                             np.asarray(fb, dtype=np.float64)))
    return max(0.0, 1.0 - d)


def distance_to_similarity(dist: float) -> float:
    """Index-space Euclidean distance mapped to predicted similarity."""
    return max(0.0, 1.0 - float(dist))


def siamese_loss(fa: np.ndarray, fb: np.ndarray, gt: float) -> float:
    """(predicted_similarity - ground truth)^2 for one pair."""
    diff = predicted_similarity(fa, fb) - gt
    return diff * diff


@dataclass(frozen=True)
class TrainingPair:
    hs_a: np.ndarray = field(repr=False)
    hs_b: np.ndarray = field(repr=False)
    ground_truth_sim: float = 0.0


def pair_sampler(hidden_states: list[np.ndarray], apm_stacks: list[np.ndarray],
                 pairs_per_anchor: int, seed: int) -> list[TrainingPair]:
    """Sample partner records uniformly without replacement per anchor and
    attach ground-truth APM similarity. Unordered duplicates are dropped,
    so two records with one pair each yield a single distinct pair."""
    n = len(hidden_states)
    if n < 2:
        raise ValueError(f"need at least 2 records to form pairs, got {n}")
    if len(apm_stacks) != n:
        raise ValueError("hidden state and APM counts differ")
    pairs = []
    seen = set()
    for i in range(n):
        rng = np.random.default_rng([seed, 4, i])
        others = np.delete(np.arange(n), i)
        k = min(pairs_per_anchor, n - 1)
        partners = rng.choice(others, size=k, replace=False)
        for j in partners:
            j = int(j)
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            seen.add(key)
            gt = similarity_score_stacked(apm_stacks[i], apm_stacks[j])
            pairs.append(TrainingPair(hidden_states[i], hidden_states[j], gt))
    return pairs


def _forward_cached(e: Embedder, x: np.ndarray) -> dict:
    u0 = (x - e.mu0) / e.sig0
    z1 = u0 @ e.w1 + e.b1
    u1 = (z1 - e.mu1) / e.sig1
    z2 = u1 @ e.w2 + e.b2
    z3 = z2 @ e.w3 + e.b3
    return {"u0": u0, "u1": u1, "z2": z2, "z3": z3}


def _backward_branch(e: Embedder, cache: dict, dz3: np.ndarray,
                     grads: dict[str, np.ndarray]) -> None:
    grads["w3"] += cache["z2"].T @ dz3
    grads["b3"] += dz3.sum(axis=0)
    dz2 = dz3 @ e.w3.T
    grads["w2"] += cache["u1"].T @ dz2
    grads["b2"] += dz2.sum(axis=0)
    du1 = dz2 @ e.w2.T
    dz1 = du1 / e.sig1
    grads["w1"] += cache["u0"].T @ dz1
    grads["b1"] += dz1.sum(axis=0)


def loss_and_grads(e: Embedder, xa: np.ndarray, xb: np.ndarray,
                   gt: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean Siamese loss over a batch of pooled input pairs, plus analytic
    gradients for the shared parameter set (both branches accumulated)."""
    ca = _forward_cached(e, xa)
    cb = _forward_cached(e, xb)
    diff = ca["z3"] - cb["z3"]
    dist = np.linalg.norm(diff, axis=1)
    pred = np.maximum(0.0, 1.0 - dist)
    resid = pred - gt
    loss = float(np.mean(resid ** 2))

    n = xa.shape[0]
    # d(loss)/d(dist): clamp kills the gradient where distance >= 1,
    # and the norm's subgradient at dist == 0 is taken as 0.
    ddist = np.where(dist < 1.0, -2.0 * resid / n, 0.0)
    safe = np.where(dist > 0.0, dist, 1.0)
    ddiff = diff * np.where(dist > 0.0, ddist / safe, 0.0)[:, None]

    grads = {k: np.zeros_like(getattr(e, k)) for k in Embedder.PARAM_NAMES}
    _backward_branch(e, ca, ddiff, grads)
    _backward_branch(e, cb, -ddiff, grads)
    return loss, grads


def _freeze_stats(e: Embedder, inputs: np.ndarray) -> None:
    """Set both standardization layers' statistics from the training
    inputs (the second from activations under the initial weights)."""
    e.mu0 = inputs.mean(axis=0)
    e.sig0 = np.maximum(inputs.std(axis=0), _SIG_FLOOR)
    u0 = (inputs - e.mu0) / e.sig0
    z1 = u0 @ e.w1 + e.b1
    e.mu1 = z1.mean(axis=0)
    e.sig1 = np.maximum(z1.std(axis=0), _SIG_FLOOR)


def train(config: EmbedderConfig, pairs: list[TrainingPair]
          ) -> tuple[Embedder, list[float]]:
    """Train the Siamese embedder with minibatch SGD + momentum.

    Returns the trained embedder (float32) and the per-epoch loss curve.
    Deterministic for a fixed config seed and pair list.
    """
    if not pairs:
        raise ValueError("empty training pair set")
    xa = np.stack([pool_hidden(p.hs_a) for p in pairs]).astype(np.float64)
    xb = np.stack([pool_hidden(p.hs_b) for p in pairs]).astype(np.float64)
    gt = np.array([p.ground_truth_sim for p in pairs], dtype=np.float64)
    if xa.shape[1] != config.input_dim:
        raise ValueError(
            f"pair hidden dim {xa.shape[1]} != config input_dim {config.input_dim}"
        )

    e = Embedder.init(config, dtype=np.float64)
    _freeze_stats(e, np.vstack([xa, xb]))

    vel = {k: np.zeros_like(getattr(e, k)) for k in Embedder.PARAM_NAMES}
    order_rng = np.random.default_rng([config.seed, 5])
    n = len(pairs)
    curve = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = loss_and_grads(e, xa[idx], xb[idx], gt[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            epoch_loss += loss * len(idx)
            for k in Embedder.PARAM_NAMES:
                vel[k] = config.momentum * vel[k] + grads[k]
                setattr(e, k, getattr(e, k) - config.learning_rate * vel[k])
        curve.append(epoch_loss / n)
    return e.finalize(), curve


def save_embedder(path, e: Embedder) -> None:
    """Versioned binary layout: magic, version, dims, normalization
    statistics, then row-major little-endian float32 weights."""
    h, (h1, h2), d = e.input_dim, e.hidden_dims, e.output_dim
    with open(path, "wb") as f:
        f.write(EMBEDDER_MAGIC)
        f.write(struct.pack("<5I", EMBEDDER_VERSION, h, h1, h2, d))
        for name in ("mu0", "sig0", "mu1", "sig1", *Embedder.PARAM_NAMES):
            f.write(np.ascontiguousarray(getattr(e, name), dtype="<f4").tobytes())


def load_embedder(path) -> Embedder:
    with open(path, "rb") as f:
        if f.read(4) != EMBEDDER_MAGIC:
            raise ValueError(f"not an embedder file: {path}")
        version, h, h1, h2, d = struct.unpack("<5I", f.read(20))
        if version != EMBEDDER_VERSION:
            raise ValueError(f"unsupported embedder version {version}")

        def arr(*shape: int) -> np.ndarray:
            n = int(np.prod(shape))
            a = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float32)
            return a.reshape(shape)

        return Embedder(
            mu0=arr(h), sig0=arr(h), mu1=arr(h1), sig1=arr(h1),
            w1=arr(h, h1), b1=arr(h1), w2=arr(h1, h2), b2=arr(h2),
            w3=arr(h2, d), b3=arr(d),
        )
