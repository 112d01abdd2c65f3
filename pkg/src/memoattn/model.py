"""Seeded toy transformer: the workload whose attention gets memoized.

A stack of self-attention layers with residual connections and per-row
mean/variance normalization after each sub-block, over a seeded random
token embedding table. Weights are fixed at construction (no model
training at this scale); only the linear classifier head is fitted, by
ridge regression on pooled final hidden states, so that synthetic task
accuracy carries signal.

Layer structure, driven one layer at a time by the inference engine:

    h_in                      (the memoization key for this layer)
    attn = attention(h_in)    full path or memoized path
    h    = rownorm(h_in + attn)
    h    = rownorm(feed_forward(h))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TokenSequence
from .tensor import (
    Apm,
    LayerWeights,
    attention_full,
    attention_memoized,
    feed_forward,
    normalize_rows,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int
    hidden_dim: int = 64
    num_heads: int = 2
    num_layers: int = 2
    num_classes: int = 2
    ffn_dim: int = 0  # 0 means 2 * hidden_dim
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim > 0 else 2 * self.hidden_dim


def stack_apms(apms: list[Apm]) -> np.ndarray:
    """(heads, L, L) float32 stack of per-head APMs."""
    return np.stack([a.probs for a in apms])


class ToyTransformer:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 2])
        h = config.hidden_dim
        self.token_emb = (rng.standard_normal((config.vocab_size, h)) / np.sqrt(h)
                          ).astype(np.float32)
        self.pos_emb = (rng.standard_normal((config.seq_len, h)) / np.sqrt(h)
                        ).astype(np.float32)
        self.layers = [
            LayerWeights.random(h, config.num_heads, config.ffn_width, rng)
            for _ in range(config.num_layers)
        ]
        self.head_w = np.zeros((h, config.num_classes), dtype=np.float32)
        self.head_b = np.zeros(config.num_classes, dtype=np.float32)

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def embed_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Initial hidden state: token + positional embedding, row-normed."""
        if tokens.shape[0] != self.config.seq_len:
            raise ValueError(
                f"sequence length {tokens.shape[0]} != model seq_len {self.config.seq_len}"
            )
        return normalize_rows(self.token_emb[tokens] + self.pos_emb)

    def _finish_layer(self, h_in: np.ndarray, attn_out: np.ndarray,
                      layer: int) -> np.ndarray:
        h = normalize_rows(h_in + attn_out)
        return normalize_rows(feed_forward(h, self.layers[layer]))

    def layer_forward_full(self, h_in: np.ndarray, layer: int
                           ) -> tuple[np.ndarray, list[Apm]]:
        attn_out, apms = attention_full(h_in, self.layers[layer])
        return self._finish_layer(h_in, attn_out, layer), apms

    def layer_forward_memoized(self, h_in: np.ndarray, layer: int,
                               apm_probs: np.ndarray) -> np.ndarray:
        """Run the layer with externally supplied APMs (heads, L, L)."""
        attn_out = attention_memoized(h_in, self.layers[layer], list(apm_probs))
        return self._finish_layer(h_in, attn_out, layer)

    def logits_from_hidden(self, hidden: np.ndarray) -> np.ndarray:
        pooled = hidden.mean(axis=0)
        return pooled @ self.head_w + self.head_b

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        """Baseline forward pass: full attention everywhere."""
        h = self.embed_tokens(tokens)
        for i in range(self.num_layers):
            h, _ = self.layer_forward_full(h, i)
        return self.logits_from_hidden(h)

    def forward_collect(self, tokens: np.ndarray
                        ) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        """Forward pass that also returns, per layer, the layer-input
        hidden state and the stacked APMs (for database population)."""
        h = self.embed_tokens(tokens)
        collected = []
        for i in range(self.num_layers):
            h_in = h
            h, apms = self.layer_forward_full(h, i)
            collected.append((h_in, stack_apms(apms)))
        return self.logits_from_hidden(h), collected

    def fit_head(self, sequences: list[TokenSequence], ridge: float = 1e-3) -> None:
        """Fit the classifier head by ridge regression on pooled final
        hidden states against one-hot labels. Deterministic."""
        feats = []
        for s in sequences:
            h = self.embed_tokens(s.tokens)
            for i in range(self.num_layers):
                h, _ = self.layer_forward_full(h, i)
            feats.append(h.mean(axis=0))
        x = np.array(feats, dtype=np.float64)
        x = np.hstack([x, np.ones((x.shape[0], 1))])
        y = np.zeros((x.shape[0], self.config.num_classes), dtype=np.float64)
        for i, s in enumerate(sequences):
            y[i, s.label] = 1.0
        gram = x.T @ x + ridge * np.eye(x.shape[1])
        w = np.linalg.solve(gram, x.T @ y)
        self.head_w = w[:-1].astype(np.float32)
        self.head_b = w[-1].astype(np.float32)
