"""Synthetic corpora with controlled cross-sequence redundancy.

Sequences are generated by copying one of a small set of template
sequences and independently resampling each position with a configurable
mutation probability. Low mutation rates plant heavy structural overlap
across sequences (the redundancy the memoization engine exploits); a
mutation rate of 1 yields an i.i.d. corpus with no planted structure.

Token id 0 is reserved for padding; generated tokens lie in
[1, vocab_size).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

PAD_TOKEN = 0

CORPUS_MAGIC = "# memoattn-corpus v1"


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int
    seq_len: int
    num_sequences: int
    num_templates: int = 4
    mutation_rate: float = 0.2
    seed: int = 0
    label_rule: str = "template"  # "template" or "parity"

    def __post_init__(self) -> None:
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError(f"mutation_rate {self.mutation_rate} outside [0, 1]")
        if self.num_templates < 1:
            raise ValueError("need at least one template")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the pad token")
        if self.label_rule not in ("template", "parity"):
            raise ValueError(f"unknown label_rule {self.label_rule!r}")

    @property
    def num_classes(self) -> int:
        return self.num_templates if self.label_rule == "template" else 2


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray = field(repr=False)
    label: int = 0


def _templates(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.integers(1, spec.vocab_size, size=(spec.num_templates, spec.seq_len),
                        dtype=np.int64)


def generate(spec: CorpusSpec) -> list[TokenSequence]:
    """Generate the corpus. Deterministic per (seed, index): growing
    num_sequences extends the corpus without reshuffling the prefix."""
    templates = _templates(spec)
    out = []
    for i in range(spec.num_sequences):
        rng = np.random.default_rng([spec.seed, 1, i])
        t = int(rng.integers(0, spec.num_templates))
        tokens = templates[t].copy()
        mutate = rng.random(spec.seq_len) < spec.mutation_rate
        fresh = rng.integers(1, spec.vocab_size, size=spec.seq_len, dtype=np.int64)
        tokens[mutate] = fresh[mutate]
        if spec.label_rule == "template":
            label = t
        else:
            label = int(tokens.sum() % 2)
        out.append(TokenSequence(tokens=tokens, label=label))
    return out


def tokenize(text: str, vocab_size: int, seq_len: int) -> TokenSequence:
    """Whitespace tokenization by stable word hash, padded/truncated to
    seq_len with the reserved pad token."""
    if not text.strip():
        raise ValueError("empty text")
    words = text.split()
    ids = [1 + zlib.crc32(w.encode("utf-8")) % (vocab_size - 1) for w in words]
    ids = ids[:seq_len]
    ids += [PAD_TOKEN] * (seq_len - len(ids))
    return TokenSequence(tokens=np.array(ids, dtype=np.int64), label=0)


def save_corpus(path, spec: CorpusSpec, sequences: list[TokenSequence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            f"{CORPUS_MAGIC} vocab_size={spec.vocab_size} seq_len={spec.seq_len} "
            f"num_templates={spec.num_templates} mutation_rate={spec.mutation_rate} "
            f"seed={spec.seed} label_rule={spec.label_rule}\n"
        )
        for s in sequences:
            f.write(f"{s.label} " + " ".join(str(t) for t in s.tokens.tolist()) + "\n")


def load_corpus(path) -> tuple[CorpusSpec, list[TokenSequence]]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith(CORPUS_MAGIC):
            raise ValueError(f"not a corpus file: {path}")
        meta = dict(kv.split("=", 1) for kv in header[len(CORPUS_MAGIC):].split())
        sequences = []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            sequences.append(TokenSequence(
                tokens=np.array([int(t) for t in parts[1:]], dtype=np.int64),
                label=int(parts[0]),
            ))
    spec = CorpusSpec(
        vocab_size=int(meta["vocab_size"]),
        seq_len=int(meta["seq_len"]),
        num_sequences=len(sequences),
        num_templates=int(meta["num_templates"]),
        mutation_rate=float(meta["mutation_rate"]),
        seed=int(meta["seed"]),
        label_rule=meta["label_rule"],
    )
    return spec, sequences
