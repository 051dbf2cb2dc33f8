"""Seeded synthetic character corpus and calibration-set handling.

The corpus is Markov text over a 27-symbol alphabet (a-z plus space), one
document per line, UTF-8. A deterministic 90/10 split by sequence index
separates calibration from held-out evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
VOCAB_SIZE = len(ALPHABET)
_CHAR_TO_ID = {c: i for i, c in enumerate(ALPHABET)}


def generate_corpus(seed: int, n_docs: int = 64, doc_len: int = 128) -> list[str]:
    """Markov chain text: a seeded sparse-ish transition matrix gives each
    symbol a skewed successor distribution, so character statistics are
    non-uniform (which the activation-aware metrics rely on)."""
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.full(VOCAB_SIZE, 0.12), size=VOCAB_SIZE)
    docs = []
    for _ in range(n_docs):
        state = int(rng.integers(VOCAB_SIZE))
        chars = []
        for _ in range(doc_len):
            state = int(rng.choice(VOCAB_SIZE, p=trans[state]))
            chars.append(ALPHABET[state])
        docs.append("".join(chars))
    return docs


def write_corpus(path, docs: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(doc + "\n")


def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def encode(doc: str) -> np.ndarray:
    try:
        return np.array([_CHAR_TO_ID[c] for c in doc], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} not in alphabet") from None


@dataclass
class CalibrationSet:
    """Fixed-length token sequences for calibration or evaluation."""

    sequences: np.ndarray  # (num, context), int64
    context: int
    vocab: int

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2 or self.sequences.shape[1] < 2:
            raise ValueError("sequences must be 2-d with length >= 2")
        if self.sequences.size and self.sequences.max() >= self.vocab:
            raise ValueError("token id out of vocabulary range")

    def __len__(self):
        return self.sequences.shape[0]


def build_sequences(docs: list[str], context: int, vocab: int = VOCAB_SIZE) -> CalibrationSet:
    chunks = []
    for doc in docs:
        ids = encode(doc)
        for start in range(0, len(ids) - context + 1, context):
            chunks.append(ids[start:start + context])
    if not chunks:
        raise ValueError("corpus too short for the requested context length")
    return CalibrationSet(np.stack(chunks), context, vocab)


def split_calibration(full: CalibrationSet, heldout_frac: float = 0.1
                      ) -> tuple[CalibrationSet, CalibrationSet]:
    """Deterministic split by sequence index: last fraction is held out."""
    n = len(full)
    n_held = max(1, int(round(n * heldout_frac)))
    if n_held >= n:
        raise ValueError("not enough sequences to split")
    calib = CalibrationSet(full.sequences[: n - n_held], full.context, full.vocab)
    held = CalibrationSet(full.sequences[n - n_held:], full.context, full.vocab)
    return calib, held
