"""Toy corpora and masked-language-model batches."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError
from .nn_core import IGNORE_INDEX


@dataclass
class Corpus:
    """Fixed-length token sequences over ``vocab_size`` ids.

    The last id is the mask token. ``labels`` holds the generating regime of
    each synthetic sequence (used by the probe task); text corpora have none.
    """

    sequences: np.ndarray
    vocab_size: int
    labels: np.ndarray | None = None
    source: str = "synthetic"

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.vocab_size < 8:
            raise ContractError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.sequences.ndim != 2 or self.sequences.shape[0] == 0:
            raise ContractError(f"sequences must be a non-empty [n, seq_len] array, got {self.sequences.shape}")
        if self.sequences.min() < 0 or self.sequences.max() >= self.vocab_size:
            raise ContractError(f"token id outside [0, {self.vocab_size})")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    def __len__(self):
        return self.sequences.shape[0]

    def subset(self, idx) -> "Corpus":
        labels = None if self.labels is None else self.labels[idx]
        return Corpus(self.sequences[idx], self.vocab_size, labels, self.source)

    def split(self, eval_fraction: float, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        """Disjoint (train, eval) split by a seeded permutation."""
        if not 0 < eval_fraction < 1:
            raise ContractError("eval_fraction must be in (0, 1)")
        order = np.random.default_rng(seed).permutation(len(self))
        n_eval = max(1, int(round(eval_fraction * len(self))))
        return self.subset(np.sort(order[n_eval:])), self.subset(np.sort(order[:n_eval]))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.vocab_size}:{self.sequences.shape}".encode())
        h.update(self.sequences.astype("<i8").tobytes())
        if self.labels is not None:
            h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


def _synthetic(vocab_size: int, seq_len: int, n: int, regimes: int, sharpness: float, rank: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # order-2 Markov chains over every id except the mask token; the
    # next-token logits are additive low-rank functions of the two previous
    # tokens, which keeps the chain learnable by a small model
    k = vocab_size - 1
    tables = []
    for _ in range(regimes):
        a = rng.standard_normal((k, rank)) @ rng.standard_normal((rank, k)) / np.sqrt(rank)
        b = rng.standard_normal((k, rank)) @ rng.standard_normal((rank, k)) / np.sqrt(rank)
        logits = sharpness * (a[:, None, :] + b[None, :, :])
        p = np.exp(logits - logits.max(axis=-1, keepdims=True))
        tables.append(p / p.sum(axis=-1, keepdims=True))
    cum = np.cumsum(np.stack(tables), axis=-1)
    labels = rng.integers(0, regimes, n)
    seqs = np.empty((n, seq_len), dtype=np.int64)
    seqs[:, :min(2, seq_len)] = rng.integers(0, k, (n, min(2, seq_len)))
    for t in range(2, seq_len):
        c = cum[labels, seqs[:, t - 2], seqs[:, t - 1]]
        u = rng.random(n)[:, None] * c[:, -1:]
        seqs[:, t] = np.minimum((c < u).sum(axis=1), k - 1)
    return seqs, labels


def _text(path, vocab_size: int, seq_len: int) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    tokens = [tok for line in text.splitlines() for tok in line.split()]
    if not tokens:
        raise ContractError(f"corpus {path} is empty")
    if len(tokens) < seq_len:
        raise ContractError(f"corpus {path} has {len(tokens)} tokens, fewer than seq_len={seq_len}")
    # ids 0..V-3 for the most frequent words (ties by first appearance), V-2 unknown, V-1 mask
    ranked = [w for w, _ in Counter(tokens).most_common(vocab_size - 2)]
    vocab = {w: i for i, w in enumerate(ranked)}
    unk = vocab_size - 2
    ids = np.array([vocab.get(tok, unk) for tok in tokens], dtype=np.int64)
    n = len(ids) // seq_len
    return ids[:n * seq_len].reshape(n, seq_len)


def make_corpus(spec: Mapping, vocab_size: int, seq_len: int, seed: int) -> Corpus:
    """Build a corpus from ``{"kind": "synthetic", ...}`` or ``{"kind": "text", "path": ...}``.

    Synthetic options: ``n_sequences`` (4096), ``regimes`` (2), ``sharpness``
    (2.5) and ``rank`` (4) of the transition logits.
    """
    if vocab_size < 8:
        raise ContractError(f"vocab_size must be >= 8, got {vocab_size}")
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        rng = np.random.default_rng(seed)
        seqs, labels = _synthetic(vocab_size, seq_len, int(spec.get("n_sequences", 4096)),
                                  int(spec.get("regimes", 2)), float(spec.get("sharpness", 2.5)),
                                  int(spec.get("rank", 4)), rng)
        return Corpus(seqs, vocab_size, labels, "synthetic")
    if kind == "text":
        return Corpus(_text(spec["path"], vocab_size, seq_len), vocab_size, None, f"text:{spec['path']}")
    raise ContractError(f"unknown corpus kind {kind!r}")


@dataclass
class Batch:
    input_ids: np.ndarray
    targets: np.ndarray
    original: np.ndarray

    def __len__(self):
        return self.input_ids.shape[0]

    def rows(self, sl) -> "Batch":
        return Batch(self.input_ids[sl], self.targets[sl], self.original[sl])


def mask_batch(ids, mask_prob: float, rng, vocab_size: int) -> Batch:
    """Select positions with probability ``mask_prob``; of those 80% become the
    mask token, 10% a random non-mask token and 10% stay unchanged.

    ``rng`` is a Generator or an integer seed.
    """
    if not 0 < mask_prob < 1:
        raise ContractError(f"mask_prob must be in (0, 1), got {mask_prob}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    ids = np.asarray(ids, dtype=np.int64)
    mask_id = vocab_size - 1
    selected = rng.random(ids.shape) < mask_prob
    action = rng.random(ids.shape)
    random_tok = rng.integers(0, mask_id, ids.shape)
    inputs = ids.copy()
    inputs[selected & (action < 0.8)] = mask_id
    swap = selected & (action >= 0.8) & (action < 0.9)
    inputs[swap] = random_tok[swap]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return Batch(inputs, targets, ids)
