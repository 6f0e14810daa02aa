"""Proxy scoring of architectures, pairwise ranking accuracy and the
one-shot versus stand-alone ranking benchmark."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn_core as nn
from . import supernet as sn
from . import transformer as tf
from .data import Batch, Corpus, mask_batch
from .errors import ContractError
from .transformer import ArchConfig

LITERAL, CONCORDANT = "LITERAL", "CONCORDANT"
SCORE_COLUMNS = ("arch", "l_t", "d_m", "d_qkv", "d_f", "h", "mlm_loss", "probe_accuracy", "score")
EVAL_MASK_SEED = 12345


@dataclass
class EvalSet:
    """Held-out data with a fixed masking and a probe split.

    The probe is a two-class task on the generating regime of each sequence;
    it is absent for corpora without labels.
    """

    batch: Batch
    vocab_size: int
    probe_train: np.ndarray | None = None
    probe_train_y: np.ndarray | None = None
    probe_test: np.ndarray | None = None
    probe_test_y: np.ndarray | None = None
    digest: str = ""


def make_eval_set(corpus: Corpus, mask_prob: float = 0.15, seed: int = EVAL_MASK_SEED) -> EvalSet:
    batch = mask_batch(corpus.sequences, mask_prob, seed, corpus.vocab_size)
    es = EvalSet(batch, corpus.vocab_size, digest=corpus.digest())
    if corpus.labels is not None and len(np.unique(corpus.labels)) > 1:
        order = np.random.default_rng(seed).permutation(len(corpus))
        half = len(corpus) // 2
        tr, te = np.sort(order[:half]), np.sort(order[half:])
        es.probe_train, es.probe_train_y = corpus.sequences[tr], corpus.labels[tr]
        es.probe_test, es.probe_test_y = corpus.sequences[te], corpus.labels[te]
    return es


def pooled(params, arch: ArchConfig, ids: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Mean over positions of the final hidden states."""
    out = [tf.encoder_forward(params, arch, ids[i:i + chunk]).hidden.value.mean(axis=1)
           for i in range(0, len(ids), chunk)]
    return np.concatenate(out)


def probe_accuracy(params, arch: ArchConfig, es: EvalSet) -> float:
    """Least-squares linear probe on pooled features; test-split accuracy."""
    if es.probe_train is None:
        return math.nan
    classes = np.unique(es.probe_train_y)
    xtr = np.hstack([pooled(params, arch, es.probe_train), np.ones((len(es.probe_train), 1))])
    xte = np.hstack([pooled(params, arch, es.probe_test), np.ones((len(es.probe_test), 1))])
    ytr = (es.probe_train_y[:, None] == classes[None, :]).astype(np.float64)
    w, *_ = np.linalg.lstsq(xtr, ytr, rcond=None)
    pred = classes[np.argmax(xte @ w, axis=1)]
    return float(np.mean(pred == es.probe_test_y))


def mlm_eval_loss(params, arch: ArchConfig, es: EvalSet, chunk: int = 256) -> float:
    """Held-out masked-token cross-entropy, weighted by masked positions."""
    total, count = 0.0, 0
    b = es.batch
    for i in range(0, len(b), chunk):
        part = b.rows(slice(i, i + chunk))
        n = int(np.sum(part.targets != nn.IGNORE_INDEX))
        if n == 0:
            continue
        out = tf.encoder_forward(params, arch, part.input_ids)
        total += float(nn.cross_entropy_mean(out.tape, out.logits, part.targets).value) * n
        count += n
    return total / count if count else 0.0


@dataclass
class ArchScore:
    arch: ArchConfig
    mlm_loss: float
    probe_accuracy: float
    score: float


def combine(mlm_loss: float, probe_acc: float, vocab_size: int) -> float:
    """Mean of the normalised negative loss and the probe accuracy."""
    neg = -mlm_loss / math.log(vocab_size)
    if math.isnan(probe_acc):
        return neg
    return 0.5 * (neg + probe_acc)


def score_params(params, arch: ArchConfig, es: EvalSet) -> ArchScore:
    loss = mlm_eval_loss(params, arch, es)
    acc = probe_accuracy(params, arch, es)
    return ArchScore(arch, loss, acc, combine(loss, acc, es.vocab_size))


def proxy_score(supernet: sn.SuperNet, arch: ArchConfig, strategy, es: EvalSet) -> ArchScore:
    """Score of the sub-model read from ``supernet``; nothing is modified."""
    view = sn.extract_submodel(supernet, arch, strategy)
    return score_params(view.params(), arch, es)


def model_score(model: sn.Model, es: EvalSet) -> ArchScore:
    return score_params(model.params, model.arch, es)


def pairwise_accuracy(f_scores: Sequence[float], s_scores: Sequence[float], mode: str = CONCORDANT) -> float:
    """Agreement of two score vectors over ordered pairs.

    The numerator counts ordered pairs (self-pairs included) with
    ``f1 >= f2`` and ``s1 >= s2``. LITERAL divides by ``n**2``; CONCORDANT
    divides by the number of ordered pairs with ``s1 >= s2``.
    """
    f = np.asarray(f_scores, dtype=np.float64)
    s = np.asarray(s_scores, dtype=np.float64)
    if f.shape != s.shape or f.ndim != 1:
        raise ContractError(f"score vectors must be 1-D of equal length, got {f.shape} and {s.shape}")
    if len(f) < 2:
        raise ContractError("need at least two scores")
    sg = s[:, None] >= s[None, :]
    num = int(np.sum((f[:, None] >= f[None, :]) & sg))
    if mode == LITERAL:
        return num / len(f) ** 2
    if mode == CONCORDANT:
        return num / int(np.sum(sg))
    raise ContractError(f"mode must be LITERAL or CONCORDANT, got {mode!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    scores: list[ArchScore]
    metadata: dict = field(default_factory=dict)

    def values(self) -> np.ndarray:
        return np.array([s.score for s in self.scores])

    def write(self, path) -> None:
        """CSV of per-architecture scores plus a ``.json`` sidecar with hashes and config."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_COLUMNS)
            for s in self.scores:
                a = s.arch
                w.writerow([a.compact(), a.l_t, a.d_m, a.d_q, a.d_f, a.h,
                            repr(float(s.mlm_loss)), repr(float(s.probe_accuracy)), repr(float(s.score))])
        path.with_suffix(".json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")


def read_scores(path) -> list[ArchScore]:
    with open(path, newline="") as fh:
        return [ArchScore(ArchConfig.parse(r["arch"]), float(r["mlm_loss"]), float(r["probe_accuracy"]),
                          float(r["score"])) for r in csv.DictReader(fh)]


@dataclass
class BenchmarkResult:
    oneshot: ScoreReport
    standalone: ScoreReport
    accuracy: dict

    def write_scatter(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("arch", "oneshot_score", "standalone_score"))
            for a, b in zip(self.oneshot.scores, self.standalone.scores):
                w.writerow([a.arch.compact(), repr(float(a.score)), repr(float(b.score))])


def _cache_key(arch: ArchConfig, cfg, corpus: Corpus) -> str:
    blob = json.dumps({"arch": arch.to_dict(), "cfg": cfg.to_dict(), "corpus": corpus.digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ranking_benchmark(supernet: sn.SuperNet, archs: Sequence[ArchConfig], train_corpus: Corpus,
                      es: EvalSet, standalone_cfg, strategy=sn.Strategy.HEAD_PREFIX,
                      cache_dir=None, metadata: dict | None = None, log=None) -> BenchmarkResult:
    """Score every architecture by supernet extraction and by stand-alone
    training under ``standalone_cfg``; compare the two rankings.

    Stand-alone checkpoints are cached in ``cache_dir`` under a key derived
    from the architecture, the training config and the corpus.
    """
    from .train import standalone_train

    if len(archs) < 4:
        raise ContractError(f"need at least 4 architectures, got {len(archs)}")
    meta = dict(metadata or {})
    meta.update({"eval_corpus_sha256": es.digest, "train_corpus_sha256": train_corpus.digest(),
                 "supernet_sha256": supernet.digest()})
    oneshot = [proxy_score(supernet, a, strategy, es) for a in archs]
    alone = []
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    hits = 0
    for a in archs:
        path = cache / f"standalone-{_cache_key(a, standalone_cfg, train_corpus)}.atbt" if cache else None
        cached = path is not None and path.exists()
        if cached:
            model = sn.Model.load(path)
            hits += 1
        else:
            model, _ = standalone_train(a, train_corpus, standalone_cfg)
            if path is not None:
                model.save(path, {"train_config": standalone_cfg.to_dict()})
        if log:
            log(f"stand-alone {a.compact()}" + (" (cached)" if cached else ""))
        alone.append(model_score(model, es))
    f = [s.score for s in oneshot]
    s = [s.score for s in alone]
    acc = {
        "oneshot_vs_standalone": {LITERAL: pairwise_accuracy(f, s, LITERAL),
                                  CONCORDANT: pairwise_accuracy(f, s, CONCORDANT)},
        "standalone_vs_self": {LITERAL: pairwise_accuracy(s, s, LITERAL),
                               CONCORDANT: pairwise_accuracy(s, s, CONCORDANT)},
        "cache_hits": hits,
    }
    meta["pairwise_accuracy"] = {k: v for k, v in acc.items() if k != "cache_hits"}
    return BenchmarkResult(ScoreReport(oneshot, {**meta, "kind": "oneshot"}),
                           ScoreReport(alone, {**meta, "kind": "standalone",
                                               "standalone_config": standalone_cfg.to_dict()}), acc)
