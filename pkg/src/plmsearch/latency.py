"""Latency measurement, latency datasets and the feed-forward latency predictor."""

from __future__ import annotations

import csv
import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import nn_core as nn
from . import transformer as tf
from .errors import CheckpointError, ContractError, MeasurementError
from .search import KD, SearchSpace
from .transformer import ArchConfig

MS_PER_MAC = 1e-6
PRED_FLOOR_MS = 1e-6
DATASET_COLUMNS = ("l_t", "d_m", "d_q", "d_v", "d_f", "h", "strategy", "latency_ms")
MEASURED, ANALYTIC = "MEASURED", "ANALYTIC"


def measure_latency(arch: ArchConfig, seq_len: int, runs: int, vocab_size: int = 64,
                    warmup: int = 2, seed: int = 0) -> float:
    """Median wall time (ms) of single-sequence forward passes."""
    if runs < 3:
        raise ContractError("runs must be >= 3")
    rng = np.random.default_rng(seed)
    params = tf.init_params(arch, vocab_size, seq_len, rng)
    ids = rng.integers(0, vocab_size, seq_len)
    for _ in range(max(warmup, 2)):
        tf.encoder_forward(params, arch, ids)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        tf.encoder_forward(params, arch, ids)
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    resolution = time.get_clock_info("perf_counter").resolution
    if med <= 10 * resolution:
        raise MeasurementError(f"median {med:.3g}s is within 10x of timer resolution {resolution:.3g}s")
    return med * 1e3


def analytic_latency(arch: ArchConfig, seq_len: int) -> float:
    """Multiply-accumulate count scaled to pseudo-milliseconds."""
    return tf.flops_forward(arch, seq_len) * MS_PER_MAC


@dataclass
class LatencySample:
    arch: ArchConfig
    features: np.ndarray
    latency_ms: float


def build_latency_dataset(space: SearchSpace, n: int, seq_len: int, mode: str = ANALYTIC, seed: int = 0,
                          runs: int = 5) -> list[LatencySample]:
    """``n`` distinct uniform draws from ``space`` with their latencies."""
    if mode not in (MEASURED, ANALYTIC):
        raise ContractError(f"mode must be MEASURED or ANALYTIC, got {mode!r}")
    rng = np.random.default_rng(seed)
    if space.cardinality() <= n:
        warnings.warn(f"space has only {space.cardinality()} points; collecting all of them", stacklevel=2)
        archs = list(space.enumerate())
    else:
        seen = set()
        archs = []
        while len(archs) < n:
            a = space.sample(rng)
            if a not in seen:
                seen.add(a)
                archs.append(a)
    out = []
    for a in archs:
        lat = analytic_latency(a, seq_len) if mode == ANALYTIC else measure_latency(a, seq_len, runs)
        out.append(LatencySample(a, space.features(a), float(lat)))
    return out


def write_dataset(path, samples, space: SearchSpace) -> None:
    strategy = "PER_HEAD_SLICE" if space.mode == KD else "HEAD_PREFIX"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for s in samples:
            a = s.arch
            w.writerow([a.l_t, a.d_m, a.d_q, a.d_v, a.d_f, a.h, strategy, repr(float(s.latency_ms))])


def read_dataset(path, space: SearchSpace) -> list[LatencySample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            a = ArchConfig(int(row["l_t"]), int(row["d_m"]), int(row["d_q"]), int(row["d_q"]),
                           int(row["d_v"]), int(row["d_f"]), int(row["d_m"]), int(row["h"]))
            out.append(LatencySample(a, space.features(a), float(row["latency_ms"])))
    return out


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

HIDDEN = 64


def _raw(arch: ArchConfig) -> np.ndarray:
    return np.array([arch.l_t, arch.d_m, arch.d_q, arch.d_v, arch.d_f], dtype=np.float64)


@dataclass
class LatencyModel:
    """5 -> 64 -> 64 -> 1 rectifier network on normalised features.

    The network regresses standardised log-latency, so squared error on its
    output is a relative error on latency.
    """

    weights: dict
    feature_scale: np.ndarray
    log_mean: float
    log_std: float
    space: SearchSpace | None = None
    metadata: dict = field(default_factory=dict)

    def _forward(self, tape, feats):
        if tape is None:
            tape, w = nn.Tape(record=False), self.weights
        else:
            w = {k: tape.param(k, v) for k, v in self.weights.items()}
        x = nn.relu(tape, nn.add(tape, nn.matmul(tape, feats, w["w1"]), w["b1"]))
        x = nn.relu(tape, nn.add(tape, nn.matmul(tape, x, w["w2"]), w["b2"]))
        return nn.add(tape, nn.matmul(tape, x, w["w3"]), w["b3"])

    def predict_features(self, feats) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        out = self._forward(None, feats).value[:, 0]
        return np.maximum(np.exp(out * self.log_std + self.log_mean), PRED_FLOOR_MS)

    def features(self, arch: ArchConfig) -> np.ndarray:
        return _raw(arch) / self.feature_scale

    def predict(self, arch: ArchConfig) -> float:
        return float(self.predict_features(self.features(arch))[0])

    def predict_many(self, archs) -> np.ndarray:
        return self.predict_features(np.stack([self.features(a) for a in archs]))

    __call__ = predict

    def save(self, path) -> str:
        meta = {"kind": "latency_predictor", "feature_scale": [float(x) for x in self.feature_scale],
                "log_mean": self.log_mean, "log_std": self.log_std,
                "space": self.space.to_dict() if self.space else None, **self.metadata}
        return checkpoint.save(path, self.weights, meta)

    @classmethod
    def load(cls, path) -> "LatencyModel":
        tensors, header = checkpoint.load(path)
        meta = dict(header["meta"])
        if meta.pop("kind", None) != "latency_predictor":
            raise CheckpointError(f"{path} is not a latency predictor checkpoint")
        # float32 round trip of the weights; keep them as stored
        weights = {k: v.astype(np.float64) for k, v in tensors.items()}
        space = meta.pop("space", None)
        return cls(weights, np.array(meta.pop("feature_scale")), float(meta.pop("log_mean")),
                   float(meta.pop("log_std")), SearchSpace.from_dict(space) if space else None, meta)


def relative_errors(model: LatencyModel, samples) -> np.ndarray:
    if not samples:
        return np.zeros(0)
    pred = model.predict_many([s.arch for s in samples])
    target = np.array([s.latency_ms for s in samples])
    return np.abs(pred - target) / target


def fit_predictor(samples, split_seed: int = 0, space: SearchSpace | None = None, steps: int = 4000,
                  lr: float = 3e-3, init_seed: int = 0) -> LatencyModel:
    """Fit the predictor on a 90/10 split; held-out errors go in ``metadata``."""
    if len(samples) < 100:
        raise ContractError(f"need at least 100 samples to fit, got {len(samples)}")
    rng = np.random.default_rng(split_seed)
    order = rng.permutation(len(samples))
    n_test = max(1, len(samples) // 10)
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test:]]
    if space is not None:
        scale = space.feature_scale()
    else:
        scale = np.max([_raw(s.arch) for s in samples], axis=0)
    X = np.stack([_raw(s.arch) / scale for s in train])
    y = np.log(np.array([s.latency_ms for s in train]))
    mu, sd = float(y.mean()), float(y.std())
    if sd <= 1e-12 * max(1.0, abs(mu)):
        sd = 0.0  # summation noise on identical targets

    init = np.random.default_rng(init_seed)
    weights = {
        "w1": init.normal(0, np.sqrt(2 / 5), (5, HIDDEN)), "b1": np.zeros(HIDDEN),
        "w2": init.normal(0, np.sqrt(2 / HIDDEN), (HIDDEN, HIDDEN)), "b2": np.zeros(HIDDEN),
        "w3": init.normal(0, np.sqrt(1 / HIDDEN), (HIDDEN, 1)), "b3": np.zeros(1),
    }
    model = LatencyModel(weights, scale, mu, sd if sd > 0 else 1.0, space)
    trace = []
    if sd == 0:
        # constant targets: the zero network reproduces the mean exactly
        weights["w3"][:] = 0.0
    else:
        target = ((y - mu) / sd)[:, None]
        state = nn.OptimizerState("adam")
        for step in range(steps):
            tape = nn.Tape()
            out = model._forward(tape, X)
            loss = nn.mse(tape, out, target)
            grads = nn.backward(tape, loss)
            step_lr = lr * 0.5 * (1 + np.cos(np.pi * step / steps))
            nn.optimizer_step(model.weights, grads, state, step_lr)
            if step % 100 == 0 or step == steps - 1:
                trace.append((step, float(loss.value)))
    model.weights = {k: v.astype(np.float32).astype(np.float64) for k, v in model.weights.items()}
    errs = np.array([abs(model.predict(s.arch) - s.latency_ms) / s.latency_ms for s in test])
    model.metadata = {
        "n_train": len(train), "n_test": len(test), "split_seed": split_seed,
        "heldout_mean_rel_error": float(errs.mean()),
        "heldout_median_rel_error": float(np.median(errs)),
        "loss_trace": trace,
    }
    return model


def predict(model: LatencyModel, arch: ArchConfig) -> float:
    return model.predict(arch)
