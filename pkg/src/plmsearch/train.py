"""Training objectives, batch-wise one-shot supernet training, stand-alone and
further training."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn_core as nn
from . import supernet as sn
from . import transformer as tf
from .data import Batch, Corpus, mask_batch
from .errors import ContractError
from .search import KD, SearchSpace
from .transformer import ArchConfig

MLM, KD_OBJECTIVE = "MLM", "KD"
ADAM, SGD = "ADAM", "SGD"
TRACE_COLUMNS = ("step", "epoch", "lr", "loss")
PROJ = "kd_proj"


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    The defaults are the full-scale pre-training values; :meth:`desk` gives the
    settings used for toy runs. ``n_workers`` is the number of sub-batches
    (and sub-models) per sampling round and ``samples_per_batch`` the number of
    rounds per update. ``threads`` only controls how those sub-batches are
    executed and never changes results.
    """

    lr: float = 1e-5
    warmup: float = 0.1
    batch_size: int = 256
    epochs: int = 5
    n_workers: int = 16
    samples_per_batch: int = 3
    seed: int = 0
    objective: str = MLM
    optimizer: str = ADAM
    mask_prob: float = 0.15
    max_steps: int | None = None
    weight_decay: float = 0.0
    grad_clip: float | None = None
    threads: int = 1

    def __post_init__(self):
        errs = []
        if self.n_workers < 1:
            errs.append("n_workers must be >= 1")
        if self.samples_per_batch < 1:
            errs.append("samples_per_batch must be >= 1")
        if self.batch_size < 1 or self.batch_size % max(self.n_workers, 1):
            errs.append(f"batch_size {self.batch_size} must be a positive multiple of n_workers {self.n_workers}")
        if self.lr <= 0:
            errs.append("lr must be > 0")
        if not 0 <= self.warmup < 1:
            errs.append("warmup must be in [0, 1)")
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.objective not in (MLM, KD_OBJECTIVE):
            errs.append(f"objective must be MLM or KD, got {self.objective!r}")
        if self.optimizer not in (ADAM, SGD):
            errs.append(f"optimizer must be ADAM or SGD, got {self.optimizer!r}")
        if not 0 < self.mask_prob < 1:
            errs.append("mask_prob must be in (0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            errs.append("max_steps must be >= 1")
        if self.threads < 1:
            errs.append("threads must be >= 1")
        if errs:
            raise ContractError("; ".join(errs))

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(lr=5e-3, warmup=0.1, batch_size=32, epochs=1, n_workers=4, samples_per_batch=3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    trace: list[TraceRow] = field(default_factory=list)
    sampled: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.step, r.epoch, repr(float(r.lr)), repr(float(r.loss))])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["step"]), int(r["epoch"]), float(r["lr"]), float(r["loss"]))
                for r in csv.DictReader(fh)]


def lr_schedule(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warmup from 0 over ``ceil(warmup * total)`` steps, then constant."""
    n_warm = math.ceil(warmup * total)
    if n_warm > 0 and step < n_warm:
        return peak * step / n_warm
    return peak


def _streams(seed: int):
    """Independent generators for data order, masking and architecture sampling."""
    data, mask, arch = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(data), np.random.default_rng(mask), np.random.default_rng(arch)


def total_steps(n_sequences: int, cfg: TrainConfig) -> int:
    per_epoch = n_sequences // cfg.batch_size
    if per_epoch < 1:
        raise ContractError(f"corpus of {n_sequences} sequences is smaller than one batch of {cfg.batch_size}")
    total = per_epoch * cfg.epochs
    return min(total, cfg.max_steps) if cfg.max_steps else total


def batches(corpus: Corpus, cfg: TrainConfig):
    """Yield ``(step, epoch, Batch)`` for a whole run, deterministically from the seed."""
    data_rng, mask_rng, _ = _streams(cfg.seed)
    total = total_steps(len(corpus), cfg)
    per_epoch = len(corpus) // cfg.batch_size
    step = 0
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(len(corpus))
        for b in range(per_epoch):
            if step >= total:
                return
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            yield step, epoch, mask_batch(corpus.sequences[idx], cfg.mask_prob, mask_rng, corpus.vocab_size)
            step += 1


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def mlm_loss(params, arch: ArchConfig, batch: Batch, tape: nn.Tape | None = None) -> nn.Node:
    """Cross-entropy of the encoder logits at the selected positions."""
    out = tf.encoder_forward(params, arch, batch.input_ids, tape)
    return nn.cross_entropy_mean(out.tape, out.logits, batch.targets)


@dataclass
class Teacher:
    """A fixed model whose last-layer hidden states and attention are matched."""

    model: sn.Model
    _cache: dict = field(default_factory=dict, repr=False)

    def targets(self, ids: np.ndarray):
        key = ids.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            out = self.model.forward(ids)
            hit = (out.hidden.value, out.attentions[-1].value)
            if len(self._cache) < 4096:
                self._cache[key] = hit
        return hit


def kd_loss(params, arch: ArchConfig, teacher, batch: Batch, projection,
            tape: nn.Tape | None = None) -> nn.Node:
    """MSE of projected student hidden states against the teacher's plus MSE of
    the last-layer attention maps, weighted 1:1.

    Both models see the uncorrupted ids. ``projection`` is a ``[d_m, d_m_teacher]``
    array (or node already on ``tape``).
    """
    teacher = teacher if isinstance(teacher, Teacher) else Teacher(teacher)
    if arch.h != teacher.model.arch.h:
        raise ContractError(f"student has {arch.h} heads, teacher has {teacher.model.arch.h}")
    t_hidden, t_attn = teacher.targets(batch.original)
    out = tf.encoder_forward(params, arch, batch.original, tape)
    tp = out.tape
    proj = projection if isinstance(projection, nn.Node) else (
        tp.param(PROJ, projection) if tp.record else projection)
    if nn._value(proj).shape != (arch.d_m, t_hidden.shape[-1]):
        raise ContractError(f"projection shape {nn._value(proj).shape} != {(arch.d_m, t_hidden.shape[-1])}")
    hid = nn.mse(tp, nn.matmul(tp, out.hidden, proj), t_hidden)
    att = nn.mse(tp, out.attentions[-1], t_attn)
    return nn.add(tp, hid, att)


def _loss_and_grads(params, arch, batch, cfg, teacher, projection):
    tape = nn.Tape()
    if cfg.objective == MLM:
        loss = mlm_loss(params, arch, batch, tape)
    else:
        loss = kd_loss(params, arch, teacher, batch, projection, tape)
    return float(loss.value), nn.backward(tape, loss)


def _apply(params: dict, grads: dict, state: nn.OptimizerState, lr: float, cfg: TrainConfig):
    if cfg.grad_clip:
        norm = nn.global_norm(grads)
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    nn.optimizer_step(params, grads, state, lr, weight_decay=cfg.weight_decay)


def _check_kd(cfg, teacher, d_m_student: int, params: dict, seed: int):
    if cfg.objective != KD_OBJECTIVE:
        return None
    if teacher is None:
        raise ContractError("KD objective needs a teacher model")
    teacher = teacher if isinstance(teacher, Teacher) else Teacher(teacher)
    if PROJ not in params:
        rng = np.random.default_rng([seed, 1])
        params[PROJ] = tf.truncated_normal(rng, (d_m_student, teacher.model.arch.d_m), 0.02)
    return teacher


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def oneshot_train(supernet: sn.SuperNet, corpus: Corpus, space: SearchSpace, cfg: TrainConfig,
                  teacher=None, on_step: Callable | None = None) -> TrainResult:
    """Batch-wise one-shot training of ``supernet`` in place.

    Each batch is split into ``n_workers`` sub-batches. In each of
    ``samples_per_batch`` rounds one architecture is sampled per sub-batch and
    its gradient is scattered into a dense buffer; after all rounds the buffer
    is divided by ``n_workers * samples_per_batch`` and applied once. The same
    masked sub-batches are reused across rounds.
    """
    strategy = sn.Strategy.PER_HEAD_SLICE if space.mode == KD else sn.Strategy.HEAD_PREFIX
    for a in (space.max_arch(),):
        if sn.fits(supernet.config, a):
            raise ContractError("search space exceeds the supernet: " + ", ".join(sn.fits(supernet.config, a)))
    teacher = _check_kd(cfg, teacher, supernet.config.d_m, supernet.params, cfg.seed)
    _, _, arch_rng = _streams(cfg.seed)
    total = total_steps(len(corpus), cfg)
    state = nn.OptimizerState(cfg.optimizer.lower())
    N, M = cfg.n_workers, cfg.samples_per_batch
    sub = cfg.batch_size // N
    result = TrainResult()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for step, epoch, batch in batches(corpus, cfg):
            lr = lr_schedule(step, total, cfg.lr, cfg.warmup)
            buffer = supernet.zero_grads()
            losses = []
            archs_this_step = []
            for _ in range(M):
                archs = [space.sample(arch_rng) for _ in range(N)]
                archs_this_step.append(archs)
                views = [sn.extract_submodel(supernet, a, strategy) for a in archs]

                def work(j, views=views):
                    v = views[j]
                    proj = supernet.params[PROJ][:v.arch.d_m] if teacher is not None else None
                    return _loss_and_grads(v.params(), v.arch, batch.rows(slice(j * sub, (j + 1) * sub)),
                                           cfg, teacher, proj)

                outs = list(pool.map(work, range(N))) if pool else [work(j) for j in range(N)]
                # fixed-order merge keeps results independent of the thread count
                for v, (loss, grads) in zip(views, outs):
                    losses.append(loss)
                    if PROJ in grads:
                        buffer[PROJ][:v.arch.d_m] += grads.pop(PROJ)
                    sn.scatter_gradients(v, grads, buffer)
            scale = 1.0 / (N * M)
            avg = {k: g * scale for k, g in buffer.items()}
            _apply(supernet.params, avg, state, lr, cfg)
            row = TraceRow(step, epoch, lr, float(np.mean(losses)))
            result.trace.append(row)
            result.sampled.append(archs_this_step)
            if on_step:
                on_step(row, avg)
    finally:
        if pool:
            pool.shutdown()
    return result


def _train_model(params: dict, arch: ArchConfig, corpus: Corpus, cfg: TrainConfig, teacher,
                 on_step: Callable | None = None) -> TrainResult:
    teacher = _check_kd(cfg, teacher, arch.d_m, params, cfg.seed)
    total = total_steps(len(corpus), cfg)
    state = nn.OptimizerState(cfg.optimizer.lower())
    result = TrainResult()
    for step, epoch, batch in batches(corpus, cfg):
        lr = lr_schedule(step, total, cfg.lr, cfg.warmup)
        model_params = {k: v for k, v in params.items() if k != PROJ}
        loss, grads = _loss_and_grads(model_params, arch, batch, cfg, teacher, params.get(PROJ))
        _apply(params, grads, state, lr, cfg)
        row = TraceRow(step, epoch, lr, loss)
        result.trace.append(row)
        if on_step:
            on_step(row, params)
    return result


def standalone_train(arch: ArchConfig, corpus: Corpus, cfg: TrainConfig, max_len: int | None = None,
                     teacher=None, on_step: Callable | None = None) -> tuple[sn.Model, TrainResult]:
    """Fresh initialisation (seeded by ``cfg.seed``) followed by ordinary training.

    The initialisation equals ``build_supernet(arch, ..., seed=cfg.seed)``.
    """
    tf.check(arch)
    net = sn.build_supernet(arch, corpus.vocab_size, max_len or corpus.seq_len, cfg.seed)
    params = net.params
    result = _train_model(params, arch, corpus, cfg, teacher, on_step)
    return sn.Model(arch, {k: v for k, v in params.items() if k != PROJ}), result


def further_train(supernet: sn.SuperNet, arch: ArchConfig, strategy, corpus: Corpus, cfg: TrainConfig,
                  teacher=None, on_step: Callable | None = None) -> tuple[sn.Model, TrainResult]:
    """Continue training an extracted sub-model with zero warmup.

    The supernet is never modified.
    """
    view = sn.extract_submodel(supernet, arch, strategy)
    model = sn.materialize(view)
    params = dict(model.params)
    if cfg.objective == KD_OBJECTIVE and PROJ in supernet.params:
        params[PROJ] = np.array(supernet.params[PROJ][:arch.d_m], copy=True)
    result = _train_model(params, arch, corpus, replace(cfg, warmup=0.0), teacher, on_step)
    return sn.Model(arch, {k: v for k, v in params.items() if k != PROJ}), result
