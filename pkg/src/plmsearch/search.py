"""Search space, evolutionary search and the fast-rule candidate generator."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import transformer as tf
from .errors import ContractError, InfeasibleError, ValidationError
from .transformer import ArchConfig

PRETRAIN = "PRETRAIN"
KD = "KD"

HISTORY_COLUMNS = ("generation", "l_t", "d_m", "d_q", "d_v", "d_f", "h", "predicted_latency", "score")


@dataclass(frozen=True)
class SearchSpace:
    """Discrete domains per hyper-parameter.

    PRETRAIN mode ties the query/key/value width to ``head_dim * h``; KD mode
    fixes the head count and lists query/key/value widths explicitly. In both
    modes ``d_q = d_k = d_v`` and ``d_o = d_m``.
    """

    mode: str
    l_t: tuple
    d_m: tuple
    d_f: tuple
    h: tuple
    d_qkv: tuple = ()
    head_dim: int = 64

    def __post_init__(self):
        for name in ("l_t", "d_m", "d_f", "h", "d_qkv"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        problems = []
        if self.mode not in (PRETRAIN, KD):
            problems.append(f"mode must be PRETRAIN or KD, got {self.mode!r}")
        for name in self.field_names:
            dom = getattr(self, name)
            if not dom:
                problems.append(f"{name} domain is empty")
            elif list(dom) != sorted(set(dom)):
                problems.append(f"{name} domain must be strictly ascending")
            elif dom[0] < 1:
                problems.append(f"{name} domain must be positive")
        if self.mode == KD:
            if len(self.h) != 1:
                problems.append("KD mode fixes a single head count")
            elif any(q % self.h[0] for q in self.d_qkv):
                problems.append("every d_qkv must be divisible by h in KD mode")
        elif self.d_qkv:
            problems.append("PRETRAIN mode derives d_qkv from h; leave d_qkv empty")
        if problems:
            raise ValidationError(problems)

    @property
    def field_names(self) -> tuple:
        return ("l_t", "d_m", "d_f", "h", "d_qkv") if self.mode == KD else ("l_t", "d_m", "d_f", "h")

    def domains(self) -> list[tuple]:
        return [getattr(self, n) for n in self.field_names]

    def cardinality(self) -> int:
        return math.prod(len(d) for d in self.domains())

    def to_arch(self, values: Sequence[int]) -> ArchConfig:
        v = dict(zip(self.field_names, values))
        d_qkv = v["d_qkv"] if self.mode == KD else self.head_dim * v["h"]
        return ArchConfig.make(v["l_t"], v["d_m"], v["d_f"], v["h"], d_qkv)

    def values(self, arch: ArchConfig) -> tuple:
        out = [arch.l_t, arch.d_m, arch.d_f, arch.h]
        if self.mode == KD:
            out.append(arch.d_q)
        return tuple(out)

    def contains(self, arch: ArchConfig) -> bool:
        if tf.validate(arch) or not (arch.d_q == arch.d_k == arch.d_v):
            return False
        if self.mode == PRETRAIN and arch.d_q != self.head_dim * arch.h:
            return False
        return all(v in dom for v, dom in zip(self.values(arch), self.domains()))

    def enumerate(self) -> Iterable[ArchConfig]:
        for combo in itertools.product(*self.domains()):
            yield self.to_arch(combo)

    def sample(self, rng: np.random.Generator) -> ArchConfig:
        return self.to_arch([dom[int(rng.integers(len(dom)))] for dom in self.domains()])

    def max_arch(self) -> ArchConfig:
        """Elementwise maximum: the smallest supernet that covers the space."""
        d_qkv = max(self.d_qkv) if self.mode == KD else self.head_dim * max(self.h)
        return ArchConfig.make(max(self.l_t), max(self.d_m), max(self.d_f), max(self.h), d_qkv)

    def feature_scale(self) -> np.ndarray:
        m = self.max_arch()
        return np.array([m.l_t, m.d_m, m.d_q, m.d_v, m.d_f], dtype=np.float64)

    def features(self, arch: ArchConfig) -> np.ndarray:
        """``[l_t, d_m, d_q, d_v, d_f]`` divided by the space maxima."""
        raw = np.array([arch.l_t, arch.d_m, arch.d_q, arch.d_v, arch.d_f], dtype=np.float64)
        return raw / self.feature_scale()

    def arch_from_features(self, feats) -> ArchConfig:
        raw = np.rint(np.asarray(feats, dtype=np.float64) * self.feature_scale()).astype(int)
        l_t, d_m, d_q, d_v, d_f = (int(x) for x in raw)
        h = self.h[0] if self.mode == KD else d_q // self.head_dim
        return ArchConfig(l_t, d_m, d_q, d_q, d_v, d_f, d_m, h)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "l_t": list(self.l_t), "d_m": list(self.d_m),
               "d_f": list(self.d_f), "h": list(self.h), "head_dim": self.head_dim}
        if self.mode == KD:
            out["d_qkv"] = list(self.d_qkv)
        return out

    @classmethod
    def from_dict(cls, data) -> "SearchSpace":
        def dom(value):
            # either an explicit list or {"start", "stop", "step"} (stop inclusive)
            if isinstance(value, dict):
                return tuple(range(int(value["start"]), int(value["stop"]) + 1, int(value.get("step", 1))))
            return tuple(value)

        return cls(mode=data.get("mode", PRETRAIN), l_t=dom(data["l_t"]), d_m=dom(data["d_m"]),
                   d_f=dom(data["d_f"]), h=dom(data["h"]), d_qkv=dom(data.get("d_qkv", ())),
                   head_dim=int(data.get("head_dim", 64)))


def full_pretrain_space() -> SearchSpace:
    """Full-scale pre-training domains under a 12-layer, 768-wide supernet."""
    return SearchSpace(PRETRAIN, l_t=range(1, 9), d_m=range(128, 769, 4), d_f=range(128, 3073, 4),
                       h=range(1, 13), head_dim=64)


def full_kd_space() -> SearchSpace:
    """Full-scale distillation domains: 12 heads, free query/key/value width."""
    return SearchSpace(KD, l_t=range(1, 9), d_m=range(128, 769, 4), d_f=range(128, 3073, 4),
                       h=(12,), d_qkv=range(180, 769, 12))


def toy_space(mode: str = PRETRAIN) -> SearchSpace:
    """Desk-scale space under a 4-layer, 32-wide, 4-head supernet."""
    if mode == KD:
        return SearchSpace(KD, l_t=(1, 2, 3, 4), d_m=(16, 20, 24, 28, 32), d_f=tuple(range(16, 65, 8)),
                           h=(4,), d_qkv=(12, 16, 20, 24, 28, 32))
    return SearchSpace(PRETRAIN, l_t=(1, 2, 3, 4), d_m=(16, 20, 24, 28, 32), d_f=tuple(range(16, 65, 8)),
                       h=(1, 2, 3, 4), head_dim=8)


def space_cardinality(space: SearchSpace) -> int:
    return space.cardinality()


def sample_arch(space: SearchSpace, rng: np.random.Generator) -> ArchConfig:
    return space.sample(rng)


def mutate(arch: ArchConfig, space: SearchSpace, field_rate: float, rng: np.random.Generator) -> ArchConfig:
    """Resample each field uniformly from its domain with probability ``field_rate``."""
    values = list(space.values(arch))
    for i, dom in enumerate(space.domains()):
        if rng.random() < field_rate:
            values[i] = dom[int(rng.integers(len(dom)))]
    return space.to_arch(values)


def crossover(a: ArchConfig, b: ArchConfig, space: SearchSpace, rng: np.random.Generator) -> ArchConfig:
    """Single-point crossover over the field order of ``space``."""
    va, vb = space.values(a), space.values(b)
    if len(va) < 2:
        return a
    cut = int(rng.integers(1, len(va)))
    return space.to_arch(va[:cut] + vb[cut:])


def roulette_select(population: Sequence, scores: Sequence[float], rng: np.random.Generator):
    """Fitness-proportional pick on min-shifted scores."""
    if len(population) == 0 or len(population) != len(scores):
        raise ContractError("roulette_select needs equally many candidates and scores (>= 1)")
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    w = s - lo + 1e-6 * (hi - lo + 1e-12)
    cum = np.cumsum(w)
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return population[min(i, len(population) - 1)]


@dataclass
class EvoParams:
    generations: int = 4
    population: int = 25
    p_m: float = 0.5
    p_e: float = 0.5
    field_rate: float = 0.3
    top_k: int = 3
    budget: float | None = None
    seed: int = 0
    crossover: bool = False
    p_c: float = 1 / 3
    max_rejections: int = 1000

    def __post_init__(self):
        problems = []
        extra = self.p_c if self.crossover else 0.0
        if self.p_m < 0 or self.p_e < 0 or self.p_m + self.p_e + extra > 1 + 1e-12:
            problems.append("p_m + p_e (+ p_c) must not exceed 1")
        if self.population < 2:
            problems.append("population must be >= 2")
        if not 1 <= self.top_k <= self.population:
            problems.append("top_k must be in [1, population]")
        if self.generations < 1:
            problems.append("generations must be >= 1")
        if problems:
            raise ValidationError(problems)


@dataclass(frozen=True)
class Candidate:
    arch: ArchConfig
    predicted_latency: float
    score: float
    generation: int


@dataclass
class EvoResult:
    top: list
    history: list = field(repr=False)

    @property
    def best(self) -> Candidate:
        return self.top[0]


def _latency_fn(latency_model) -> Callable[[ArchConfig], float]:
    if callable(latency_model):
        return latency_model
    return latency_model.predict


def _streams(seed: int):
    first, rest = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(first), np.random.default_rng(rest)


def sample_feasible(space: SearchSpace, latency, budget: float, n: int, rng: np.random.Generator,
                    max_rejections: int = 1000) -> list[tuple[ArchConfig, float]]:
    """Rejection-sample ``n`` architectures whose predicted latency fits ``budget``."""
    out = []
    rejected = 0
    tightest = math.inf
    while len(out) < n:
        arch = space.sample(rng)
        lat = float(latency(arch))
        tightest = min(tightest, lat)
        if lat <= budget:
            out.append((arch, lat))
            rejected = 0
        else:
            rejected += 1
            if rejected >= max_rejections:
                raise InfeasibleError(
                    f"{max_rejections} consecutive draws exceeded budget {budget:g}; "
                    f"tightest satisfiable budget seen: {tightest:g}", tightest)
    return out


def _rank_key(c: Candidate):
    return (-c.score, c.predicted_latency, c.arch)


def top_candidates(history: Sequence[Candidate], k: int) -> list[Candidate]:
    """Best ``k`` distinct architectures; ties go to lower latency, then arch order."""
    seen = set()
    out = []
    for c in sorted(history, key=_rank_key):
        if c.arch in seen:
            continue
        seen.add(c.arch)
        out.append(c)
        if len(out) == k:
            break
    return out


def best_of_samples(space: SearchSpace, evaluator, latency_model, budget: float, n: int, seed: int,
                    top_k: int = 1, max_rejections: int = 1000) -> list[Candidate]:
    """Random-search reference: score ``n`` feasible uniform draws, keep the best."""
    draw_rng, _ = _streams(seed)
    drawn = sample_feasible(space, _latency_fn(latency_model), budget, n, draw_rng, max_rejections)
    history = [Candidate(a, lat, float(evaluator(a)), 1) for a, lat in drawn]
    return top_candidates(history, top_k)


def evolve(space: SearchSpace, evaluator: Callable[[ArchConfig], float], latency_model,
           budget: float | None = None, params: EvoParams | None = None) -> EvoResult:
    """Evolutionary search under a latency budget.

    Generation 1 is ``population`` feasible uniform draws. Every later
    generation is filled one child at a time: pick a parent by roulette on the
    previous generation's scores, then mutate it (``p_m``), replace it with a
    fresh draw (``p_e``) or keep it. Children over budget are redrawn before
    they are scored, so exactly ``generations * population`` evaluations run.
    """
    params = params or EvoParams()
    budget = params.budget if budget is None else budget
    if budget is None:
        raise ContractError("a latency budget is required")
    latency = _latency_fn(latency_model)
    draw_rng, rng = _streams(params.seed)

    first = sample_feasible(space, latency, budget, params.population, draw_rng, params.max_rejections)
    generation = [Candidate(a, lat, float(evaluator(a)), 1) for a, lat in first]
    history = list(generation)
    tightest = min(c.predicted_latency for c in generation)

    for t in range(2, params.generations + 1):
        pool = [c.arch for c in generation]
        pool_scores = [c.score for c in generation]
        children = []
        rejected = 0
        while len(children) < params.population:
            parent = roulette_select(pool, pool_scores, rng)
            u = rng.random()
            if params.crossover and u < params.p_c:
                other = roulette_select(pool, pool_scores, rng)
                child = crossover(parent, other, space, rng)
            else:
                u -= params.p_c if params.crossover else 0.0
                if u < params.p_m:
                    child = mutate(parent, space, params.field_rate, rng)
                elif u < params.p_m + params.p_e:
                    child = space.sample(rng)
                else:
                    child = parent
            lat = float(latency(child))
            tightest = min(tightest, lat)
            if lat > budget:
                rejected += 1
                if rejected >= params.max_rejections:
                    raise InfeasibleError(
                        f"{params.max_rejections} consecutive offspring exceeded budget {budget:g}",
                        tightest)
                continue
            rejected = 0
            children.append((child, lat))
        generation = [Candidate(a, lat, float(evaluator(a)), t) for a, lat in children]
        history.extend(generation)

    return EvoResult(top_candidates(history, params.top_k), history)


def write_history(path, history: Sequence[Candidate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for c in history:
            a = c.arch
            w.writerow([c.generation, a.l_t, a.d_m, a.d_q, a.d_v, a.d_f, a.h,
                        repr(float(c.predicted_latency)), repr(float(c.score))])


def read_history(path) -> list[Candidate]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            a = ArchConfig(int(row["l_t"]), int(row["d_m"]), int(row["d_q"]), int(row["d_q"]),
                           int(row["d_v"]), int(row["d_f"]), int(row["d_m"]), int(row["h"]))
            out.append(Candidate(a, float(row["predicted_latency"]), float(row["score"]), int(row["generation"])))
    return out


# ---------------------------------------------------------------------------
# fast rule
# ---------------------------------------------------------------------------


def in_fast_rule(arch: ArchConfig) -> bool:
    """``1.6 d_m <= d_f <= 1.9 d_m`` and ``0.7 d_m <= d_qkv <= 1.0 d_m``, in exact
    integer arithmetic."""
    m = arch.d_m
    ffn_ok = 16 * m <= 10 * arch.d_f <= 19 * m
    qkv_ok = all(7 * m <= 10 * d <= 10 * m for d in (arch.d_q, arch.d_v))
    return ffn_ok and qkv_ok


def _nearest(values, target_num: int, target_den: int, lo, hi):
    # nearest grid value to target_num/target_den inside [lo, hi]; ties go low
    inside = [v for v in values if lo(v) and hi(v)]
    if not inside:
        return None
    return min(inside, key=lambda v: (abs(target_den * v - target_num), v))


def rule_shape(space: SearchSpace, l_t: int, d_m: int) -> ArchConfig | None:
    """The rule-conforming arch for ``(l_t, d_m)``: ``d_f`` nearest ``1.75 d_m``
    and ``d_qkv`` nearest ``0.85 d_m`` on the grid, or None if the grid has no
    value inside the bounds."""
    d_f = _nearest(space.d_f, 7 * d_m, 4, lambda v: 10 * v >= 16 * d_m, lambda v: 10 * v <= 19 * d_m)
    if d_f is None:
        return None
    if space.mode == KD:
        d_qkv = _nearest(space.d_qkv, 17 * d_m, 20, lambda v: 10 * v >= 7 * d_m, lambda v: v <= d_m)
        h = space.h[0]
    else:
        h = _nearest(space.h, 17 * d_m, 20 * space.head_dim,
                     lambda v: 10 * space.head_dim * v >= 7 * d_m,
                     lambda v: space.head_dim * v <= d_m)
        d_qkv = None if h is None else space.head_dim * h
    if d_qkv is None:
        return None
    return ArchConfig.make(l_t, d_m, d_f, h, d_qkv)


def fast_rule_candidates(space: SearchSpace, latency_model, budget: float) -> list[ArchConfig]:
    """One rule-conforming architecture per layer count.

    For each ``l_t`` the widest ``d_m`` whose :func:`rule_shape` is predicted
    to fit ``budget`` wins. Layer counts without such a shape are left out.
    """
    latency = _latency_fn(latency_model)
    out = []
    for l_t in space.l_t:
        for d_m in sorted(space.d_m, reverse=True):
            arch = rule_shape(space, l_t, d_m)
            if arch is not None and float(latency(arch)) <= budget:
                out.append(arch)
                break
    return out


def fast_rule_tightest(space: SearchSpace, latency_model) -> float:
    """Smallest predicted latency of any rule-conforming shape (inf if none)."""
    latency = _latency_fn(latency_model)
    shapes = (rule_shape(space, l, m) for l in space.l_t for m in space.d_m)
    return min((float(latency(a)) for a in shapes if a is not None), default=math.inf)
