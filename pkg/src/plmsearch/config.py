"""Run configuration: a versioned JSON document validated field by field."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import PlmSearchError, ValidationError
from .search import KD, PRETRAIN, EvoParams, SearchSpace, toy_space
from .train import TrainConfig
from .transformer import ARCH_FIELDS, ArchConfig, validate

SCHEMA_VERSION = 1


class ConfigError(ValidationError):
    """One or more field-level problems in a run configuration."""


def default_config() -> dict:
    space = toy_space()
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "corpus": {"kind": "synthetic", "n_sequences": 4096},
        "vocab_size": 64,
        "seq_len": 32,
        "eval_fraction": 0.125,
        "super_config": space.max_arch().to_dict(),
        "train": {k: v for k, v in TrainConfig.desk(epochs=3).to_dict().items() if k not in ("seed", "threads")},
        "search": {**space.to_dict(), "generations": 4, "population": 25, "p_m": 0.5, "p_e": 0.5,
                   "field_rate": 0.3, "top_k": 3, "budget": 0.6, "crossover": False, "p_c": 1 / 3},
        "latency": {"n": 2000, "seq_len": 32, "runs": 5, "mode": "ANALYTIC", "split_seed": 0},
        "further": {"max_steps": 300},
        "benchmark": {"archs": ["1-16-16-1-8", "1-24-40-2-16", "2-20-32-2-16", "2-32-56-4-32",
                                "3-16-24-1-8", "3-28-48-3-24", "4-24-40-2-16", "4-32-64-4-32"],
                      "standalone_steps": 300},
        "teacher": {"max_steps": 600},
    }


def _merge(base: dict, override: dict, path: str, errors: list) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            errors.append(f"{where}: unknown field")
        elif isinstance(base[k], dict) and k not in ("corpus", "super_config"):
            if not isinstance(v, dict):
                errors.append(f"{where}: expected an object")
            else:
                out[k] = _merge(base[k], v, where + ".", errors)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    space: SearchSpace = field(repr=False)
    super_config: ArchConfig = field(repr=False)
    train: TrainConfig = field(repr=False)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def evo_params(self, budget: float | None = None) -> EvoParams:
        s = self.data["search"]
        return EvoParams(generations=s["generations"], population=s["population"], p_m=s["p_m"], p_e=s["p_e"],
                         field_rate=s["field_rate"], top_k=s["top_k"],
                         budget=s["budget"] if budget is None else budget,
                         seed=derive_seed(self.seed, "search"), crossover=s["crossover"], p_c=s["p_c"])

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def derive_seed(root: int, name: str) -> int:
    """Deterministic per-subsystem seed from the root seed."""
    return int.from_bytes(hashlib.sha256(f"{root}:{name}".encode()).digest()[:4], "little")


def from_dict(raw: dict) -> RunConfig:
    """Validate ``raw`` on top of the defaults; every problem is reported at once."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config: expected a JSON object"])
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    data = _merge(default_config(), raw, "", errors)

    if not isinstance(data["seed"], int) or data["seed"] < 0:
        errors.append("seed: must be a non-negative integer")
    if not isinstance(data["vocab_size"], int) or data["vocab_size"] < 8:
        errors.append("vocab_size: must be an integer >= 8")
    if not isinstance(data["seq_len"], int) or data["seq_len"] < 2:
        errors.append("seq_len: must be an integer >= 2")
    if not 0 < data["eval_fraction"] < 1:
        errors.append("eval_fraction: must be in (0, 1)")
    if data["corpus"].get("kind") not in ("synthetic", "text"):
        errors.append("corpus.kind: must be 'synthetic' or 'text'")
    elif data["corpus"]["kind"] == "text" and "path" not in data["corpus"]:
        errors.append("corpus.path: required for text corpora")

    sup = None
    try:
        sup = ArchConfig.from_dict(data["super_config"])
        errors.extend(f"super_config: {v}" for v in validate(sup))
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"super_config: needs integer fields {', '.join(ARCH_FIELDS)} ({exc})")

    t = data["train"]
    train = None
    try:
        train = TrainConfig(**t, seed=derive_seed(data["seed"], "train") if isinstance(data["seed"], int) else 0)
    except (TypeError, PlmSearchError) as exc:
        msg = str(exc)
        if isinstance(t.get("batch_size"), int) and isinstance(t.get("n_workers"), int) and t["n_workers"] > 0 \
                and t["batch_size"] % t["n_workers"]:
            msg = f"batch_size {t['batch_size']} is not divisible by n_workers {t['n_workers']}"
        errors.append(f"train: {msg}")

    s = data["search"]
    space = None
    try:
        if s["mode"] not in (PRETRAIN, KD):
            raise ValueError(f"mode must be PRETRAIN or KD, got {s['mode']!r}")
        if s["mode"] == KD and len(s["h"]) != 1:
            raise ValueError("KD mode fixes the head count: h must hold exactly one value")
        space = SearchSpace.from_dict(s)
    except (KeyError, TypeError, ValueError, PlmSearchError) as exc:
        errors.append(f"search: {exc}")
    try:
        EvoParams(generations=s["generations"], population=s["population"], p_m=s["p_m"], p_e=s["p_e"],
                  field_rate=s["field_rate"], top_k=s["top_k"], budget=s["budget"], crossover=s["crossover"],
                  p_c=s["p_c"])
    except (TypeError, PlmSearchError) as exc:
        errors.append(f"search: {exc}")
    if s["budget"] is not None and not (isinstance(s["budget"], (int, float)) and s["budget"] > 0):
        errors.append("search.budget: must be a positive number")
    if space is not None and sup is not None:
        from .supernet import fits
        over = fits(sup, space.max_arch())
        if over:
            errors.append("search: space exceeds super_config (" + ", ".join(over) + ")")
        if space.mode == KD and sup.h != space.h[0]:
            errors.append(f"search.h: KD mode needs h == super_config.h ({sup.h})")
        if space.mode == PRETRAIN and sup.d_q // sup.h != space.head_dim:
            errors.append(f"search.head_dim: must equal the supernet per-head width {sup.d_q // sup.h}")
        if train is not None and train.objective == "KD" and space.mode != KD:
            errors.append("train.objective: KD needs search.mode KD")

    lat = data["latency"]
    if lat["mode"] not in ("ANALYTIC", "MEASURED"):
        errors.append("latency.mode: must be ANALYTIC or MEASURED")
    if not isinstance(lat["n"], int) or lat["n"] < 100:
        errors.append(f"latency.n: must be an integer >= 100 to fit a predictor, got {lat['n']!r}")
    if not isinstance(lat["runs"], int) or lat["runs"] < 3:
        errors.append("latency.runs: must be an integer >= 3")
    if not isinstance(lat["seq_len"], int) or lat["seq_len"] < 1:
        errors.append("latency.seq_len: must be a positive integer")

    bench = data["benchmark"]
    if len(bench["archs"]) < 4:
        errors.append("benchmark.archs: need at least 4 architectures")
    for a in bench["archs"]:
        try:
            arch = ArchConfig.parse(a)
            if sup is not None:
                from .supernet import fits
                if fits(sup, arch):
                    errors.append(f"benchmark.archs: {a} exceeds super_config")
        except (ValueError, PlmSearchError) as exc:
            errors.append(f"benchmark.archs: {exc}")
    for sect, key in (("benchmark", "standalone_steps"), ("further", "max_steps"), ("teacher", "max_steps")):
        v = data[sect][key]
        if not isinstance(v, int) or v < 1:
            errors.append(f"{sect}.{key}: must be a positive integer")

    if errors:
        raise ConfigError(errors)
    return RunConfig(data, space, sup, train)


def load(path) -> RunConfig:
    """Read and validate a config file; missing or malformed files raise ConfigError."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror or exc})"]) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    return from_dict(raw)
