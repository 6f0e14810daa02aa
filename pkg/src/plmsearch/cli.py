"""Command-line pipeline: train-supernet, latency, search, further-train,
benchmark and report.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 infeasible latency budget.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data
from . import eval as ev
from . import latency as lat
from . import search as srch
from . import supernet as sn
from . import train as tr
from .errors import CheckpointError, InfeasibleError, PlmSearchError
from .transformer import ArchConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE = 0, 2, 3, 4

SUPERNET = "supernet.atbt"
TEACHER = "teacher.atbt"
PREDICTOR = "latency_predictor.atbt"
DATASET = "latency_dataset.csv"
HISTORY = "search_history.csv"
WINNERS = "winners.txt"

# reference values quoted in reports for context only
PUBLISHED_CARDINALITY = {"PRETRAIN": "about 46M", "KD": "about 10M"}
REFERENCE_PAIRWISE = 96.7
RULE_EXAMPLES = ["5-564-1054-8-512", "3-320-608-4-256", "5-564-1024-12-528", "5-324-600-12-324",
                 "5-280-512-12-276", "4-256-480-12-192", "4-432-384-4-256", "4-396-624-6-384"]
BORDERLINE = "4-396-624-6-384"


class UsageError(PlmSearchError):
    pass


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def out_root(args) -> Path:
    return Path(os.environ.get("ATBT_OUT") or args.out or "runs")


def run_dir(args, rc: cfgmod.RunConfig, create: bool = True) -> Path:
    """``<out>/<timestamp>-<hash>``; the newest directory for this config is reused."""
    root = out_root(args)
    tag = rc.digest()[:12]
    existing = sorted(root.glob(f"*-{tag}")) if root.exists() else []
    if existing and not getattr(args, "fresh", False):
        return existing[-1]
    if not create:
        raise UsageError(f"no run directory for this config under {root}; run train-supernet first")
    d = root / f"{time.strftime('%Y%m%dT%H%M%S', time.gmtime())}-{tag}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(rc.canonical())
    return d


def load_config(args) -> cfgmod.RunConfig:
    if args.config:
        rc = cfgmod.load(args.config)
    else:
        rc = cfgmod.from_dict({"schema_version": cfgmod.SCHEMA_VERSION})
    if args.seed is not None:
        rc = cfgmod.from_dict({**rc.data, "seed": args.seed})
    return rc


def corpora(rc: cfgmod.RunConfig):
    d = rc.data
    corpus = data.make_corpus(d["corpus"], d["vocab_size"], d["seq_len"], cfgmod.derive_seed(rc.seed, "corpus"))
    train_c, eval_c = corpus.split(d["eval_fraction"], cfgmod.derive_seed(rc.seed, "split"))
    return train_c, ev.make_eval_set(eval_c)


def strategy_for(rc) -> sn.Strategy:
    return sn.Strategy.PER_HEAD_SLICE if rc.space.mode == srch.KD else sn.Strategy.HEAD_PREFIX


def _threads(args) -> int:
    return max(1, int(args.workers or 1))


def _say(msg: str) -> None:
    print(msg, flush=True)


def _find(d: Path, name: str, explicit=None) -> Path:
    p = Path(explicit) if explicit else d / name
    if not p.exists():
        raise CheckpointError(f"missing input {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _teacher(rc, train_c, d: Path, threads: int):
    path = d / TEACHER
    if path.exists():
        return sn.Model.load(path)
    cfg = replace(rc.train, objective=tr.MLM, max_steps=rc.data["teacher"]["max_steps"], epochs=10_000,
                  seed=cfgmod.derive_seed(rc.seed, "teacher"), threads=threads)
    model, res = tr.standalone_train(rc.super_config, train_c, cfg, max_len=rc.data["seq_len"])
    model.save(path, {"role": "teacher", "config": rc.data})
    tr.write_trace(d / "teacher_trace.csv", res.trace)
    return model


def cmd_train_supernet(args) -> int:
    rc = load_config(args)
    d = run_dir(args, rc)
    train_c, _ = corpora(rc)
    t0 = time.perf_counter()
    net = sn.build_supernet(rc.super_config, rc.data["vocab_size"], rc.data["seq_len"],
                            cfgmod.derive_seed(rc.seed, "supernet"))
    teacher = _teacher(rc, train_c, d, _threads(args)) if rc.train.objective == tr.KD_OBJECTIVE else None
    res = tr.oneshot_train(net, train_c, rc.space, replace(rc.train, threads=_threads(args)), teacher)
    digest = net.save(d / SUPERNET, {"config": rc.data, "corpus_sha256": train_c.digest()})
    tr.write_trace(d / "supernet_trace.csv", res.trace)
    _say(f"train-supernet: {len(res.trace)} steps, final loss {res.trace[-1].loss:.4f}, "
         f"{time.perf_counter() - t0:.1f}s, checkpoint {digest[:16]} -> {d / SUPERNET}")
    return EXIT_OK


def cmd_latency(args) -> int:
    rc = load_config(args)
    d = run_dir(args, rc)
    L = rc.data["latency"]
    mode = (args.mode or L["mode"]).upper()
    if mode not in (lat.ANALYTIC, lat.MEASURED):
        raise UsageError(f"--mode must be analytic or measured, got {args.mode!r}")
    samples = lat.build_latency_dataset(rc.space, L["n"], L["seq_len"], mode,
                                        cfgmod.derive_seed(rc.seed, "latency"), runs=L["runs"])
    lat.write_dataset(d / DATASET, samples, rc.space)
    model = lat.fit_predictor(samples, L["split_seed"], rc.space)
    model.metadata["mode"] = mode
    model.save(d / PREDICTOR)
    m = model.metadata
    _say(f"latency: {len(samples)} samples ({mode}), held-out mean relative error "
         f"{m['heldout_mean_rel_error']:.6f}, median {m['heldout_median_rel_error']:.6f}")
    return EXIT_OK


def _evaluator(net, rc, es):
    strategy = strategy_for(rc)
    cache = {}

    def score(arch):
        if arch not in cache:
            cache[arch] = ev.proxy_score(net, arch, strategy, es).score
        return cache[arch]

    return score


def cmd_search(args) -> int:
    rc = load_config(args)
    d = run_dir(args, rc, create=False)
    net, _ = sn.SuperNet.load(_find(d, SUPERNET, args.checkpoint))
    predictor = lat.LatencyModel.load(_find(d, PREDICTOR, args.predictor))
    _, es = corpora(rc)
    budget = args.budget if args.budget is not None else rc.data["search"]["budget"]
    if budget is None or budget <= 0:
        raise UsageError("a positive latency budget is required (--budget or search.budget)")
    score = _evaluator(net, rc, es)
    top_k = rc.data["search"]["top_k"]
    if args.fast:
        cands = srch.fast_rule_candidates(rc.space, predictor, budget)
        if not cands:
            smallest = srch.fast_rule_tightest(rc.space, predictor)
            raise InfeasibleError(f"no rule-conforming architecture fits budget {budget:g}; "
                                  f"tightest feasible budget {smallest:g}", smallest)
        history = [srch.Candidate(a, predictor.predict(a), score(a), 1) for a in cands]
        top = srch.top_candidates(history, top_k)
        _say(f"search --fast: evaluated {len(history)} candidates (one per layer count)")
    else:
        result = srch.evolve(rc.space, score, predictor, budget, rc.evo_params(budget))
        history, top = result.history, result.top
        _say(f"search: evaluated {len(history)} candidates over {rc.data['search']['generations']} generations")
    srch.write_history(d / HISTORY, history)
    (d / WINNERS).write_text("".join(f"{c.arch.compact()}\n" for c in top))
    for c in top:
        _say(f"  {c.arch.compact()}  predicted {c.predicted_latency:.4f} ms  score {c.score:.6f}")
    return EXIT_OK


def cmd_further_train(args) -> int:
    rc = load_config(args)
    try:
        arch = ArchConfig.parse(args.arch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = run_dir(args, rc, create=False)
    net, _ = sn.SuperNet.load(_find(d, SUPERNET, args.checkpoint))
    over = sn.fits(net.config, arch)
    if over:
        raise UsageError(f"{args.arch} does not fit the supernet: " + ", ".join(over))
    train_c, es = corpora(rc)
    teacher = sn.Model.load(_find(d, TEACHER)) if rc.train.objective == tr.KD_OBJECTIVE else None
    cfg = replace(rc.train, max_steps=rc.data["further"]["max_steps"], epochs=10_000,
                  seed=cfgmod.derive_seed(rc.seed, "further"), threads=_threads(args))
    model, res = tr.further_train(net, arch, strategy_for(rc), train_c, cfg, teacher)
    name = arch.compact()
    digest = model.save(d / f"model-{name}.atbt", {"config": rc.data, "source": "further-train"})
    tr.write_trace(d / f"further_trace-{name}.csv", res.trace)
    s = ev.model_score(model, es)
    _say(f"further-train {name}: {len(res.trace)} steps, final loss {res.trace[-1].loss:.4f}, "
         f"held-out mlm {s.mlm_loss:.4f}, checkpoint {digest[:16]}")
    return EXIT_OK


def cardinality_report() -> dict:
    out = {}
    for mode, space in (("PRETRAIN", srch.full_pretrain_space()), ("KD", srch.full_kd_space())):
        out[mode] = {"enumerated": srch.space_cardinality(space), "published": PUBLISHED_CARDINALITY[mode]}
    out["note"] = ("published approximations do not match enumeration; the two published figures "
                   "appear swapped between modes")
    return out


def rule_report() -> list[dict]:
    rows = []
    for s in RULE_EXAMPLES:
        a = ArchConfig.parse(s)
        rows.append({"arch": s, "d_f/d_m": round(a.d_f / a.d_m, 4), "d_qkv/d_m": round(a.d_q / a.d_m, 4),
                     "inside": srch.in_fast_rule(a),
                     "flag": "borderline: d_f/d_m below 1.6 under literal bounds" if s == BORDERLINE else ""})
    return rows


def cmd_benchmark(args) -> int:
    rc = load_config(args)
    d = run_dir(args, rc, create=False)
    ck = _find(d, SUPERNET, args.checkpoint)
    net, _ = sn.SuperNet.load(ck)
    train_c, es = corpora(rc)
    archs = [ArchConfig.parse(s) for s in rc.data["benchmark"]["archs"]]
    cfg = replace(rc.train, objective=tr.MLM, max_steps=rc.data["benchmark"]["standalone_steps"], epochs=10_000,
                  seed=cfgmod.derive_seed(rc.seed, "standalone"), threads=1)
    from .checkpoint import file_sha256
    meta = {"checkpoint_sha256": file_sha256(ck), "seed": rc.seed, "config": rc.data}
    res = ev.ranking_benchmark(net, archs, train_c, es, cfg, strategy_for(rc),
                               cache_dir=out_root(args) / "cache", metadata=meta, log=_say)
    res.oneshot.write(d / "scores_oneshot.csv")
    res.standalone.write(d / "scores_standalone.csv")
    res.write_scatter(d / "ranking_scatter.csv")
    acc = res.accuracy
    summary = {
        "checkpoint_sha256": meta["checkpoint_sha256"],
        "pairwise_accuracy": {k: v for k, v in acc.items() if k != "cache_hits"},
        "reference_full_scale_pairwise_accuracy": REFERENCE_PAIRWISE,
        "search_space_cardinality": cardinality_report(),
        "fast_rule_examples": rule_report(),
    }
    (d / "benchmark.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    c = acc["oneshot_vs_standalone"]
    _say(f"benchmark: pairwise accuracy one-shot vs stand-alone CONCORDANT {c['CONCORDANT']:.4f} "
         f"LITERAL {c['LITERAL']:.4f}; stand-alone vs self CONCORDANT "
         f"{acc['standalone_vs_self']['CONCORDANT']:.4f}; cached stand-alone models {acc['cache_hits']}")
    card = summary["search_space_cardinality"]
    _say(f"  cardinality PRETRAIN {card['PRETRAIN']['enumerated']:,} (published {card['PRETRAIN']['published']}), "
         f"KD {card['KD']['enumerated']:,} (published {card['KD']['published']}); {card['note']}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plotting

    rc = load_config(args)
    d = run_dir(args, rc, create=False)
    figs = d / "figures"
    figs.mkdir(exist_ok=True)
    made = []
    traces = {p.stem: tr.read_trace(p) for p in sorted(d.glob("*trace*.csv"))}
    if traces:
        plotting.loss_traces(traces, figs / "loss_traces.png")
        made.append("loss_traces.png")
    if (d / DATASET).exists() and (d / PREDICTOR).exists():
        samples = lat.read_dataset(d / DATASET, rc.space)
        model = lat.LatencyModel.load(d / PREDICTOR)
        plotting.latency_fit([s.latency_ms for s in samples], model.predict_many([s.arch for s in samples]),
                             figs / "latency_fit.png")
        made.append("latency_fit.png")
    if (d / HISTORY).exists():
        plotting.search_history(srch.read_history(d / HISTORY), figs / "search_history.png",
                                rc.data["search"]["budget"])
        made.append("search_history.png")
    if (d / "ranking_scatter.csv").exists():
        import csv
        with open(d / "ranking_scatter.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        bench = json.loads((d / "benchmark.json").read_text()) if (d / "benchmark.json").exists() else {}
        acc = bench.get("pairwise_accuracy", {}).get("oneshot_vs_standalone", {}).get("CONCORDANT")
        plotting.ranking_scatter([float(r["oneshot_score"]) for r in rows],
                                 [float(r["standalone_score"]) for r in rows],
                                 [r["arch"] for r in rows], figs / "ranking_scatter.png", acc)
        made.append("ranking_scatter.png")
    lines = ["# run report", "", f"config sha256: {rc.digest()}", ""]
    lines += [f"![{m}](figures/{m})" for m in made]
    (d / "report.md").write_text("\n".join(lines) + "\n")
    _say(f"report: {len(made)} figures -> {figs}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config (JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the root seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root (ATBT_OUT overrides)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="execution threads")
    common.add_argument("--fresh", action="store_true", default=argparse.SUPPRESS,
                        help="start a new run directory")

    p = argparse.ArgumentParser(prog="plmsearch", parents=[common], description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-supernet", parents=[common], help="one-shot supernet training")
    s = sub.add_parser("latency", parents=[common], help="latency dataset and predictor")
    s.add_argument("--mode", choices=["analytic", "measured", "ANALYTIC", "MEASURED"])
    s = sub.add_parser("search", parents=[common], help="evolutionary or fast-rule search")
    s.add_argument("--budget", type=float, help="latency budget in ms")
    s.add_argument("--fast", action="store_true", help="one rule-conforming candidate per layer count")
    s.add_argument("--checkpoint", help="supernet checkpoint (default: run directory)")
    s.add_argument("--predictor", help="latency predictor checkpoint (default: run directory)")
    s = sub.add_parser("further-train", parents=[common], help="continue training an extracted sub-model")
    s.add_argument("--arch", required=True, help="compact form l_t-d_m-d_f-h-d_qkv")
    s.add_argument("--checkpoint", help="supernet checkpoint (default: run directory)")
    s = sub.add_parser("benchmark", parents=[common], help="one-shot vs stand-alone ranking")
    s.add_argument("--checkpoint", help="supernet checkpoint (default: run directory)")
    sub.add_parser("report", parents=[common], help="render figures for a run directory")
    return p


COMMANDS = {"train-supernet": cmd_train_supernet, "latency": cmd_latency, "search": cmd_search,
            "further-train": cmd_further_train, "benchmark": cmd_benchmark, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("workers", None), ("fresh", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return COMMANDS[args.command](args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (json.JSONDecodeError, PlmSearchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
