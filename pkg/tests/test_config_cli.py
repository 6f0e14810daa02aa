import json

import pytest

from plmsearch import cli
from plmsearch import config as cfgmod
from plmsearch.config import ConfigError

TINY = {"schema_version": 1, "corpus": {"kind": "synthetic", "n_sequences": 320},
        "train": {"epochs": 1}, "latency": {"n": 100},
        "benchmark": {"standalone_steps": 3}, "further": {"max_steps": 3},
        "search": {"generations": 2, "population": 4, "top_k": 2}}


def test_defaults_validate():
    rc = cfgmod.from_dict({"schema_version": 1})
    assert rc.super_config == rc.space.max_arch()
    assert rc.train.batch_size % rc.train.n_workers == 0
    assert rc.digest() == cfgmod.from_dict(json.loads(rc.canonical())).digest()


def test_all_field_errors_are_reported_together():
    with pytest.raises(ConfigError) as info:
        cfgmod.from_dict({"schema_version": 1, "vocab_size": 4, "train": {"batch_size": 30},
                          "latency": {"n": 50, "runs": 1}, "bogus": 1})
    msg = str(info.value)
    for part in ("vocab_size", "batch_size 30 is not divisible by n_workers 4", "latency.n", "latency.runs",
                 "bogus: unknown field"):
        assert part in msg


@pytest.mark.parametrize("override,needle", [
    ({"schema_version": 2}, "schema_version"),
    ({"search": {"mode": "KD", "h": [1, 2], "d_qkv": [8]}}, "KD mode fixes the head count"),
    ({"search": {"d_m": [16, 48]}}, "space exceeds super_config"),
    ({"search": {"head_dim": 4}}, "head_dim"),
    ({"benchmark": {"archs": ["1-16-16-1-8"]}}, "at least 4"),
    ({"benchmark": {"archs": ["1-16-16-1", "1-16-16-1-8", "1-16-16-1-8", "1-16-16-1-8"]}}, "benchmark.archs"),
    ({"corpus": {"kind": "text"}}, "corpus.path"),
    ({"search": {"budget": -1}}, "search.budget"),
    ({"train": {"objective": "KD"}}, "train.objective"),
])
def test_cross_field_checks(override, needle):
    with pytest.raises(ConfigError) as info:
        cfgmod.from_dict({"schema_version": 1, **override})
    assert needle in str(info.value)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        cfgmod.load(bad)


def test_derived_seeds_are_stable_and_distinct():
    assert cfgmod.derive_seed(0, "train") == cfgmod.derive_seed(0, "train")
    assert len({cfgmod.derive_seed(0, n) for n in ("train", "corpus", "search", "supernet")}) == 4
    assert cfgmod.derive_seed(0, "train") != cfgmod.derive_seed(1, "train")


# ---------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--out", str(root / "out")]
    assert cli.main(["train-supernet", *base]) == 0
    assert cli.main(["latency", *base]) == 0
    return root, base


def run_dirs(root):
    return sorted(p for p in (root / "out").iterdir() if p.name != "cache")


def test_pipeline_reuses_run_directory(run):
    root, base = run
    assert cli.main(["search", *base]) == 0
    assert cli.main(["further-train", *base, "--arch", "1-16-16-1-8"]) == 0
    assert cli.main(["benchmark", *base]) == 0
    assert cli.main(["report", *base]) == 0
    (d,) = run_dirs(root)
    names = {p.name for p in d.iterdir()}
    for f in ("config.json", "supernet.atbt", "supernet_trace.csv", "latency_dataset.csv",
              "latency_predictor.atbt", "search_history.csv", "winners.txt", "model-1-16-16-1-8.atbt",
              "benchmark.json", "scores_oneshot.csv", "scores_standalone.json", "report.md"):
        assert f in names
    assert len((d / "search_history.csv").read_text().splitlines()) == 1 + 2 * 4
    assert len((d / "winners.txt").read_text().splitlines()) == 2
    bench = json.loads((d / "benchmark.json").read_text())
    assert bench["search_space_cardinality"]["PRETRAIN"]["enumerated"] == 11_391_072
    assert bench["reference_full_scale_pairwise_accuracy"] == 96.7
    assert {p.name for p in (d / "figures").iterdir()} >= {"loss_traces.png", "latency_fit.png",
                                                           "search_history.png", "ranking_scatter.png"}


def test_fast_search(run, capsys):
    root, base = run
    assert cli.main(["search", *base, "--fast"]) == 0
    assert "one per layer count" in capsys.readouterr().out
    (d,) = run_dirs(root)
    rows = (d / "search_history.csv").read_text().splitlines()[1:]
    depths = [r.split(",")[1] for r in rows]
    assert len(depths) == len(set(depths)) <= 4


def test_exit_codes(run, tmp_path, capsys):
    root, base = run
    assert cli.main(["search", *base, "--budget", "0.00001"]) == 4
    assert cli.main(["search", *base, "--fast", "--budget", "0.00001"]) == 4
    assert "tightest" in capsys.readouterr().err
    assert cli.main(["further-train", *base, "--arch", "1-16-16"]) == 2
    assert cli.main(["further-train", *base, "--arch", "5-16-16-1-8"]) == 2
    assert cli.main(["train-supernet", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "train": {"batch_size": 30}}))
    assert cli.main(["train-supernet", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["search", *base, "--checkpoint", str(tmp_path / "none.atbt")]) == 3
    # commands that need a trained supernet refuse to create a run directory
    assert cli.main(["search", "--config", str(root / "tiny.json"), "--out", str(tmp_path / "empty")]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["no-such-command"])
    assert info.value.code == 2


def test_env_overrides_out(run, tmp_path, monkeypatch):
    root, base = run
    monkeypatch.setenv("ATBT_OUT", str(tmp_path / "env"))
    assert cli.main(["latency", "--config", str(root / "tiny.json"), "--out", str(tmp_path / "ignored")]) == 0
    assert (tmp_path / "env").exists() and not (tmp_path / "ignored").exists()


def test_fresh_starts_a_new_directory(run, tmp_path):
    root, _ = run
    out = ["--config", str(root / "tiny.json"), "--out", str(tmp_path)]
    assert cli.main(["latency", *out]) == 0
    import time
    time.sleep(1.1)
    assert cli.main(["latency", *out, "--fresh"]) == 0
    assert len(list(tmp_path.iterdir())) == 2
