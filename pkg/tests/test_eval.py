import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plmsearch import eval as ev
from plmsearch import supernet as sn
from plmsearch.data import Corpus, make_corpus
from plmsearch.errors import ContractError
from plmsearch.train import TrainConfig
from plmsearch.transformer import ArchConfig

from oracles import pairwise_loops

V, L = 32, 8
SUP = ArchConfig.make(2, 16, 16, 2, 8)


@pytest.fixture(scope="module")
def data():
    c = make_corpus({"kind": "synthetic", "n_sequences": 192}, V, L, seed=0)
    train, held = c.split(1 / 3, seed=0)
    return train, ev.make_eval_set(held)


def test_pairwise_hand_examples():
    assert ev.pairwise_accuracy([1.0, 2.0], [1.0, 2.0], ev.LITERAL) == 0.75
    assert ev.pairwise_accuracy([1.0, 2.0], [1.0, 2.0], ev.CONCORDANT) == 1.0
    assert ev.pairwise_accuracy([2.0, 1.0], [1.0, 2.0], ev.CONCORDANT) == 2 / 3
    assert ev.pairwise_accuracy([1.0, 1.0], [1.0, 2.0], ev.LITERAL) == 0.75
    with pytest.raises(ContractError):
        ev.pairwise_accuracy([1.0], [1.0])
    with pytest.raises(ContractError):
        ev.pairwise_accuracy([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ContractError):
        ev.pairwise_accuracy([1.0, 2.0], [1.0, 2.0], "KENDALL")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=2, max_size=12))
def test_pairwise_matches_loop_oracle(pairs):
    f, s = [p[0] for p in pairs], [p[1] for p in pairs]
    assert ev.pairwise_accuracy(f, s, ev.LITERAL) == pairwise_loops(f, s, "n2")
    assert ev.pairwise_accuracy(f, s, ev.CONCORDANT) == pairwise_loops(f, s, "concordant")


def test_pairwise_invariant_to_monotone_transforms():
    rng = np.random.default_rng(0)
    f, s = rng.normal(size=10), rng.normal(size=10)
    base = ev.pairwise_accuracy(f, s)
    assert ev.pairwise_accuracy(np.exp(f), s ** 3) == base
    assert ev.pairwise_accuracy(f, f) == 1.0


def test_combine():
    assert ev.combine(math.log(V), 0.5, V) == pytest.approx(-0.25)
    assert ev.combine(math.log(V), math.nan, V) == pytest.approx(-1.0)


def test_proxy_score_is_pure_and_deterministic(data):
    _, es = data
    net = sn.build_supernet(SUP, V, L, seed=0, std=0.2)
    before = net.digest()
    arch = ArchConfig.make(1, 8, 8, 1, 4)
    a = ev.proxy_score(net, arch, sn.Strategy.HEAD_PREFIX, es)
    b = ev.proxy_score(net, arch, sn.Strategy.HEAD_PREFIX, es)
    assert a == b
    assert net.digest() == before
    assert 0 <= a.probe_accuracy <= 1
    m = sn.materialize(sn.extract_submodel(net, arch))
    assert ev.model_score(m, es).mlm_loss == pytest.approx(a.mlm_loss, rel=1e-12)


def test_eval_set_is_fixed(data):
    _, es = data
    c = make_corpus({"kind": "synthetic", "n_sequences": 192}, V, L, seed=0).split(1 / 3, seed=0)[1]
    es2 = ev.make_eval_set(c)
    np.testing.assert_array_equal(es.batch.input_ids, es2.batch.input_ids)
    assert len(es.probe_train) + len(es.probe_test) == len(c)


def test_probe_absent_without_labels():
    c = Corpus(np.random.default_rng(0).integers(0, 15, (20, 6)), 16)
    es = ev.make_eval_set(c)
    arch = ArchConfig.make(1, 8, 8, 1, 4)
    s = ev.score_params(sn.build_supernet(arch, 16, 6, 0).params, arch, es)
    assert math.isnan(s.probe_accuracy)
    assert s.score == pytest.approx(-s.mlm_loss / math.log(16))


def test_probe_matches_signed_least_squares(data):
    # with two classes the one-hot fit decides like a single +-1 target fit
    _, es = data
    net = sn.build_supernet(SUP, V, L, seed=0, std=0.5)
    acc = ev.probe_accuracy(net.params, SUP, es)
    xtr = ev.pooled(net.params, SUP, es.probe_train)
    xte = ev.pooled(net.params, SUP, es.probe_test)
    A = np.hstack([xtr, np.ones((len(xtr), 1))])
    y = np.where(es.probe_train_y == 1, 1.0, -1.0)
    w = np.linalg.pinv(A) @ y
    pred = (np.hstack([xte, np.ones((len(xte), 1))]) @ w > 0).astype(int)
    assert acc == pytest.approx(float(np.mean(pred == es.probe_test_y)), abs=1 / len(xte) + 1e-12)


def test_score_report_roundtrip(tmp_path):
    s = [ev.ArchScore(ArchConfig.make(1, 8, 8, 1, 4), 3.1, 0.5, -0.2), ev.ArchScore(SUP, 2.9, math.nan, -0.8)]
    ev.ScoreReport(s, {"kind": "x"}).write(tmp_path / "s.csv")
    back = ev.read_scores(tmp_path / "s.csv")
    assert back[0] == s[0]
    assert math.isnan(back[1].probe_accuracy) and back[1].arch == SUP
    assert json.loads((tmp_path / "s.json").read_text()) == {"kind": "x"}


def test_ranking_benchmark_caches_standalone_models(tmp_path, data):
    train, es = data
    net = sn.build_supernet(SUP, V, L, seed=0)
    archs = [ArchConfig.make(1, 8, 8, 1, 4), ArchConfig.make(1, 16, 16, 2, 8),
             ArchConfig.make(2, 8, 16, 1, 4), ArchConfig.make(2, 16, 8, 2, 8)]
    cfg = TrainConfig.desk(max_steps=2)
    first = ev.ranking_benchmark(net, archs, train, es, cfg, cache_dir=tmp_path)
    second = ev.ranking_benchmark(net, archs, train, es, cfg, cache_dir=tmp_path)
    assert first.accuracy["cache_hits"] == 0 and second.accuracy["cache_hits"] == 4
    assert [s.score for s in first.standalone.scores] == [s.score for s in second.standalone.scores]
    assert first.accuracy["standalone_vs_self"][ev.CONCORDANT] == 1.0
    first.write_scatter(tmp_path / "scatter.csv")
    assert len((tmp_path / "scatter.csv").read_text().splitlines()) == 5
    with pytest.raises(ContractError):
        ev.ranking_benchmark(net, archs[:3], train, es, cfg)
