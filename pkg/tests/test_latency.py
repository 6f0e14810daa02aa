import math
import warnings

import numpy as np
import pytest

from plmsearch import latency as lat
from plmsearch import search as srch
from plmsearch import transformer as tf
from plmsearch.errors import CheckpointError, ContractError
from plmsearch.transformer import ArchConfig

SPACE = srch.full_pretrain_space()


@pytest.fixture(scope="module")
def fits():
    # one shared held-out set, disjoint seeds from the training draws
    held = lat.build_latency_dataset(SPACE, 500, 128, seed=99)
    out = {}
    for n in (200, 500, 2000):
        model = lat.fit_predictor(lat.build_latency_dataset(SPACE, n, 128, seed=1), space=SPACE)
        out[n] = float(np.mean(lat.relative_errors(model, held)))
    return out


def test_analytic_latency_is_scaled_macs():
    a = ArchConfig.parse("5-564-1054-8-512")
    assert lat.analytic_latency(a, 128) == pytest.approx(1_584_035_840 * 1e-6, rel=1e-15)
    assert lat.analytic_latency(a, 128) == tf.flops_forward(a, 128) * lat.MS_PER_MAC


def test_dataset_is_deterministic_distinct_and_normalised():
    d1 = lat.build_latency_dataset(SPACE, 300, 128, seed=5)
    d2 = lat.build_latency_dataset(SPACE, 300, 128, seed=5)
    assert [s.arch for s in d1] == [s.arch for s in d2]
    assert len({s.arch for s in d1}) == 300
    for s in d1:
        assert np.all(s.features > 0) and np.all(s.features <= 1)
        assert SPACE.contains(s.arch)


def test_small_space_is_enumerated_with_warning():
    sp = srch.toy_space()
    with pytest.warns(UserWarning):
        d = lat.build_latency_dataset(sp, 1000, 32)
    assert len(d) == sp.cardinality()


def test_dataset_csv_roundtrip(tmp_path):
    d = lat.build_latency_dataset(SPACE, 50, 128, seed=2)
    lat.write_dataset(tmp_path / "d.csv", d, SPACE)
    back = lat.read_dataset(tmp_path / "d.csv", SPACE)
    assert [(s.arch, s.latency_ms) for s in back] == [(s.arch, s.latency_ms) for s in d]


def test_held_out_error_falls_with_more_data(fits):
    assert fits[2000] <= fits[500] <= fits[200]
    assert fits[2000] <= 0.05


def test_constant_targets_predict_the_constant():
    d = lat.build_latency_dataset(SPACE, 120, 128, seed=3)
    for s in d:
        s.latency_ms = 2.5
    m = lat.fit_predictor(d, space=SPACE)
    assert m.metadata["loss_trace"] == []
    for s in d[:10]:
        assert m.predict(s.arch) == pytest.approx(2.5, rel=1e-12)


def test_predictions_are_positive_and_floored():
    d = lat.build_latency_dataset(SPACE, 150, 128, seed=4)
    m = lat.fit_predictor(d, space=SPACE, steps=200)
    m.weights["b3"] = np.array([-1e6])
    assert m.predict(d[0].arch) == lat.PRED_FLOOR_MS


def test_fit_is_deterministic_and_roundtrips(tmp_path):
    d = lat.build_latency_dataset(SPACE, 150, 128, seed=6)
    m1 = lat.fit_predictor(d, space=SPACE, steps=300)
    m2 = lat.fit_predictor(d, space=SPACE, steps=300)
    archs = [s.arch for s in d[:20]]
    assert m1.predict_many(archs).tobytes() == m2.predict_many(archs).tobytes()
    assert m1.metadata["n_train"] + m1.metadata["n_test"] == 150
    m1.save(tmp_path / "p.atbt")
    back = lat.LatencyModel.load(tmp_path / "p.atbt")
    assert back.predict_many(archs).tobytes() == m1.predict_many(archs).tobytes()
    assert back.space == SPACE
    assert back.metadata["heldout_mean_rel_error"] == m1.metadata["heldout_mean_rel_error"]
    assert lat.predict(back, archs[0]) == back(archs[0])


def test_fit_contracts(tmp_path):
    d = lat.build_latency_dataset(SPACE, 99, 128, seed=7)
    with pytest.raises(ContractError):
        lat.fit_predictor(d)
    with pytest.raises(ContractError):
        lat.build_latency_dataset(SPACE, 10, 128, mode="GUESS")
    with pytest.raises(ContractError):
        lat.measure_latency(ArchConfig.parse("1-16-16-1-8"), 8, runs=2)
    from plmsearch import checkpoint
    checkpoint.save(tmp_path / "x.atbt", {"a": np.zeros(2)}, {"kind": "model"})
    with pytest.raises(CheckpointError):
        lat.LatencyModel.load(tmp_path / "x.atbt")


@pytest.mark.measured
def test_measured_latency_is_positive_and_ordered():
    small = lat.measure_latency(ArchConfig.parse("1-16-16-1-8"), 32, runs=5)
    big = lat.measure_latency(ArchConfig.parse("4-128-512-4-128"), 32, runs=5)
    assert 0 < small < big
    assert math.isfinite(big)
