import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plmsearch import nn_core as nn
from plmsearch.errors import ContractError, DimensionError, NumericError, OracleError

from oracles import layer_norm_ref, naive_matmul, softmax_ref


def run(op, *args, **kw):
    tape = nn.Tape()
    return op(tape, *args, **kw).value


# ---------------------------------------------------------------- matmul


def test_matmul_hand_example():
    out = run(nn.matmul, np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out, [[19, 22], [43, 50]])


def test_matmul_identity_and_annihilator():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(2, 2))
    np.testing.assert_array_equal(run(nn.matmul, np.eye(2), b), b)
    np.testing.assert_array_equal(run(nn.matmul, b, np.zeros((2, 3))), np.zeros((2, 3)))


def test_matmul_matches_loops():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(run(nn.matmul, a, b), naive_matmul(a, b), rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        run(nn.matmul, np.ones((2, 3)), np.ones((4, 5)))


def test_matmul_identity_associativity_bitwise():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)).astype(np.float32), rng.normal(size=(4, 2)).astype(np.float32)
    eye = np.eye(4, dtype=np.float32)
    left = run(nn.matmul, run(nn.matmul, a, eye), b)
    right = run(nn.matmul, a, run(nn.matmul, eye, b))
    assert left.tobytes() == right.tobytes()


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(run(nn.softmax_rows, np.zeros((1, 4))), [[0.25] * 4])
    np.testing.assert_allclose(run(nn.softmax_rows, np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-6)
    out = run(nn.softmax_rows, np.log([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        run(nn.softmax_rows, np.array([[0.0, np.inf]]))
    with pytest.raises(NumericError):
        run(nn.softmax_rows, np.array([[np.nan, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = run(nn.softmax_rows, x)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out, softmax_ref(x), atol=1e-12)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one, zero = np.ones(2), np.zeros(2)
    np.testing.assert_allclose(run(nn.layer_norm, np.array([[1.0, 3.0]]), one, zero, eps=0.0), [[-1, 1]])
    np.testing.assert_array_equal(run(nn.layer_norm, np.full((1, 4), 7.0), np.ones(4), np.zeros(4)),
                                  np.zeros((1, 4)))
    beta = np.array([0.5, -1.0, 2.0])
    out = run(nn.layer_norm, np.array([[1.0, 2, 4], [0, 5, 1]]), np.zeros(3), beta)
    np.testing.assert_array_equal(out, np.broadcast_to(beta, (2, 3)))


def test_layer_norm_needs_two_features():
    with pytest.raises(DimensionError):
        run(nn.layer_norm, np.ones((3, 1)), np.ones(1), np.zeros(1))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 10)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_layer_norm_moments(x):
    d = x.shape[1]
    out = run(nn.layer_norm, x, np.ones(d), np.zeros(d))
    np.testing.assert_allclose(out, layer_norm_ref(x, 1, 0), atol=1e-9)
    for row_in, row in zip(x, out):
        if np.ptp(row_in) > 1e-3:
            assert abs(row.mean()) <= 1e-6
            assert abs(row.var() - 1) <= 1e-4


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_examples():
    assert run(nn.cross_entropy_mean, np.zeros((3, 64)), [1, 2, 3]) == pytest.approx(math.log(64), abs=1e-12)
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 4] = 1000.0
    assert run(nn.cross_entropy_mean, logits, [1, 4]) == pytest.approx(0.0, abs=1e-9)
    assert run(nn.cross_entropy_mean, np.random.default_rng(0).normal(size=(4, 6)), [-100] * 4) == 0.0


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        run(nn.cross_entropy_mean, np.zeros((2, 4)), [0, 4])
    with pytest.raises(IndexError):
        run(nn.cross_entropy_mean, np.zeros((2, 4)), [-1, 0])


def test_cross_entropy_ignores_masked_positions():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 7))
    targets = np.array([2, -100, 5, -100])
    p = softmax_ref(logits)
    expected = -(math.log(p[0, 2]) + math.log(p[2, 5])) / 2
    assert run(nn.cross_entropy_mean, logits, targets) == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_linear_case():
    tape = nn.Tape()
    w = tape.param("w", np.array(1.7))
    loss = nn.mul(tape, w, np.array(3.0))
    assert nn.backward(tape, loss)["w"] == 3.0


def test_unused_parameter_gets_zero():
    tape = nn.Tape()
    w = tape.param("w", np.array([1.0, 2.0]))
    tape.param("unused", np.ones((2, 2)))
    loss = nn.mse(tape, w, np.zeros(2))
    g = nn.backward(tape, loss)
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    tape = nn.Tape()
    w = tape.param("w", np.ones(3))
    with pytest.raises(ContractError):
        nn.backward(tape, nn.scale(tape, w, 2.0))


def test_backward_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(4)
    tape = nn.Tape()
    w = tape.param("w", rng.normal(size=(5, 3)))
    x = rng.normal(size=(4, 5))
    loss = nn.cross_entropy_mean(tape, nn.relu(tape, nn.matmul(tape, x, w)), [0, 1, 2, 0])
    g1, g2 = nn.backward(tape, loss), nn.backward(tape, loss)
    assert g1["w"].tobytes() == g2["w"].tobytes()


def _check_op(build, shapes, seed=0):
    rng = np.random.default_rng(seed)
    params = {f"p{i}": rng.normal(size=s) for i, s in enumerate(shapes)}

    def f(p):
        tape = nn.Tape()
        return float(build(tape, *[tape.param(k, v) for k, v in p.items()]).value)

    tape = nn.Tape()
    loss = build(tape, *[tape.param(k, v) for k, v in params.items()])
    return nn.finite_diff_check(f, params, 1e-4, nn.backward(tape, loss))


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda t, a, b: nn.mse(t, nn.matmul(t, a, b), np.ones((3, 2))), [(3, 4), (4, 2)]),
    ("batched matmul", lambda t, a, b: nn.mse(t, nn.matmul(t, a, b), np.zeros((2, 3, 2))), [(2, 3, 4), (4, 2)]),
    ("softmax", lambda t, a: nn.mse(t, nn.softmax_rows(t, a), np.full((3, 4), 0.1)), [(3, 4)]),
    ("layer_norm", lambda t, x, g, b: nn.mse(t, nn.layer_norm(t, x, g, b), np.ones((3, 5))), [(3, 5), (5,), (5,)]),
    ("cross_entropy", lambda t, a: nn.cross_entropy_mean(t, a, [1, -100, 3]), [(3, 5)]),
    ("embedding", lambda t, e: nn.mse(t, nn.embedding(t, e, np.array([0, 2, 2])), np.ones((3, 4))), [(3, 4)]),
    ("transpose+mean", lambda t, a: nn.mse(t, nn.mean(t, nn.transpose(t, a, (1, 0)), 1), np.ones(4)), [(3, 4)]),
    ("reshape+mul+sub", lambda t, a, b: nn.mse(t, nn.sub(t, nn.mul(t, nn.reshape(t, a, (2, 3)), b), b),
                                               np.zeros((2, 3))), [(6,), (2, 3)]),
])
def test_op_gradients(name, build, shapes):
    assert _check_op(build, shapes) <= 1e-6


# ---------------------------------------------------------------- finite differences


def test_finite_diff_quadratic_is_exact():
    report = nn.finite_diff_report(lambda p: float(p["w"][0] ** 2), {"w": np.array([3.0])}, 1e-3,
                                   {"w": np.array([6.0])})
    assert report.max_rel_error <= 1e-9


def test_finite_diff_flags_wrong_gradients():
    f = lambda p: float(np.sum(np.sin(p["w"])))  # noqa: E731
    err = nn.finite_diff_check(f, {"w": np.array([0.3, 1.0])}, 1e-3, {"w": np.zeros(2)})
    assert err > 0.5


def test_finite_diff_epsilon_range():
    with pytest.raises(ContractError):
        nn.finite_diff_check(lambda p: 0.0, {"w": np.zeros(1)}, 1e-6, {"w": np.zeros(1)})
    with pytest.raises(ContractError):
        nn.finite_diff_check(lambda p: 0.0, {"w": np.zeros(1)}, 0.1, {"w": np.zeros(1)})


def test_finite_diff_detects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(OracleError):
        nn.finite_diff_check(lambda p: float(rng.random()), {"w": np.zeros(2)}, 1e-3, {"w": np.zeros(2)})


# ---------------------------------------------------------------- optimizers


def test_sgd_step():
    params = {"w": np.array([1.0])}
    nn.optimizer_step(params, {"w": np.array([2.0])}, nn.OptimizerState("sgd"), 0.1)
    assert params["w"][0] == pytest.approx(0.8)


def test_sgd_zero_gradient_keeps_params_bitwise():
    w = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    params = {"w": w.copy()}
    nn.optimizer_step(params, {"w": np.zeros((3, 3))}, nn.OptimizerState("sgd"), 0.5)
    assert params["w"].tobytes() == w.tobytes()


def test_adam_first_step_moves_by_lr():
    g = np.array([0.3, -2.0, 1e-3])
    params = {"w": np.zeros(3)}
    nn.optimizer_step(params, {"w": g}, nn.OptimizerState("adam"), 0.01, eps=1e-12)
    np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-6)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(5)
    params = {"w": rng.normal(size=4)}
    ref = params["w"].copy()
    m = v = np.zeros(4)
    state = nn.OptimizerState("adam")
    for t in range(1, 6):
        g = rng.normal(size=4)
        nn.optimizer_step(params, {"w": g}, state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)
    assert state.step == 5


def test_optimizer_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.optimizer_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, nn.OptimizerState("sgd"), 0.1)


def test_optimizer_keeps_dtype():
    params = {"w": np.ones(2, dtype=np.float32)}
    nn.optimizer_step(params, {"w": np.ones(2)}, nn.OptimizerState("adam"), 0.1)
    assert params["w"].dtype == np.float32
