import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cfsm import numerics as nx
from cfsm.errors import ContractError, DimensionError, NumericError


def _mat(tape, v):
    return tape.const(np.asarray(v, dtype=float))


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def small_matrix(rows=st.integers(1, 5), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


# -- forward examples ------------------------------------------------------------

def test_matmul_identity_returns_other_operand(rng):
    t = nx.Tape()
    B = rng.normal(size=(3, 2))
    assert np.array_equal(nx.matmul(_mat(t, np.eye(3)), _mat(t, B)).value, B)


def test_matmul_zero_matrix():
    t = nx.Tape()
    out = nx.matmul(_mat(t, np.zeros((2, 2))), _mat(t, [[3.0, -1.0], [2.0, 7.0]]))
    assert np.array_equal(out.value, np.zeros((2, 2)))


def test_matmul_hand_example():
    t = nx.Tape()
    out = nx.matmul(_mat(t, [[1, 2], [3, 4]]), _mat(t, [[5], [6]]))
    assert out.value.tolist() == [[17.0], [39.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    t = nx.Tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nx.matmul(_mat(t, np.ones((2, 3))), _mat(t, np.ones((2, 2))))


def test_sigmoid_examples():
    t = nx.Tape()
    out = nx.sigmoid(_mat(t, [[0.0, math.log(3.0), 40.0]])).value[0]
    assert out[0] == 0.5
    assert out[1] == pytest.approx(0.75, abs=1e-15)
    assert 1.0 - out[2] < 1e-15 or out[2] == 1.0 - nx.EPS_CLIP


def test_sigmoid_clamped_both_ends():
    t = nx.Tape()
    out = nx.sigmoid(_mat(t, [[-100.0, 100.0]])).value
    assert out[0, 0] == nx.EPS_CLIP
    assert out[0, 1] == 1.0 - nx.EPS_CLIP


def test_nonfinite_inputs_rejected():
    t = nx.Tape()
    with pytest.raises(NumericError):
        t.const([[np.nan]])
    with pytest.raises(NumericError):
        nx.exp(_mat(t, [[1000.0]]))
    with pytest.raises(ContractError):
        nx.log(_mat(t, [[0.0]]))


def test_three_dimensional_input_rejected():
    with pytest.raises(DimensionError):
        nx.as_matrix(np.zeros((2, 2, 2)))


def test_operands_from_different_tapes():
    a = nx.Tape().leaf([[1.0]], "a")
    b = nx.Tape().leaf([[2.0]], "b")
    with pytest.raises(ContractError):
        nx.add(a, b)


# -- backward examples -------------------------------------------------------------

def test_gradient_of_sum_is_all_ones(rng):
    t = nx.Tape()
    X = t.leaf(rng.normal(size=(3, 4)), "X")
    g = t.backward(nx.sum_(X))["X"]
    assert np.array_equal(g, np.ones((3, 4)))


def test_gradient_of_half_squared_norm_is_identity(rng):
    v = rng.normal(size=(4, 2))
    t = nx.Tape()
    X = t.leaf(v, "X")
    g = t.backward(nx.scale(nx.sum_(nx.mul(X, X)), 0.5))["X"]
    np.testing.assert_allclose(g, v, rtol=0, atol=1e-15)


def test_backward_needs_scalar_seed():
    t = nx.Tape()
    X = t.leaf(np.ones((2, 2)), "X")
    with pytest.raises(ContractError):
        t.backward(X)


def test_reused_node_accumulates_gradient():
    t = nx.Tape()
    x = t.leaf([[3.0]], "x")
    y = nx.add(nx.mul(x, x), x)  # x^2 + x
    assert t.backward(y)["x"][0, 0] == 7.0


def test_operator_sugar_matches_ops(rng):
    t = nx.Tape()
    a = t.leaf(rng.normal(size=(2, 3)), "a")
    b = t.leaf(rng.normal(size=(2, 3)), "b")
    np.testing.assert_array_equal((a + b).value, nx.add(a, b).value)
    np.testing.assert_array_equal((a - b).value, nx.sub(a, b).value)
    np.testing.assert_array_equal((a * b).value, nx.mul(a, b).value)
    np.testing.assert_array_equal((a @ b.T).value, a.value @ b.value.T)
    np.testing.assert_array_equal((1.0 - a).value, 1.0 - a.value)


def test_log_softmax_rows_normalise(rng):
    t = nx.Tape()
    out = nx.log_softmax(_mat(t, rng.normal(size=(4, 5)) * 30)).value
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


def test_pairwise_sqdist_matches_brute_force(rng):
    X = rng.normal(size=(5, 3))
    t = nx.Tape()
    got = nx.pairwise_sqdist(_mat(t, X)).value
    want = [[float(np.sum((X[i] - X[j]) ** 2)) for j in range(5)] for i in range(5)]
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert np.all(np.diag(got) == 0.0)


def test_masked_row_max_min():
    t = nx.Tape()
    a = _mat(t, [[1.0, 5.0, 3.0], [4.0, 2.0, 0.0]])
    mask = np.array([[True, False, True], [False, True, True]])
    assert nx.masked_row_max(a, mask).value.ravel().tolist() == [3.0, 2.0]
    assert nx.masked_row_min(a, mask).value.ravel().tolist() == [1.0, 0.0]


def test_relative_error_definition():
    a = np.array([[1.0, 2.0]])
    n = np.array([[1.0, 2.5]])
    assert nx.relative_error(a, n) == pytest.approx(0.5 / 2.5)
    assert nx.relative_error(np.zeros((1, 1)), np.full((1, 1), 1e-9)) == pytest.approx(1e-3)


def test_check_gradients_flags_a_wrong_vjp(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 2))

    def build(t, leaves):
        return nx.sum_(nx.log(leaves["x"]))

    assert nx.check_gradients(build, {"x": x})["x"] < 1e-8
    with nx.perturbed_gradient("log", 1.01):
        assert nx.check_gradients(build, {"x": x})["x"] > 1e-3


# -- properties --------------------------------------------------------------------

@given(small_matrix())
def test_matmul_with_identity_is_exact(A):
    t = nx.Tape()
    out = nx.matmul(_mat(t, A), _mat(t, np.eye(A.shape[1])))
    assert np.array_equal(out.value, A)


@given(small_matrix())
def test_sigmoid_stays_inside_clip(A):
    v = nx.sigmoid(nx.Tape().const(A)).value
    assert np.all(v >= nx.EPS_CLIP) and np.all(v <= 1.0 - nx.EPS_CLIP)


@given(small_matrix(), st.integers(0, 2 ** 31 - 1))
def test_backward_is_bitwise_deterministic(A, seed):
    R = np.random.default_rng(seed).normal(size=A.shape)

    def run():
        t = nx.Tape()
        x = t.leaf(A, "x")
        y = nx.sum_(nx.mul(nx.sigmoid(nx.mul(x, t.const(R))), nx.relu(x)))
        return t.backward(y)["x"]

    assert np.array_equal(run(), run())


@given(small_matrix(), st.integers(0, 2 ** 31 - 1))
def test_elementwise_chain_passes_gradcheck(A, seed):
    A = np.clip(A, -5, 5) / 2.0
    R = np.random.default_rng(seed).normal(size=A.shape)

    def build(t, leaves):
        x = leaves["x"]
        return nx.sum_(nx.mul(t.const(R), nx.mul(nx.sigmoid(x), nx.exp(nx.scale(x, 0.3)))))

    assert nx.check_gradients(build, {"x": A})["x"] < 1e-4
