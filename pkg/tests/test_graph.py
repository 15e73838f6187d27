import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfsm import numerics as nx
from cfsm.errors import ContractError, DataError, DimensionError
from cfsm.graph import (GraphSpec, Laplacian, batch_laplacian, build_similarity_graph, graph_loss,
                        laplacian, median_bandwidth, pairwise_distances)
from cfsm.model import ArchSpec, forward, init_params


def _loss(F, lap, **kw):
    return graph_loss(nx.Tape().const(F), lap, **kw).item()


def _energy(F, W):
    n = len(F)
    return 0.5 * sum(W[i, j] * float(np.sum((F[i] - F[j]) ** 2)) for i in range(n) for j in range(n))


# -- similarity graph --------------------------------------------------------------

def test_identical_rows_get_unit_weight():
    W = build_similarity_graph(np.array([[0.3, 0.7], [0.3, 0.7]]), GraphSpec(k=1))
    assert W[0, 1] == W[1, 0] == 1.0


def test_far_rows_decay_to_zero():
    W = build_similarity_graph(np.array([[0.0], [1e4]]), GraphSpec(k=1, sigma=1.0))
    assert W[0, 1] == 0.0


def test_points_on_a_line_hand_example():
    W = build_similarity_graph(np.array([[0.0], [1.0], [3.0]]), GraphSpec(k=1, sigma=1.0))
    assert W[0, 1] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert W[1, 2] == pytest.approx(math.exp(-2.0), abs=1e-15)
    assert W[0, 2] == 0.0
    np.testing.assert_array_equal(W, W.T)


def test_degenerate_batches_rejected():
    with pytest.raises(DataError):
        build_similarity_graph(np.zeros((1, 3)), GraphSpec(k=1))
    with pytest.raises(ContractError):
        build_similarity_graph(np.zeros((3, 3)), GraphSpec(k=3))


def test_spec_validation():
    with pytest.raises(ContractError):
        GraphSpec(k=0)
    with pytest.raises(ContractError):
        GraphSpec(sigma=0.0)
    with pytest.raises(ContractError):
        GraphSpec(symmetrize=False)


def test_k_is_clamped_per_batch():
    assert GraphSpec(k=8).for_batch(5).k == 4
    assert GraphSpec(k=3).for_batch(5).k == 3
    assert batch_laplacian(np.random.default_rng(0).random((4, 2)), GraphSpec(k=8)).n == 4


def test_median_bandwidth():
    D = pairwise_distances(np.array([[0.0], [1.0], [3.0]]))
    assert median_bandwidth(D) == 2.0
    assert median_bandwidth(np.zeros((3, 3))) == 1.0


# -- Laplacian ------------------------------------------------------------------------

def test_empty_graph_has_zero_laplacian():
    assert np.array_equal(laplacian(np.zeros((3, 3))).L, np.zeros((3, 3)))


def test_two_node_laplacian():
    L = laplacian(np.array([[0.0, 1.0], [1.0, 0.0]])).L
    assert L.tolist() == [[1.0, -1.0], [-1.0, 1.0]]


def test_random_three_node_rows_sum_to_zero(rng):
    W = rng.random((3, 3))
    W = np.triu(W, 1) + np.triu(W, 1).T
    assert np.max(np.abs(laplacian(W).L.sum(axis=1))) < 1e-12


def test_invalid_weights_rejected():
    with pytest.raises(ContractError):
        laplacian(np.array([[0.0, 1.0], [0.5, 0.0]]))
    with pytest.raises(ContractError):
        laplacian(np.array([[0.0, -1.0], [-1.0, 0.0]]))
    with pytest.raises(DimensionError):
        laplacian(np.zeros((2, 3)))


def test_normalized_laplacian_has_unit_diagonal(rng):
    lap = batch_laplacian(rng.random((6, 3)), GraphSpec(k=2, normalized=True))
    assert lap.normalized
    np.testing.assert_allclose(np.diag(lap.L), 1.0)
    assert np.min(np.linalg.eigvalsh(lap.L)) > -1e-10


# -- graph loss -----------------------------------------------------------------------

def test_constant_features_have_zero_loss(rng):
    lap = batch_laplacian(rng.random((5, 3)), GraphSpec(k=2))
    assert abs(_loss(np.tile(rng.normal(size=(1, 4)), (5, 1)), lap)) < 1e-10


def test_zero_laplacian_gives_zero_loss(rng):
    assert _loss(rng.normal(size=(3, 2)), laplacian(np.zeros((3, 3)))) == 0.0


def test_two_node_hand_example():
    lap = laplacian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert _loss(np.array([[1.0, 0.0], [0.0, 0.0]]), lap) == pytest.approx(1.0, abs=1e-15)


def test_graph_loss_row_mismatch():
    lap = laplacian(np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        _loss(np.zeros((4, 2)), lap)


def test_normalize_by_n_divides(rng):
    F = rng.normal(size=(6, 3))
    lap = batch_laplacian(rng.random((6, 2)), GraphSpec(k=2))
    assert _loss(F, lap, normalize_by_n=True) == pytest.approx(_loss(F, lap) / 6, rel=1e-14)


def test_graph_gradient_reaches_features_only():
    """The Laplacian is a constant, so the F_C side of the graph term gets no gradient."""
    arch = ArchSpec(input_dim=4, hidden=(5,), feature_dim=3, cfs_dim=2, source_classes=2)
    params = init_params(arch, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 4))
    fw = forward(params, x)
    lap = batch_laplacian(fw.F_C.value, GraphSpec(k=2))
    grads = fw.tape.backward(graph_loss(fw.F, lap))
    assert np.all(grads["C.W"] == 0) and np.all(grads["C.b"] == 0)
    assert np.any(grads["M0.W"] != 0)
    # a different F_C gives a different graph and a different loss value
    other = batch_laplacian(fw.F_C.value[::-1] ** 3, GraphSpec(k=2))
    assert graph_loss(fw.F, other).item() != graph_loss(fw.F, lap).item()


# -- properties -----------------------------------------------------------------------

graph_case = st.tuples(st.integers(2, 32), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))


def _random_case(n, d, seed):
    rng = np.random.default_rng(seed)
    F_C = rng.random((n, d))
    k = int(rng.integers(1, n))
    return rng, batch_laplacian(F_C, GraphSpec(k=k)), rng.normal(size=(n, int(rng.integers(1, 5))))


@given(graph_case)
def test_energy_identity(case):
    _, lap, F = _random_case(*case)
    assert abs(_loss(F, lap) - _energy(F, lap.W)) < 1e-9


@given(graph_case)
def test_laplacian_invariants(case):
    rng, lap, _ = _random_case(*case)
    W = lap.W
    assert np.array_equal(W, W.T)
    assert np.all(np.diag(W) == 0) and np.all(W >= 0) and np.all(W <= 1)
    assert np.max(np.abs(lap.L.sum(axis=1))) < 1e-10
    x = rng.normal(size=lap.n)
    assert x @ lap.L @ x >= -1e-10


@given(graph_case)
def test_graph_loss_nonnegative(case):
    _, lap, F = _random_case(*case)
    assert _loss(F, lap) >= -1e-10


@given(graph_case)
def test_permutation_equivariance(case):
    rng, _, F = _random_case(*case)
    n = len(F)
    F_C = rng.random((n, 3))
    spec = GraphSpec(k=max(1, n // 3))
    perm = rng.permutation(n)
    lap = batch_laplacian(F_C, spec)
    lap_p = batch_laplacian(F_C[perm], spec)
    np.testing.assert_allclose(lap_p.W, lap.W[np.ix_(perm, perm)], atol=1e-15)
    assert abs(_loss(F[perm], lap_p) - _loss(F, lap)) < 1e-10
