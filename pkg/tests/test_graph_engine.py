import math

import numpy as np
import pytest

from graph_engine import (
    ConnectivityKind, ConnectivityProvider, ConnectivitySpec, GraphError, MixingConstantError, RegularGraphSampler,
    _pairing_attempt, _switch_repair, alon_friedman_limit, build_matrix, circulant_mixing_constant,
    complete_matrix, dump_edge_list, from_dense, load_edge_list,
    local_exchange_matrix, mixing_constant, random_regular_matrix, random_rows_matrix,
)
from rng_streams import StreamFactory, StreamPurpose


def _second_largest_abs_eigenvalue(dense: np.ndarray) -> float:
    return float(np.sort(np.abs(np.linalg.eigvalsh(dense)))[-2])


def _assert_simple_regular(matrix, n: int, c: int) -> None:
    assert matrix.columns.shape == (n, c)
    for i in range(n):
        row = matrix.columns[i]
        assert i not in row
        assert len(set(row.tolist())) == c
    dense = matrix.to_dense()
    np.testing.assert_array_equal(dense, dense.T)
    matrix.check_invariants()


# ==================== Matrices ====================

def test_complete_matrix_is_uniform() -> None:
    matrix = complete_matrix(2)
    np.testing.assert_array_equal(matrix.to_dense(), [[0.5, 0.5], [0.5, 0.5]])
    assert matrix.bi_stochastic and matrix.symmetric and matrix.is_complete
    assert matrix.row_width == 2
    np.testing.assert_array_equal(complete_matrix(1).to_dense(), [[1.0]])
    with pytest.raises(GraphError):
        complete_matrix(0)


def test_regular_graph_on_four_vertices_is_complete_graph() -> None:
    matrix = random_regular_matrix(4, 3, np.random.default_rng(0))
    expected = (np.ones((4, 4)) - np.eye(4)) / 3.0
    np.testing.assert_allclose(matrix.to_dense(), expected)


@pytest.mark.parametrize('n, c', [(200, 5), (200, 10), (51, 4)])
def test_random_regular_graph_is_simple_and_regular(n, c) -> None:
    matrix = random_regular_matrix(n, c, np.random.default_rng(n + c))
    _assert_simple_regular(matrix, n, c)
    assert matrix.bi_stochastic and matrix.symmetric


def test_edge_switching_repairs_a_pairing() -> None:
    rng = np.random.default_rng(5)
    pairs, simple = _pairing_attempt(100, 10, rng)
    assert not simple
    edges = _switch_repair(pairs, rng, budget=10 ** 5)
    degrees = np.bincount(edges.ravel(), minlength=100)
    assert np.all(degrees == 10)
    assert np.all(edges[:, 0] != edges[:, 1])
    assert len({tuple(edge) for edge in edges.tolist()}) == edges.shape[0]


def test_sampler_falls_back_to_switching(monkeypatch) -> None:
    monkeypatch.setattr(RegularGraphSampler, 'MAX_RESTARTS', 1)
    matrix = RegularGraphSampler.sample(100, 10, np.random.default_rng(2))
    _assert_simple_regular(matrix, 100, 10)


@pytest.mark.parametrize('n, c', [(5, 3), (10, 10), (10, 12), (10, 2)])
def test_infeasible_regular_graphs_are_rejected(n, c) -> None:
    with pytest.raises(GraphError):
        random_regular_matrix(n, c, np.random.default_rng(0))


def test_local_exchange_structure() -> None:
    np.testing.assert_allclose(local_exchange_matrix(5, 5).to_dense(), np.full((5, 5), 0.2))
    np.testing.assert_array_equal(local_exchange_matrix(3, 1).to_dense(), np.eye(3))
    matrix = local_exchange_matrix(7, 3)
    assert matrix.row(0) == [(0, 1 / 3), (1, 1 / 3), (6, 1 / 3)]
    matrix.check_invariants()
    even = local_exchange_matrix(10, 4)
    assert even.row_width == 5
    np.testing.assert_array_equal(even.columns[0], [0, 1, 2, 8, 9])
    even.check_invariants()
    with pytest.raises(GraphError):
        local_exchange_matrix(3, 5)
    with pytest.raises(GraphError):
        local_exchange_matrix(4, 4)


def test_random_rows_with_full_width() -> None:
    for seed in (0, 1):
        matrix = random_rows_matrix(5, 5, np.random.default_rng(seed))
        for row in matrix.columns:
            np.testing.assert_array_equal(row, np.arange(5))


@pytest.mark.parametrize('n, c', [(12, 3), (10, 5)])
def test_random_rows_entry_moments(n, c) -> None:
    rng = np.random.default_rng(17)
    draws = 20_000
    single = np.empty(draws)
    pair = np.empty(draws)
    for d in range(draws):
        row = random_rows_matrix(n, c, rng).columns[0]
        single[d] = (1 in row) / c
        pair[d] = ((1 in row) and (2 in row)) / c ** 2
        assert len(set(row.tolist())) == c
    p = c / n
    se_single = math.sqrt(p * (1 - p) / draws) / c
    assert abs(single.mean() - 1.0 / n) < 4 * se_single
    expected_pair = (c - 1) / (c * n * (n - 1))
    q = c * (c - 1) / (n * (n - 1))
    se_pair = math.sqrt(q * (1 - q) / draws) / c ** 2
    assert abs(pair.mean() - expected_pair) < 4 * se_pair


def test_from_dense_rejects_non_stochastic_rows() -> None:
    with pytest.raises(GraphError):
        from_dense(np.array([[0.5, 0.2], [0.5, 0.5]]))
    with pytest.raises(GraphError):
        from_dense(np.array([[1.0, 0.0], [0.5, 0.5]]))


# ==================== Mixing constant ====================

def test_mixing_constant_of_complete_matrix_is_zero() -> None:
    assert mixing_constant(complete_matrix(100)) <= 1e-8
    assert mixing_constant(complete_matrix(1)) == 0.0


def test_mixing_constant_of_identity_is_one() -> None:
    assert mixing_constant(np.eye(10)) == pytest.approx(1.0, abs=1e-8)
    assert mixing_constant(from_dense(np.eye(10))) == pytest.approx(1.0, abs=1e-8)
    assert mixing_constant(np.eye(10), method='power') == pytest.approx(1.0, abs=1e-8)
    assert mixing_constant(complete_matrix(100), method='power') == 0.0


def test_mixing_constant_of_two_by_two() -> None:
    alpha = np.array([[0.7, 0.3], [0.3, 0.7]])
    assert mixing_constant(alpha) == pytest.approx(0.4, abs=1e-8)
    assert mixing_constant(alpha, method='power') == pytest.approx(0.4, abs=1e-8)


def test_mixing_constant_of_complete_graph_k4() -> None:
    matrix = random_regular_matrix(4, 3, np.random.default_rng(1))
    assert mixing_constant(matrix) == pytest.approx(1.0 / 3.0, abs=1e-8)


def test_symmetric_mixing_constant_is_second_eigenvalue() -> None:
    matrix = random_regular_matrix(60, 4, np.random.default_rng(8))
    dense = matrix.to_dense()
    expected = _second_largest_abs_eigenvalue(dense)
    assert mixing_constant(matrix, method='lanczos') == pytest.approx(expected, abs=1e-8)
    assert mixing_constant(matrix, method='power') == pytest.approx(expected, abs=1e-8)


def test_mixing_constant_is_permutation_invariant() -> None:
    dense = random_regular_matrix(60, 4, np.random.default_rng(9)).to_dense()
    perm = np.random.default_rng(10).permutation(60)
    permuted = dense[perm][:, perm]
    assert mixing_constant(permuted, method='lanczos') == pytest.approx(
        mixing_constant(dense, method='lanczos'), abs=1e-9)


def test_mixing_constant_bounds_weight_norm() -> None:
    rng = np.random.default_rng(4)
    for matrix in (random_regular_matrix(100, 5, rng), local_exchange_matrix(100, 5)):
        lam = mixing_constant(matrix, method='lanczos')
        alpha = matrix.to_sparse()
        for w in rng.dirichlet(np.full(100, 0.3), size=1000):
            mixed = alpha @ w
            bound = (1 - lam ** 2) / 100 + lam ** 2 * float(w @ w)
            assert float(mixed @ mixed) <= bound + 1e-9


def test_local_exchange_matches_circulant_spectrum() -> None:
    values = []
    for n in (100, 500, 2000):
        lam = mixing_constant(local_exchange_matrix(n, 5), method='lanczos')
        assert lam == pytest.approx(circulant_mixing_constant(n, 5), abs=1e-8)
        values.append(lam)
    assert values[0] < values[1] < values[2]
    assert values[2] > 0.99
    dense = local_exchange_matrix(11, 3).to_dense()
    assert circulant_mixing_constant(11, 3) == pytest.approx(_second_largest_abs_eigenvalue(dense), abs=1e-12)
    dense = local_exchange_matrix(12, 4).to_dense()
    assert circulant_mixing_constant(12, 4) == pytest.approx(_second_largest_abs_eigenvalue(dense), abs=1e-12)


def test_default_method_matches_circulant_spectrum_on_large_ring() -> None:
    assert mixing_constant(local_exchange_matrix(2000, 5)) == pytest.approx(
        circulant_mixing_constant(2000, 5), abs=1e-8)


@pytest.mark.parametrize('n', [100, 500])
def test_power_iteration_on_local_exchange(n) -> None:
    lam = mixing_constant(local_exchange_matrix(n, 5), method='power')
    assert lam == pytest.approx(circulant_mixing_constant(n, 5), abs=1e-9)


def test_power_iteration_reports_non_convergence() -> None:
    with pytest.raises(MixingConstantError) as excinfo:
        mixing_constant(local_exchange_matrix(2000, 5), method='power', max_iter=50)
    error = excinfo.value
    assert error.residual > 1e-10 * error.estimate ** 2
    assert 0.0 < error.estimate < 1.0
    assert error.last_iterate.shape == (2000,)


def test_unknown_mixing_method() -> None:
    with pytest.raises(ValueError):
        mixing_constant(np.eye(4), method='qr')


def test_reference_limits() -> None:
    assert alon_friedman_limit(5) == pytest.approx(0.8)
    assert alon_friedman_limit(10) == pytest.approx(0.6)
    assert alon_friedman_limit(20) == pytest.approx(0.43589, abs=1e-5)


# ==================== Specs and providers ====================

def test_spec_round_trip_and_errors() -> None:
    data = {'kind': 'fixed-regular', 'C': 10, 'graph_seed': 42}
    spec = ConnectivitySpec.from_dict(data)
    assert spec.to_dict() == data
    with pytest.raises(GraphError):
        ConnectivitySpec.from_dict({'kind': 'ring'})
    with pytest.raises(GraphError):
        ConnectivitySpec.from_dict({'kind': 'complete', 'width': 3})


@pytest.mark.parametrize('data', [
    {'kind': 'fixed-regular', 'C': '10'},
    {'kind': 'fixed-regular', 'C': 10.0},
    {'kind': 'fixed-regular', 'C': True},
    {'kind': 'fixed-regular', 'C': 10, 'graph_seed': 'seven'},
    {'kind': 'fixed-regular', 'C': 10, 'graph_seed': -1},
])
def test_spec_rejects_non_integer_fields(data) -> None:
    with pytest.raises(GraphError, match='C|graph_seed'):
        ConnectivitySpec.from_dict(data)


def test_feasibility_messages_name_the_pair() -> None:
    errors = ConnectivitySpec(ConnectivityKind.FIXED_REGULAR, C=101).feasibility_errors(100)
    assert any('N=100, C=101' in error for error in errors)
    assert ConnectivitySpec(ConnectivityKind.COMPLETE).feasibility_errors(100) == []
    assert ConnectivitySpec(ConnectivityKind.LOCAL_EXCHANGE, C=20).feasibility_errors(100) == []
    assert ConnectivitySpec(ConnectivityKind.LOCAL_EXCHANGE, C=4).feasibility_errors(4)
    with pytest.raises(GraphError):
        ConnectivitySpec(ConnectivityKind.PER_STEP_RANDOM_ROWS, C=0).validate(10)


def test_graph_seed_fixes_the_graph() -> None:
    spec = ConnectivitySpec(ConnectivityKind.FIXED_REGULAR, C=4, graph_seed=42)
    first = build_matrix(spec, 30)
    second = build_matrix(spec, 30)
    np.testing.assert_array_equal(first.columns, second.columns)


def test_provider_fixed_and_per_step() -> None:
    fixed = ConnectivityProvider(ConnectivitySpec(ConnectivityKind.FIXED_REGULAR, C=4), 30, StreamFactory(3))
    assert fixed.matrix_for_step(1) is fixed.matrix_for_step(7)

    spec = ConnectivitySpec(ConnectivityKind.PER_STEP_RANDOM_ROWS, C=3)
    provider = ConnectivityProvider(spec, 30, StreamFactory(3))
    again = ConnectivityProvider(spec, 30, StreamFactory(3))
    assert provider.fixed_matrix is None
    assert not np.array_equal(provider.matrix_for_step(1).columns, provider.matrix_for_step(2).columns)
    np.testing.assert_array_equal(provider.matrix_for_step(2).columns, again.matrix_for_step(2).columns)
    with pytest.raises(GraphError):
        provider.matrix_for_step(0)


def test_fixed_graph_differs_across_replicates() -> None:
    spec = ConnectivitySpec(ConnectivityKind.FIXED_REGULAR, C=4)
    first = ConnectivityProvider(spec, 30, StreamFactory(3, 0)).fixed_matrix
    second = ConnectivityProvider(spec, 30, StreamFactory(3, 1)).fixed_matrix
    assert not np.array_equal(first.columns, second.columns)


def test_edge_list_round_trip(tmp_path) -> None:
    matrix = random_regular_matrix(40, 6, np.random.default_rng(12))
    path = tmp_path / 'graph.txt'
    dump_edge_list(matrix, path)
    assert len(path.read_text().splitlines()) == 40 * 6 // 2
    loaded = load_edge_list(path, 40)
    np.testing.assert_array_equal(loaded.columns, matrix.columns)
    with pytest.raises(GraphError):
        dump_edge_list(complete_matrix(4), tmp_path / 'complete.txt')


# ==================== Large graphs ====================

@pytest.mark.slow
@pytest.mark.parametrize('c', [5, 10, 20])
def test_random_regular_graphs_approach_alon_friedman(c) -> None:
    values = []
    for graph in range(20):
        rng = StreamFactory(0, graph).stream(0, StreamPurpose.GRAPH)
        values.append(mixing_constant(random_regular_matrix(2000, c, rng), method='lanczos'))
    assert abs(float(np.median(values)) - alon_friedman_limit(c)) <= 0.05
