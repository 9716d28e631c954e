import json
import math

import numpy as np
import pytest

from model_manager import make_builtin
from oracle_engine import OracleEngine, OracleError, QuadratureGrid, brute_force_gamma
from smc_engine import TEST_FUNCTIONS

ONE = TEST_FUNCTIONS['one']
STATE1 = TEST_FUNCTIONS['state1']


def test_two_state_first_step(two_state) -> None:
    engine = OracleEngine(two_state, C=2)
    state = engine.run(1)[1]
    assert state.Z == 1.5
    np.testing.assert_allclose(state.pi, [13 / 30, 17 / 30], atol=1e-12)
    assert engine.integrate(state.mu, ONE) == pytest.approx(2.375, abs=1e-12)


def test_constant_potential_gives_markov_marginals() -> None:
    model = make_builtin('two-state', {'potential': [1.0, 1.0], 'T': 4})
    states = OracleEngine(model).run()
    kernel = np.array([[0.9, 0.1], [0.2, 0.8]])
    marginal = np.array([0.5, 0.5])
    for state in states:
        assert state.Z == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(state.pi, marginal, atol=1e-12)
        marginal = marginal @ kernel


def test_identity_kernel_reweights_initial_law() -> None:
    model = make_builtin('two-state', {'transition': [[1.0, 0.0], [0.0, 1.0]], 'T': 1})
    state = OracleEngine(model).run()[1]
    np.testing.assert_allclose(state.pi, [1 / 3, 2 / 3], atol=1e-12)


def test_filter_probabilities_sum_to_one(two_state) -> None:
    for state in OracleEngine(two_state, C=3).run():
        assert state.pi.sum() == pytest.approx(1.0, abs=1e-10)
        assert state.Z > 0
        assert float(state.mu.sum()) >= state.Z ** 2 * (3 - 1) / 3 - 1e-12


def test_large_connectivity_approaches_bootstrap_limit(two_state) -> None:
    large = OracleEngine(two_state, C=1e9).run()
    limit = OracleEngine(two_state).run()
    for finite, exact in zip(large, limit):
        np.testing.assert_allclose(finite.mu, exact.mu, rtol=1e-6)


def test_unit_connectivity_is_pure_second_moment_chain(two_state) -> None:
    engine = OracleEngine(two_state, C=1)
    state = engine.run(1)[1]
    assert engine.integrate(state.mu, ONE) == pytest.approx(2.5, abs=1e-12)


def test_mu_is_linear_in_inverse_connectivity(two_state) -> None:
    def mu_one(c):
        engine = OracleEngine(two_state, C=c)
        return engine.integrate(engine.run(1)[1].mu, STATE1)

    assert mu_one(2) - mu_one(4) == pytest.approx(2 * (mu_one(4) - mu_one(8)), abs=1e-12)


def test_initial_variances(two_state) -> None:
    state = OracleEngine(two_state, ['one', 'state1']).run(0)[0]
    assert state.V_gamma['one'] == 0.0
    assert state.V_gamma['state1'] == pytest.approx(0.25)
    assert state.V_pi['state1'] == pytest.approx(0.25)


def test_normalised_variance_relation(two_state) -> None:
    engine = OracleEngine(two_state, ['one', 'state1'], C=2)
    states = engine.run()
    for state in states[1:]:
        assert state.V_pi['one'] == pytest.approx(0.0, abs=1e-12)
        assert state.V_gamma['one'] > 0
        psi = engine.values(STATE1) - engine.integrate(state.pi, STATE1)
        expected = engine._variance_gamma(state.t, psi) / state.Z ** 2
        assert state.V_pi['state1'] == pytest.approx(expected, rel=1e-10)


def test_variances_of_other_test_functions_need_registration(two_state) -> None:
    with pytest.raises(OracleError):
        OracleEngine(two_state, ['cube'])
    engine = OracleEngine(two_state, ['state1'])
    with pytest.raises(OracleError):
        engine.clt_variance_step(1, STATE1)


def test_brute_force_examples(two_state) -> None:
    assert brute_force_gamma(two_state, 1) == pytest.approx(1.5, abs=1e-12)
    assert brute_force_gamma(two_state, 0, 'state1') == pytest.approx(0.5, abs=1e-12)
    z3 = OracleEngine(two_state).run(3)[3].Z
    assert brute_force_gamma(two_state, 3) == pytest.approx(z3, rel=1e-12)


@pytest.mark.parametrize('params', [
    {},
    {'transition': [[0.5, 0.5], [0.3, 0.7]], 'potential': [0.4, 3.0]},
    {'initial': [0.9, 0.1], 'potential': [2.0, 0.5]},
])
def test_brute_force_agrees_with_recursion(params) -> None:
    model = make_builtin('two-state', {'T': 8, **params})
    engine = OracleEngine(model, ['one', 'state1'])
    states = engine.run()
    for T in range(9):
        state = states[T]
        for phi in (ONE, STATE1):
            recursion = state.Z * engine.integrate(state.pi, phi)
            assert brute_force_gamma(model, T, phi) == pytest.approx(recursion, rel=1e-12)


def test_brute_force_limits(two_state, tail_model) -> None:
    with pytest.raises(OracleError):
        brute_force_gamma(make_builtin('two-state', {'T': 30}), 30)
    with pytest.raises(OracleError):
        brute_force_gamma(tail_model, 1)
    with pytest.raises(OracleError):
        brute_force_gamma(two_state, 11)


def test_models_without_exact_representation(ar1_model) -> None:
    with pytest.raises(OracleError):
        OracleEngine(ar1_model)
    with pytest.raises(OracleError):
        OracleEngine(make_builtin('two-state'), C=0.5)


def test_run_rejects_horizon_overflow(two_state) -> None:
    with pytest.raises(OracleError):
        OracleEngine(two_state).run(11)


def test_quadrature_captures_initial_mass(tail_model) -> None:
    engine = OracleEngine(tail_model, ['tail'])
    assert engine.initial.sum() >= 1 - 1e-14
    assert engine.grid.edges[0] == -8.0 and engine.grid.edges[-1] == 8.0


def test_tail_example_variance_ratio(tail_model) -> None:
    def v_gamma(c, grid=None):
        return OracleEngine(tail_model, ['tail'], C=c, grid=grid).run()[1].V_gamma['tail']

    bootstrap = v_gamma(math.inf)
    ratio = v_gamma(2) / bootstrap
    assert 0.4 < ratio < 0.7
    assert ratio == pytest.approx(0.508, abs=0.005)
    assert bootstrap == pytest.approx(0.2571, rel=1e-3)

    fine = QuadratureGrid(cells=40000)
    assert v_gamma(2, fine) == pytest.approx(v_gamma(2), rel=1e-3)
    assert v_gamma(math.inf, fine) == pytest.approx(bootstrap, rel=1e-3)


def test_export_records(two_state, tmp_path) -> None:
    path = tmp_path / 'oracle.json'
    engine = OracleEngine(two_state, ['one', 'state1'], C=2)
    engine.run(1)
    records = engine.export_records(path)
    assert json.loads(path.read_text(encoding='utf-8')) == records
    first = records[0]
    assert set(first) == {'model', 'T', 'C', 'phi', 'Z', 'pi', 'mu', 'V_gamma', 'V_pi'}
    assert (first['model'], first['T'], first['C'], first['phi']) == ('two-state', 1, 2, 'one')
    assert first['Z'] == 1.5 and first['mu'] == pytest.approx(2.375)
    assert OracleEngine(two_state).export_records()[0]['C'] == 'inf'
