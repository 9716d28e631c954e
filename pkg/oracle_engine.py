"""
Exact Oracle Engine
Exact filtering, mu-measure flow and CLT asymptotic variances for small models
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from model_manager import HmmModel, StateKind
from smc_engine import TestFunction, get_test_functions

logger = logging.getLogger(__name__)


class OracleError(ValueError):
    """Model or request outside oracle scope"""


@dataclass
class OracleState:
    """
    Exact quantities at time t on the model's finite representation.

    pi and mu are masses on the support (states, or grid cells for
    continuous models); mu is a non-negative measure, not a probability.
    """
    t: int
    pi: np.ndarray
    Z: float
    mu: np.ndarray
    C: float
    V_gamma: Dict[str, float] = field(default_factory=dict)
    V_pi: Dict[str, float] = field(default_factory=dict)


class QuadratureGrid:
    """Trapezoid cells of equal width on [lower, upper]; values taken at cell midpoints"""

    def __init__(self, lower: float = -8.0, upper: float = 8.0, cells: int = 20000):
        self.lower = lower
        self.upper = upper
        self.cells = cells
        self.edges = np.linspace(lower, upper, cells + 1)
        self.nodes = 0.5 * (self.edges[:-1] + self.edges[1:])

    def masses(self, density) -> np.ndarray:
        values = density(self.edges)
        return 0.5 * (values[:-1] + values[1:]) * np.diff(self.edges)


class OracleEngine:
    """
    Exact recursions for discrete models and identity-kernel 1-d models

    Args:
        model: Discrete model with exact arrays, or a continuous model with an
            identity kernel and an initial density
        test_functions: Names of registered test functions
        C: Connectivity of the mu recursion; math.inf gives the bootstrap limit
        grid: Quadrature grid for continuous models
    """

    MAX_PATHS = 10 ** 7

    def __init__(self, model: HmmModel, test_functions: Sequence[str] = ('one',), C: float = math.inf,
                 grid: Optional[QuadratureGrid] = None):
        if not C >= 1:
            raise OracleError(f"Connectivity C must be >= 1, got {C}")
        try:
            self.test_functions: List[TestFunction] = get_test_functions(test_functions)
        except ValueError as e:
            raise OracleError(str(e))
        self.model = model
        self.C = C

        if model.exact is not None:
            self.support = np.arange(model.exact.n_states)
            self.initial = np.asarray(model.exact.initial, dtype=float)
            self.grid = None
        elif model.kernel_is_identity and model.initial_density is not None:
            self.grid = grid or QuadratureGrid()
            self.support = self.grid.nodes
            self.initial = self.grid.masses(model.initial_density)
        else:
            raise OracleError(f"Model '{model.tag}' has no exact representation")

        self.states: List[OracleState] = []

    # ==================== Operators ====================

    def potential(self, t: int) -> np.ndarray:
        if self.model.exact is not None:
            return np.asarray(self.model.exact.potentials[t], dtype=float)
        return np.asarray(self.model.potential(t, self.support), dtype=float)

    def apply_kernel(self, t: int, f: np.ndarray) -> np.ndarray:
        """(K_t f)(x) = sum_y K_t(x, y) f(y)"""
        if self.model.exact is None:
            return f
        return self.model.exact.transitions[t - 1] @ f

    def push_forward(self, t: int, masses: np.ndarray) -> np.ndarray:
        """Measure transported by K_t"""
        if self.model.exact is None:
            return masses
        return self.model.exact.transitions[t - 1].T @ masses

    def apply_q(self, t: int, f: np.ndarray) -> np.ndarray:
        """Q_t f = g_{t-1} (K_t f)"""
        return self.potential(t - 1) * self.apply_kernel(t, f)

    def values(self, phi: TestFunction) -> np.ndarray:
        return phi(self.support)

    # ==================== Recursions ====================

    def initial_state(self) -> OracleState:
        return OracleState(t=0, pi=self.initial.copy(), Z=1.0, mu=self.initial.copy(), C=self.C)

    def exact_filter_step(self, state: OracleState, t: int) -> OracleState:
        """pi_t = K_t^T (g_{t-1} pi_{t-1}) / pi_{t-1}(g_{t-1}), Z_t = Z_{t-1} pi_{t-1}(g_{t-1})"""
        if t != state.t + 1 or t > self.model.horizon:
            raise OracleError(f"Cannot step from t={state.t} to t={t} (horizon {self.model.horizon})")
        weighted = self.potential(t - 1) * state.pi
        mass = float(weighted.sum())
        if mass <= 0:
            raise OracleError(f"Non-positive normaliser pi_{t - 1}(g_{t - 1}) = {mass}")
        return OracleState(t=t, pi=self.push_forward(t, weighted) / mass, Z=state.Z * mass,
                           mu=state.mu, C=self.C)

    def mu_step(self, previous: OracleState, state: OracleState) -> OracleState:
        """mu_t = (1/C) K_t^T (g_{t-1}^2 mu_{t-1}) + ((C - 1)/C) Z_t^2 pi_t"""
        t = state.t
        if math.isinf(self.C):
            state.mu = state.Z ** 2 * state.pi
            return state
        g = self.potential(t - 1)
        carried = self.push_forward(t, g ** 2 * previous.mu) / self.C
        state.mu = carried + (self.C - 1.0) / self.C * state.Z ** 2 * state.pi
        return state

    def clt_variance_step(self, t: int, phi: TestFunction) -> tuple:
        """
        (V^gamma_t(phi), V^pi_t(phi)) from the recursions unrolled down to t = 0

        V^gamma_t(phi) = V^gamma_{t-1}(Q_t phi) + mu_t(phi^2) - Z_t^2 pi_t(phi)^2
        V^pi_t(phi) = V^pi_{t-1}(Q_t psi) / pi_{t-1}(g_{t-1})^2 + mu_t(psi^2) / Z_t^2,
        psi = phi - pi_t(phi)
        """
        if t >= len(self.states):
            raise OracleError(f"Oracle history does not reach t={t}; call run() first")
        return self._variance_gamma(t, self.values(phi)), self._variance_pi(t, self.values(phi))

    def _variance_gamma(self, t: int, f: np.ndarray) -> float:
        total = 0.0
        for s in range(t, 0, -1):
            state = self.states[s]
            total += float(state.mu @ f ** 2) - state.Z ** 2 * float(state.pi @ f) ** 2
            f = self.apply_q(s, f)
        return total + _variance(self.states[0].pi, f)

    def _variance_pi(self, t: int, f: np.ndarray) -> float:
        total, scale = 0.0, 1.0
        for s in range(t, 0, -1):
            state = self.states[s]
            psi = f - float(state.pi @ f)
            total += scale * float(state.mu @ psi ** 2) / state.Z ** 2
            f = self.apply_q(s, psi)
            scale /= float(self.states[s - 1].pi @ self.potential(s - 1)) ** 2
        return total + scale * _variance(self.states[0].pi, f)

    def run(self, T: Optional[int] = None) -> List[OracleState]:
        """States for t = 0..T with variances of every registered test function"""
        T = self.model.horizon if T is None else T
        if not 0 <= T <= self.model.horizon:
            raise OracleError(f"T={T} outside [0, {self.model.horizon}]")
        state = self.initial_state()
        self.states = [state]
        for t in range(1, T + 1):
            previous, state = state, self.exact_filter_step(state, t)
            self.states.append(self.mu_step(previous, state))
        for state in self.states:
            for phi in self.test_functions:
                state.V_gamma[phi.name], state.V_pi[phi.name] = self.clt_variance_step(state.t, phi)
        logger.debug("Oracle for '%s' computed up to T=%d with C=%s", self.model.tag, T, self.C)
        return self.states

    def integrate(self, masses: np.ndarray, phi: TestFunction) -> float:
        return float(masses @ self.values(phi))

    def export_records(self, path: Optional[Union[str, Path]] = None) -> List[Dict[str, Any]]:
        """
        One record per test function at the final time, optionally written as JSON

        Returns:
            Records {model, T, C, phi, Z, pi, mu, V_gamma, V_pi}
        """
        if not self.states:
            self.run()
        final = self.states[-1]
        records = []
        for phi in self.test_functions:
            records.append({
                'model': self.model.tag,
                'T': final.t,
                'C': 'inf' if math.isinf(self.C) else self.C,
                'phi': phi.name,
                'Z': final.Z,
                'pi': self.integrate(final.pi, phi),
                'mu': self.integrate(final.mu, phi),
                'V_gamma': final.V_gamma[phi.name],
                'V_pi': final.V_pi[phi.name],
            })
        if path is not None:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(records, f, indent=2, ensure_ascii=False)
            logger.info("Oracle records exported to %s", path)
        return records


def _variance(masses: np.ndarray, f: np.ndarray) -> float:
    mean = float(masses @ f)
    return float(masses @ (f - mean) ** 2)


def brute_force_gamma(model: HmmModel, T: int, phi: Union[str, TestFunction] = 'one') -> float:
    """
    gamma_T(phi) = E[prod_{t<T} g_t(X_t) phi(X_T)] by summing over every state path

    Raises:
        OracleError: For non-discrete models or more than 10^7 paths
    """
    if model.state_kind is not StateKind.DISCRETE or model.exact is None:
        raise OracleError(f"Path enumeration needs a discrete model, got '{model.tag}'")
    if not 0 <= T <= model.horizon:
        raise OracleError(f"T={T} outside [0, {model.horizon}]")
    if isinstance(phi, str):
        try:
            phi = get_test_functions([phi])[0]
        except ValueError as e:
            raise OracleError(str(e))
    exact = model.exact
    n = exact.n_states
    if n ** (T + 1) > OracleEngine.MAX_PATHS:
        raise OracleError(f"Path space {n}^{T + 1} exceeds {OracleEngine.MAX_PATHS}")

    paths = np.stack(np.unravel_index(np.arange(n ** (T + 1)), (n,) * (T + 1)), axis=1)
    weights = exact.initial[paths[:, 0]].astype(float)
    for t in range(1, T + 1):
        weights = weights * exact.potentials[t - 1][paths[:, t - 1]]
        weights = weights * exact.transitions[t - 1][paths[:, t - 1], paths[:, t]]
    return float(weights @ phi(paths[:, T]))
