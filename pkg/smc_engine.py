"""
alpha-SMC Engine
Runs the alpha-SMC particle filter and its bootstrap special case
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from graph_engine import ConnectivityMatrix, ConnectivityProvider, ConnectivitySpec
from model_manager import HmmModel
from rng_streams import StreamFactory, StreamPurpose

logger = logging.getLogger(__name__)


class FilterError(RuntimeError):
    """Internal fault of the particle filter"""


@dataclass(frozen=True)
class TestFunction:
    """Named test function phi with the label used in printed output"""
    __test__ = False

    name: str
    label: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x)), dtype=float)


TEST_FUNCTIONS = {
    'one': TestFunction('one', '1', lambda x: np.ones(np.shape(x))),
    'x': TestFunction('x', 'x', lambda x: x),
    'x2': TestFunction('x2', 'x^2', lambda x: x ** 2),
    'state1': TestFunction('state1', '1{x=1}', lambda x: x == 1),
    'tail': TestFunction('tail', '1{|x|>1}', lambda x: np.abs(x) > 1.0),
}


def get_test_functions(names: Sequence[str]) -> List[TestFunction]:
    """Resolve test-function names against the registry"""
    unknown = [name for name in names if name not in TEST_FUNCTIONS]
    if unknown:
        raise ValueError(f"Unknown test functions: {unknown}. Available: {list(TEST_FUNCTIONS.keys())}")
    return [TEST_FUNCTIONS[name] for name in names]


@dataclass(frozen=True)
class ParticleSystem:
    """
    Particles X_t^i with log-weights relative to log_z_shift.

    log W_t^i = log_weights[i] + log_z_shift and max(log_weights) = 0.
    """
    t: int
    states: np.ndarray
    log_weights: np.ndarray
    log_z_shift: float

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))


@dataclass
class FilterEstimates:
    """
    Estimates of one time index.

    log_mu_hat holds log |mu_hat|; mu_hat is nan where that magnitude
    under- or overflows a float.
    """
    t: int
    log_z_hat: float
    ess_ratio: float
    sq_weight_norm: float
    pi_hat: Dict[str, float] = field(default_factory=dict)
    mu_hat: Dict[str, float] = field(default_factory=dict)
    log_mu_hat: Dict[str, float] = field(default_factory=dict)
    predictive_mean: float = math.nan

    def to_record(self, replicate: int) -> Dict[str, float]:
        record = {'replicate': replicate, 't': self.t, 'log_Z_hat': self.log_z_hat,
                  'ess_ratio': self.ess_ratio, 'predictive_mean': self.predictive_mean}
        for name, value in self.pi_hat.items():
            record[f'pi_hat_{name}'] = value
        for name, value in self.mu_hat.items():
            record[f'mu_hat_{name}'] = value
        for name, value in self.log_mu_hat.items():
            record[f'log_mu_hat_{name}'] = value
        return record


@dataclass
class FilterTrace:
    """Estimates for t = 0..T plus the final weighted particle sample"""
    rows: List[FilterEstimates]
    final: ParticleSystem

    def to_records(self, replicate: int = 0) -> List[Dict[str, float]]:
        return [row.to_record(replicate) for row in self.rows]

    @property
    def log_z_hat(self) -> np.ndarray:
        return np.array([row.log_z_hat for row in self.rows])

    @property
    def ess_ratio(self) -> np.ndarray:
        return np.array([row.ess_ratio for row in self.rows])

    @property
    def sq_weight_norm(self) -> np.ndarray:
        return np.array([row.sq_weight_norm for row in self.rows])


# ==================== Algorithm steps ====================

def init(model: HmmModel, n: int, streams: StreamFactory) -> ParticleSystem:
    """N i.i.d. draws from pi_0 with unit weights"""
    if n < 1:
        raise ValueError(f"Number of particles must be >= 1, got {n}")
    states = np.asarray(model.initial_sampler(n, streams.stream(0, StreamPurpose.INIT)))
    return ParticleSystem(t=0, states=states, log_weights=np.zeros(n), log_z_shift=0.0)


def _log_incremental(system: ParticleSystem, model: HmmModel) -> np.ndarray:
    """log(W_{t-1}^j g_{t-1}(X_{t-1}^j)) relative to the current shift"""
    with np.errstate(divide='ignore'):
        return system.log_weights + np.log(model.potential(system.t, system.states))


def _check_step(system: ParticleSystem, model: HmmModel, alpha: ConnectivityMatrix) -> None:
    if system.t >= model.horizon:
        raise FilterError(f"Cannot step past the horizon T={model.horizon}")
    if alpha.n != system.n:
        raise FilterError(f"Connectivity matrix has n={alpha.n} but the system has {system.n} particles")


def _propagate(system: ParticleSystem, model: HmmModel, ancestors: np.ndarray, new_log_weights: np.ndarray,
               streams: StreamFactory) -> ParticleSystem:
    t = system.t + 1
    if not np.all(np.isfinite(new_log_weights)):
        raise FilterError(f"Zero mixture mass at t={t}")
    states = model.transition_sampler(t, system.states[ancestors], streams.stream(t, StreamPurpose.KERNEL))
    shift = float(new_log_weights.max())
    return ParticleSystem(t=t, states=np.asarray(states), log_weights=new_log_weights - shift,
                          log_z_shift=system.log_z_shift + shift)


def bootstrap_step(system: ParticleSystem, model: HmmModel, streams: StreamFactory) -> ParticleSystem:
    """Multinomial resampling over all N particles; all new weights equal"""
    if system.t >= model.horizon:
        raise FilterError(f"Cannot step past the horizon T={model.horizon}")
    n = system.n
    log_incremental = _log_incremental(system, model)
    total = logsumexp(log_incremental)
    cdf = np.cumsum(np.exp(log_incremental - total))
    u = streams.stream(system.t + 1, StreamPurpose.ANCESTOR).random(n)
    ancestors = np.minimum(np.searchsorted(cdf, u * cdf[-1], side='right'), n - 1)
    return _propagate(system, model, ancestors, np.full(n, total - math.log(n)), streams)


def step(system: ParticleSystem, model: HmmModel, alpha: ConnectivityMatrix,
         streams: StreamFactory) -> ParticleSystem:
    """
    One alpha-SMC step from t - 1 to t

    W_t^i = sum_j alpha^{ij} W_{t-1}^j g_{t-1}(X_{t-1}^j), and the ancestor of
    particle i is drawn by inverse CDF over the non-zero entries of row i.

    Args:
        system: Particle system at time t - 1
        model: State-space model
        alpha: Connectivity matrix alpha_{t-1}
        streams: Random streams of the replicate

    Returns:
        Particle system at time t

    Raises:
        FilterError: At the horizon, or if some row has zero mass
    """
    _check_step(system, model, alpha)
    if alpha.is_complete:
        return bootstrap_step(system, model, streams)

    n = system.n
    log_incremental = _log_incremental(system, model)
    columns = alpha.columns
    terms = np.log(alpha.weights) + log_incremental[columns]
    new_log_weights = logsumexp(terms, axis=1)
    if not np.all(np.isfinite(new_log_weights)):
        raise FilterError(f"Zero mixture mass at t={system.t + 1}")

    cdf = np.cumsum(np.exp(terms - new_log_weights[:, None]), axis=1)
    u = streams.stream(system.t + 1, StreamPurpose.ANCESTOR).random(n)
    picks = np.minimum((u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1), columns.shape[1] - 1)
    ancestors = columns[np.arange(n), picks]
    return _propagate(system, model, ancestors, new_log_weights, streams)


def predictive_mean(system: ParticleSystem, model: HmmModel) -> float:
    """Estimate of E(X_{t+1} | y_{0:t}) from the weighted one-step kernel means"""
    if model.kernel_mean is None:
        return math.nan
    log_incremental = _log_incremental(system, model)
    mass = np.exp(log_incremental - logsumexp(log_incremental))
    return float(mass @ model.kernel_mean(system.t + 1, system.states))


def _from_log(log_abs: float, sign: float) -> float:
    """sign * exp(log_abs), or nan when the magnitude is outside the float range"""
    if sign == 0.0:
        return 0.0
    with np.errstate(over='ignore', under='ignore'):
        value = float(np.exp(log_abs))
    if value == 0.0 or math.isinf(value):
        return math.nan
    return sign * value


def estimates(system: ParticleSystem, test_functions: Sequence[TestFunction]) -> FilterEstimates:
    """pi_hat, Z_hat, mu_hat and the ESS ratio of the current system"""
    n = system.n
    log_weights = system.log_weights
    total = logsumexp(log_weights)
    normalized = np.exp(log_weights - total)
    sq_norm = float(normalized @ normalized)
    log_mu_scale = 2.0 * system.log_z_shift - math.log(n)

    pi_hat, mu_hat, log_mu_hat = {}, {}, {}
    for phi in test_functions:
        values = phi(system.states)
        pi_hat[phi.name] = float(normalized @ values)
        with np.errstate(divide='ignore'):
            log_moment, sign = logsumexp(2.0 * log_weights, b=values, return_sign=True)
        log_mu_hat[phi.name] = float(log_moment + log_mu_scale)
        mu_hat[phi.name] = _from_log(log_mu_hat[phi.name], float(sign))

    return FilterEstimates(
        t=system.t,
        log_z_hat=float(system.log_z_shift + total - math.log(n)),
        ess_ratio=1.0 / (n * sq_norm),
        sq_weight_norm=sq_norm,
        pi_hat=pi_hat,
        mu_hat=mu_hat,
        log_mu_hat=log_mu_hat,
    )


def run(model: HmmModel, n: int, spec: ConnectivitySpec, seed: int,
        test_functions: Sequence[TestFunction] = (), replicate: int = 0) -> FilterTrace:
    """
    Full trace t = 0..T for one replicate

    Deterministic in (model, n, spec, seed, replicate).
    """
    streams = StreamFactory(seed, replicate)
    provider = ConnectivityProvider(spec, n, streams)
    system = init(model, n, streams)
    rows = [estimates(system, test_functions)]
    for t in range(1, model.horizon + 1):
        forecast = predictive_mean(system, model)
        system = step(system, model, provider.matrix_for_step(t), streams)
        row = estimates(system, test_functions)
        row.predictive_mean = forecast
        rows.append(row)
    return FilterTrace(rows=rows, final=system)


def run_bootstrap(model: HmmModel, n: int, seed: int,
                  test_functions: Sequence[TestFunction] = (), replicate: int = 0) -> FilterTrace:
    """Bootstrap particle filter trace, sharing run()'s random streams"""
    streams = StreamFactory(seed, replicate)
    system = init(model, n, streams)
    rows = [estimates(system, test_functions)]
    for t in range(1, model.horizon + 1):
        forecast = predictive_mean(system, model)
        system = bootstrap_step(system, model, streams)
        row = estimates(system, test_functions)
        row.predictive_mean = forecast
        rows.append(row)
    return FilterTrace(rows=rows, final=system)


class SMCEngine:
    """Runs independent replicates of one (model, N, connectivity) configuration"""

    MAX_WORKERS = 4

    def __init__(self, model: HmmModel, n: int, spec: ConnectivitySpec, seed: int,
                 test_functions: Sequence[str] = ('one',)):
        spec.validate(n)
        self.model = model
        self.n = n
        self.spec = spec
        self.seed = seed
        self.test_functions = get_test_functions(test_functions)

    def run_replicate(self, replicate: int) -> FilterTrace:
        return run(self.model, self.n, self.spec, self.seed, self.test_functions, replicate)

    def run_replicates(self, replicates: int, max_workers: Optional[int] = None, first: int = 0,
                       on_replicate: Optional[Callable[[int], None]] = None) -> List[FilterTrace]:
        """
        Replicates first..first+replicates-1 in replicate order

        Args:
            replicates: Number of replicates
            max_workers: Thread count, MAX_WORKERS if omitted
            first: Index of the first replicate
            on_replicate: Called with the replicate index after each one finishes;
                an exception raised there stops the run

        Returns:
            One FilterTrace per replicate
        """
        def task(replicate):
            trace = self.run_replicate(replicate)
            if on_replicate is not None:
                on_replicate(replicate)
            return trace

        indices = range(first, first + replicates)
        workers = max_workers or self.MAX_WORKERS
        if workers == 1:
            return [task(r) for r in indices]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(task, indices))
