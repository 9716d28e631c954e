"""
Model Manager for alpha-SMC
Defines the state-space model interface and the registry of builtin models
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from scipy.stats import norm

from rng_streams import StreamPurpose, seeded_stream

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    """Invalid model parameters or out-of-range evaluation"""


class StateKind(Enum):
    """State space of a model"""
    CONTINUOUS_1D = 'continuous-1d'
    DISCRETE = 'discrete'


@dataclass(frozen=True)
class DiscreteArrays:
    """
    Exact arrays of a finite-state model.

    transitions[t - 1] is K_t and potentials[t] is g_t, so a model with
    horizon T stores T transition matrices and T + 1 potential vectors.
    """
    initial: np.ndarray
    transitions: np.ndarray
    potentials: np.ndarray

    @property
    def n_states(self) -> int:
        return int(self.initial.shape[0])


@dataclass(frozen=True)
class HmmModel:
    """
    Sampler/evaluator bundle for pi_0, K_t and g_t.

    Samplers are vectorised over particles: initial_sampler(n, rng),
    transition_sampler(t, x, rng) and potential_fn(t, x) all work on
    arrays. Observations are folded into potential_fn at construction.
    """
    tag: str
    state_kind: StateKind
    initial_sampler: Callable[[int, np.random.Generator], np.ndarray]
    transition_sampler: Callable[[int, np.ndarray, np.random.Generator], np.ndarray]
    potential_fn: Callable[[int, np.ndarray], np.ndarray]
    kappa_g: float
    horizon: int
    kappa_g_inv: Optional[float] = None
    kappa_k: Optional[float] = None  # metadata, never enforced
    n_states: Optional[int] = None
    exact: Optional[DiscreteArrays] = None
    kernel_mean: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    initial_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kernel_is_identity: bool = False
    observations: Optional[np.ndarray] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def potential(self, t: int, x):
        """Evaluate g_t(x) for a scalar or an array of states"""
        if not 0 <= t <= self.horizon:
            raise ModelError(f"Time index {t} outside [0, {self.horizon}] for model '{self.tag}'")
        values = self.potential_fn(t, np.asarray(x))
        if np.ndim(x) == 0:
            return float(values)
        return values

    @property
    def two_sided_bound(self) -> Optional[float]:
        """kappa with kappa^-1 <= g <= kappa, when a lower bound is declared"""
        if self.kappa_g_inv is None:
            return None
        return max(self.kappa_g, 1.0 / self.kappa_g_inv)


def evaluate_potential(model: HmmModel, t: int, x):
    """Return g_t(x) for the model"""
    return model.potential(t, x)


def _indicator_potential(floor: float, height: float, center: float, width: float):
    def potential(t, x):
        return floor + height * (np.abs(x - center) < width)
    return potential


def _standard_normal_initial(n, rng):
    return rng.standard_normal(n)


class ModelManager:
    """Registry and factory for the builtin state-space models"""

    MODEL_REGISTRY = {
        'ar1-indicator': {
            'name': 'AR(1) dynamics with indicator potentials',
            'state_kind': StateKind.CONTINUOUS_1D.value,
            'description': 'x_{t+1} = beta x_t + sqrt(1 - beta^2) xi_t, '
                           'g_t(x) = 0.1 + 10 * 1(|x - 2| < 0.1)',
            'defaults': {'beta': 0.9, 'center': 2.0, 'width': 0.1,
                         'floor': 0.1, 'height': 10.0, 'T': 6},
        },
        'tracking': {
            'name': 'Noisy tracking of a mean-reverting process',
            'state_kind': StateKind.CONTINUOUS_1D.value,
            'description': 'x_0 = 0, x_{t+1} = -(x_t - 1) / 2 + xi_t, y_t = x_t + sigma eps_t',
            'defaults': {'sigma': 0.2, 'T': 200, 'observation_seed': 0},
        },
        'tail-example': {
            'name': 'One-step tail example',
            'state_kind': StateKind.CONTINUOUS_1D.value,
            'description': 'pi_0 = N(0, 1), g_0(x) = 0.1 + 100 * 1(|x| < 0.1), K_1 = identity',
            'defaults': {'floor': 0.1, 'height': 100.0, 'width': 0.1, 'T': 1},
        },
        'two-state': {
            'name': 'Discrete two-state oracle testbed',
            'state_kind': StateKind.DISCRETE.value,
            'description': 'Finite-state model with user-supplied pi_0, K and g',
            'defaults': {'initial': [0.5, 0.5],
                         'transition': [[0.9, 0.1], [0.2, 0.8]],
                         'potential': [1.0, 2.0],
                         'T': 10},
        },
    }

    ROW_SUM_TOL = 1e-12

    def get_model_list(self) -> List[Dict[str, Any]]:
        """List all builtin models with their default parameters"""
        return [{'tag': tag, **info} for tag, info in self.MODEL_REGISTRY.items()]

    def get_model_info(self, tag: str) -> Optional[Dict[str, Any]]:
        """Get registry information about one builtin model"""
        if tag not in self.MODEL_REGISTRY:
            return None
        return {'tag': tag, **self.MODEL_REGISTRY[tag]}

    @classmethod
    def make_builtin(cls, tag: str, params: Optional[Dict[str, Any]] = None,
                     observation_seed: Optional[int] = None) -> HmmModel:
        """
        Build a fully specified builtin model

        Args:
            tag: Registry tag ('ar1-indicator', 'tracking', 'tail-example', 'two-state')
            params: Overrides of the registry defaults
            observation_seed: Seed of the simulated observations ('tracking' only);
                overrides params['observation_seed']

        Returns:
            HmmModel

        Raises:
            ModelError: If the tag is unknown or the parameters are invalid
        """
        if tag not in cls.MODEL_REGISTRY:
            raise ModelError(f"Unknown model tag: '{tag}'. Available: {list(cls.MODEL_REGISTRY.keys())}")

        merged = dict(cls.MODEL_REGISTRY[tag]['defaults'])
        merged.update(params or {})
        unknown = set(merged) - set(cls.MODEL_REGISTRY[tag]['defaults'])
        if unknown:
            raise ModelError(f"Unknown parameters for '{tag}': {sorted(unknown)}")
        if observation_seed is not None:
            if tag != 'tracking':
                raise ModelError(f"Model '{tag}' has no simulated observations")
            merged['observation_seed'] = observation_seed

        horizon = merged['T']
        if not isinstance(horizon, (int, np.integer)) or horizon < 1:
            raise ModelError(f"Horizon must be an integer >= 1, got {horizon!r}")

        builder = {
            'ar1-indicator': cls._build_ar1_indicator,
            'tracking': cls._build_tracking,
            'tail-example': cls._build_tail_example,
            'two-state': cls._build_two_state,
        }[tag]
        model = builder(merged)
        logger.debug("Built model '%s' with params %s", tag, merged)
        return model

    @staticmethod
    def _build_ar1_indicator(params: Dict[str, Any]) -> HmmModel:
        beta = float(params['beta'])
        if not -1.0 < beta < 1.0:
            raise ModelError(f"AR coefficient must lie in (-1, 1), got {beta}")
        floor, height = float(params['floor']), float(params['height'])
        if floor <= 0 or height < 0:
            raise ModelError("Indicator potential needs floor > 0 and height >= 0")
        scale = math.sqrt(1.0 - beta ** 2)

        def transition(t, x, rng):
            return beta * x + scale * rng.standard_normal(x.shape[0])

        return HmmModel(
            tag='ar1-indicator',
            state_kind=StateKind.CONTINUOUS_1D,
            initial_sampler=_standard_normal_initial,
            transition_sampler=transition,
            potential_fn=_indicator_potential(floor, height, float(params['center']), float(params['width'])),
            kappa_g=floor + height,
            kappa_g_inv=floor,
            horizon=int(params['T']),
            kernel_mean=lambda t, x: beta * x,
            initial_density=norm.pdf,
            params=dict(params),
        )

    @staticmethod
    def _build_tracking(params: Dict[str, Any]) -> HmmModel:
        sigma = float(params['sigma'])
        if sigma <= 0:
            raise ModelError(f"Observation noise sigma must be positive, got {sigma}")
        horizon = int(params['T'])

        # y_{0:T} frozen from the observation seed
        rng = seeded_stream(int(params['observation_seed']), StreamPurpose.OBSERVATION)
        states = np.empty(horizon + 1)
        states[0] = 0.0
        for t in range(1, horizon + 1):
            states[t] = -(states[t - 1] - 1.0) / 2.0 + rng.standard_normal()
        observations = states + sigma * rng.standard_normal(horizon + 1)
        observations.setflags(write=False)

        def transition(t, x, rng):
            return -(x - 1.0) / 2.0 + rng.standard_normal(x.shape[0])

        def potential(t, x):
            return norm.pdf(observations[t] - x, scale=sigma)

        return HmmModel(
            tag='tracking',
            state_kind=StateKind.CONTINUOUS_1D,
            initial_sampler=lambda n, rng: np.zeros(n),
            transition_sampler=transition,
            potential_fn=potential,
            kappa_g=1.0 / (sigma * math.sqrt(2.0 * math.pi)),
            horizon=horizon,
            kernel_mean=lambda t, x: -(x - 1.0) / 2.0,
            observations=observations,
            params=dict(params),
        )

    @staticmethod
    def _build_tail_example(params: Dict[str, Any]) -> HmmModel:
        floor, height = float(params['floor']), float(params['height'])
        if floor <= 0 or height < 0:
            raise ModelError("Indicator potential needs floor > 0 and height >= 0")

        return HmmModel(
            tag='tail-example',
            state_kind=StateKind.CONTINUOUS_1D,
            initial_sampler=_standard_normal_initial,
            transition_sampler=lambda t, x, rng: x.copy(),
            potential_fn=_indicator_potential(floor, height, 0.0, float(params['width'])),
            kappa_g=floor + height,
            kappa_g_inv=floor,
            horizon=int(params['T']),
            kernel_mean=lambda t, x: x,
            initial_density=norm.pdf,
            kernel_is_identity=True,
            params=dict(params),
        )

    @classmethod
    def _build_two_state(cls, params: Dict[str, Any]) -> HmmModel:
        horizon = int(params['T'])
        initial = np.asarray(params['initial'], dtype=float)
        transition = np.asarray(params['transition'], dtype=float)
        potential = np.asarray(params['potential'], dtype=float)
        n = initial.shape[0]

        if initial.ndim != 1 or n < 1:
            raise ModelError("Initial distribution must be a non-empty vector")
        if np.any(initial < 0) or abs(initial.sum() - 1.0) > cls.ROW_SUM_TOL:
            raise ModelError(f"Initial distribution must be a probability vector, got {initial.tolist()}")

        # A single matrix/vector is shared by every time index
        if transition.ndim == 2:
            transition = np.broadcast_to(transition, (horizon, n, n))
        if potential.ndim == 1:
            potential = np.broadcast_to(potential, (horizon + 1, n))
        if transition.shape != (horizon, n, n):
            raise ModelError(f"Expected transitions of shape {(horizon, n, n)}, got {transition.shape}")
        if potential.shape != (horizon + 1, n):
            raise ModelError(f"Expected potentials of shape {(horizon + 1, n)}, got {potential.shape}")
        if np.any(transition < 0) or np.any(np.abs(transition.sum(axis=2) - 1.0) > cls.ROW_SUM_TOL):
            raise ModelError("Transition matrices must be row-stochastic")
        if np.any(potential <= 0):
            raise ModelError("Potentials must be strictly positive")

        transition = np.array(transition)
        potential = np.array(potential)
        for array in (initial, transition, potential):
            array.setflags(write=False)
        exact = DiscreteArrays(initial=initial, transitions=transition, potentials=potential)
        cumulative_initial = np.cumsum(initial)
        cumulative_transition = np.cumsum(transition, axis=2)

        def initial_sampler(size, rng):
            u = rng.random(size)
            return np.minimum(np.searchsorted(cumulative_initial, u, side='right'), n - 1)

        def transition_sampler(t, x, rng):
            u = rng.random(x.shape[0])
            rows = cumulative_transition[t - 1][x]
            return np.minimum((u[:, None] >= rows).sum(axis=1), n - 1)

        def potential_fn(t, x):
            return potential[t][x]

        positive = transition[transition > 0]
        return HmmModel(
            tag='two-state',
            state_kind=StateKind.DISCRETE,
            initial_sampler=initial_sampler,
            transition_sampler=transition_sampler,
            potential_fn=potential_fn,
            kappa_g=float(potential.max()),
            kappa_g_inv=float(potential.min()),
            kappa_k=float(max(positive.max(), 1.0 / positive.min())),
            horizon=horizon,
            n_states=n,
            exact=exact,
            kernel_mean=lambda t, x: transition[t - 1][x] @ np.arange(n),
            params={k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in params.items()},
        )


def make_builtin(tag: str, params: Optional[Dict[str, Any]] = None,
                 observation_seed: Optional[int] = None) -> HmmModel:
    """Module-level shortcut for ModelManager.make_builtin"""
    return ModelManager.make_builtin(tag, params, observation_seed)
