"""
Experiment Configuration
Declarative JSON description of an experiment run
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from graph_engine import (
    DEFAULT_MIXING_METHOD, MIXING_METHODS, ConnectivityKind, ConnectivitySpec, GraphError,
)
from model_manager import HmmModel, ModelError, ModelManager
from smc_engine import TEST_FUNCTIONS

logger = logging.getLogger(__name__)

CODE_VERSION = '1.0.0'


class ConfigError(ValueError):
    """Invalid or infeasible experiment configuration"""


class ExperimentKind(Enum):
    """Studies the harness can run"""
    MIXING_SWEEP = 'mixing-sweep'
    ESTIMATE_VS_C = 'estimate-vs-C'
    WASSERSTEIN_VS_C = 'wasserstein-vs-C'
    MSE_VS_C = 'mse-vs-C'
    MSE_VS_N = 'mse-vs-N'
    CLT_CHECK = 'clt-check'
    DENSITY_COMPARE = 'density-compare'


@dataclass(frozen=True)
class ModelSpec:
    """Builtin model tag plus parameter overrides"""
    tag: str
    params: Dict[str, Any] = field(default_factory=dict)

    def build(self) -> HmmModel:
        try:
            return ModelManager.make_builtin(self.tag, self.params)
        except ModelError as e:
            raise ConfigError(f"Invalid model: {e}")

    def to_dict(self) -> Dict[str, Any]:
        return {'tag': self.tag, **self.params}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        if not isinstance(data, dict) or 'tag' not in data:
            raise ConfigError("Model must be an object with a 'tag'")
        params = {k: v for k, v in data.items() if k != 'tag'}
        return cls(tag=data['tag'], params=params)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment: a study kind, a model and grids over N, C and methods.

    methods are connectivity kinds ('local-exchange', 'fixed-regular',
    'per-step-random-rows', 'per-step-regular', 'complete'); the bootstrap
    baseline is added by the studies that need it.
    """
    experiment: ExperimentKind
    model: Optional[ModelSpec]
    N: Tuple[int, ...]
    C: Tuple[int, ...]
    methods: Tuple[str, ...]
    replicates: int = 100
    seed: int = 0
    out: str = 'results/'
    graphs: int = 20
    reference_N: int = 10 ** 6
    phi: Tuple[str, ...] = ('one',)
    mixing_method: str = DEFAULT_MIXING_METHOD
    graph_seed: Optional[int] = None

    DEFAULT_REPLICATES = 100
    DEFAULT_GRAPHS = 20
    DEFAULT_REFERENCE_N = 10 ** 6
    DEFAULT_METHODS = {
        ExperimentKind.MIXING_SWEEP: ('fixed-regular',),
        ExperimentKind.CLT_CHECK: ('per-step-random-rows',),
    }
    DEFAULT_PHI = {
        ExperimentKind.ESTIMATE_VS_C: ('x2',),
        ExperimentKind.CLT_CHECK: ('state1',),
    }
    KEYS = ('experiment', 'model', 'N', 'C', 'methods', 'replicates', 'seed', 'out', 'graphs',
            'reference_N', 'phi', 'mixing_method', 'graph_seed')

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """
        Parse and validate a config document

        Raises:
            ConfigError: On unknown keys, bad values or infeasible (N, C) pairs
        """
        if not isinstance(data, dict):
            raise ConfigError("Config must be a JSON object")
        unknown = set(data) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        for key in ('experiment', 'N'):
            if key not in data:
                raise ConfigError(f"Missing config key: '{key}'")
        try:
            kind = ExperimentKind(data['experiment'])
        except ValueError:
            raise ConfigError(f"Unknown experiment: {data['experiment']!r}. "
                              f"Available: {[k.value for k in ExperimentKind]}")
        if data.get('model') is None and kind is not ExperimentKind.MIXING_SWEEP:
            raise ConfigError("Missing config key: 'model'")

        config = cls(
            experiment=kind,
            model=ModelSpec.from_dict(data['model']) if data.get('model') is not None else None,
            N=_int_tuple(data['N'], 'N'),
            C=_int_tuple(data.get('C', []), 'C'),
            methods=tuple(data.get('methods', cls.DEFAULT_METHODS.get(kind, ()))),
            replicates=data.get('replicates', cls.DEFAULT_REPLICATES),
            seed=data.get('seed', 0),
            out=data.get('out', 'results/'),
            graphs=data.get('graphs', cls.DEFAULT_GRAPHS),
            reference_N=data.get('reference_N', cls.DEFAULT_REFERENCE_N),
            phi=tuple(data.get('phi', cls.DEFAULT_PHI.get(kind, ('one',)))),
            mixing_method=data.get('mixing_method', DEFAULT_MIXING_METHOD),
            graph_seed=data.get('graph_seed'),
        )
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'experiment': self.experiment.value,
            'model': self.model.to_dict() if self.model is not None else None,
            'N': list(self.N),
            'C': list(self.C),
            'methods': list(self.methods),
            'replicates': self.replicates,
            'seed': self.seed,
            'out': self.out,
            'graphs': self.graphs,
            'reference_N': self.reference_N,
            'phi': list(self.phi),
            'mixing_method': self.mixing_method,
        }
        if self.graph_seed is not None:
            data['graph_seed'] = self.graph_seed
        return data

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of to_dict()"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def connectivity_specs(self, n: int) -> List[ConnectivitySpec]:
        """Every (method, C) spec of the grid for n particles"""
        specs = []
        for method in self.methods:
            kind = ConnectivityKind(method)
            if kind is ConnectivityKind.COMPLETE:
                specs.append(ConnectivitySpec(kind))
                continue
            for c in self.C:
                specs.append(ConnectivitySpec(kind, C=c, graph_seed=self.graph_seed))
        return specs

    def validate(self) -> None:
        """Check every field and every grid cell before any work starts"""
        problems = []
        if not self.N:
            problems.append("N grid is empty")
        if any(n < 1 for n in self.N):
            problems.append(f"N values must be >= 1, got {list(self.N)}")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            problems.append(f"replicates must be an integer >= 1, got {self.replicates!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            problems.append(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.graphs, int) or self.graphs < 1:
            problems.append(f"graphs must be an integer >= 1, got {self.graphs!r}")
        if not isinstance(self.reference_N, int) or self.reference_N < 1:
            problems.append(f"reference_N must be an integer >= 1, got {self.reference_N!r}")
        if self.mixing_method not in MIXING_METHODS:
            problems.append(f"mixing_method must be one of {list(MIXING_METHODS)}, got {self.mixing_method!r}")
        if self.graph_seed is not None and (isinstance(self.graph_seed, bool)
                                            or not isinstance(self.graph_seed, int) or self.graph_seed < 0):
            problems.append(f"graph_seed must be a non-negative integer, got {self.graph_seed!r}")
        unknown_phi = [name for name in self.phi if name not in TEST_FUNCTIONS]
        if unknown_phi:
            problems.append(f"Unknown test functions: {unknown_phi}")

        methods = []
        for method in self.methods:
            try:
                kind = ConnectivityKind(method)
            except ValueError:
                problems.append(f"Unknown method: {method!r}")
                continue
            if kind is ConnectivityKind.CUSTOM:
                problems.append(f"Method {method!r} cannot be used in experiments")
                continue
            methods.append(kind)
        if not methods:
            problems.append("methods grid is empty")
        if any(kind is not ConnectivityKind.COMPLETE for kind in methods) and not self.C:
            problems.append("C grid is empty")

        if not problems:
            for n in self.N:
                for kind in methods:
                    cs = [None] if kind is ConnectivityKind.COMPLETE else self.C
                    for c in cs:
                        problems.extend(ConnectivitySpec(kind, C=c).feasibility_errors(n))

        if not problems and self.model is not None:
            try:
                model = self.model.build()
            except ConfigError as e:
                problems.append(str(e))
            else:
                if self.experiment is ExperimentKind.CLT_CHECK and model.exact is None and not model.kernel_is_identity:
                    problems.append(f"clt-check needs a model with an exact oracle, got '{model.tag}'")

        if problems:
            raise ConfigError('; '.join(dict.fromkeys(problems)))


def _int_tuple(values: Any, name: str) -> Tuple[int, ...]:
    if isinstance(values, int):
        values = [values]
    if not isinstance(values, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        raise ConfigError(f"'{name}' must be a list of integers, got {values!r}")
    return tuple(values)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON config file"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}")
    try:
        return ExperimentConfig.from_dict(data)
    except GraphError as e:
        raise ConfigError(str(e))
