"""
Connectivity Graph Engine
Builds alpha-SMC connectivity matrices and computes their mixing constant
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from rng_streams import StreamFactory, StreamPurpose, seeded_stream

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Infeasible connectivity parameters"""


class GraphGenerationError(RuntimeError):
    """Random regular graph generation exhausted its budget"""


class MixingConstantError(RuntimeError):
    """Power iteration did not converge"""

    def __init__(self, message: str, last_iterate: np.ndarray, residual: float, estimate: float):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
        self.estimate = estimate


class ConnectivityKind(Enum):
    """How the connectivity matrices of a run are produced"""
    COMPLETE = 'complete'
    FIXED_REGULAR = 'fixed-regular'
    LOCAL_EXCHANGE = 'local-exchange'
    PER_STEP_RANDOM_ROWS = 'per-step-random-rows'
    PER_STEP_REGULAR = 'per-step-regular'
    CUSTOM = 'custom'


@dataclass(frozen=True)
class ConnectivityMatrix:
    """
    Sparse row-stochastic N x N matrix.

    Row i stores its non-zero entries as columns[i] (ascending) with
    weights[i]. Complete matrices store nothing: every entry is 1/n.
    """
    n: int
    kind: ConnectivityKind
    columns: Optional[np.ndarray]
    weights: Optional[np.ndarray]
    bi_stochastic: bool
    symmetric: bool

    @property
    def is_complete(self) -> bool:
        return self.kind is ConnectivityKind.COMPLETE

    @property
    def row_width(self) -> int:
        return self.n if self.is_complete else int(self.columns.shape[1])

    def row(self, i: int) -> List[Tuple[int, float]]:
        """(column, weight) pairs of row i"""
        if self.is_complete:
            return [(j, 1.0 / self.n) for j in range(self.n)]
        return list(zip(self.columns[i].tolist(), self.weights[i].tolist()))

    def rows(self) -> Iterator[List[Tuple[int, float]]]:
        for i in range(self.n):
            yield self.row(i)

    def to_sparse(self) -> sparse.csr_matrix:
        if self.is_complete:
            return sparse.csr_matrix(self.to_dense())
        indptr = np.arange(0, self.n * self.row_width + 1, self.row_width)
        return sparse.csr_matrix(
            (self.weights.ravel(), self.columns.ravel(), indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        if self.is_complete:
            return np.full((self.n, self.n), 1.0 / self.n)
        return self.to_sparse().toarray()

    def check_invariants(self, row_tol: float = 1e-12, column_tol: float = 1e-10) -> None:
        """Raise GraphError if a structural invariant does not hold"""
        if self.is_complete:
            return
        if np.any(self.weights <= 0):
            raise GraphError("Stored weights must be positive")
        row_sums = self.weights.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > row_tol):
            raise GraphError(f"Row sums deviate from 1 by {np.abs(row_sums - 1.0).max():.3e}")
        matrix = self.to_sparse()
        if self.bi_stochastic:
            column_sums = np.asarray(matrix.sum(axis=0)).ravel()
            if np.any(np.abs(column_sums - 1.0) > column_tol):
                raise GraphError(f"Column sums deviate from 1 by {np.abs(column_sums - 1.0).max():.3e}")
        if self.symmetric and (matrix - matrix.T).count_nonzero() > 0:
            raise GraphError("Matrix flagged symmetric is not symmetric")


@dataclass(frozen=True)
class ConnectivitySpec:
    """Declarative description of the connectivity used by a run"""
    kind: ConnectivityKind
    C: Optional[int] = None
    graph_seed: Optional[int] = None

    @property
    def is_per_step(self) -> bool:
        return self.kind in (ConnectivityKind.PER_STEP_RANDOM_ROWS, ConnectivityKind.PER_STEP_REGULAR)

    def feasibility_errors(self, n: int) -> List[str]:
        """Every reason why this spec cannot be used with n particles"""
        kind, c = self.kind, self.C
        if n < 1:
            return [f"N={n} must be >= 1"]
        if kind is ConnectivityKind.COMPLETE:
            return []
        if kind is ConnectivityKind.CUSTOM:
            return [f"kind '{kind.value}' cannot be built from a spec"]
        if c is None:
            return [f"{kind.value} needs a connectivity C"]
        errors = []
        if kind in (ConnectivityKind.FIXED_REGULAR, ConnectivityKind.PER_STEP_REGULAR):
            if not 3 <= c < n:
                errors.append(f"{kind.value} needs 3 <= C < N, got (N={n}, C={c})")
            if (n * c) % 2:
                errors.append(f"{kind.value} needs N*C even, got (N={n}, C={c})")
        elif kind is ConnectivityKind.LOCAL_EXCHANGE:
            if c < 1 or local_exchange_width(c) > n:
                errors.append(f"{kind.value} needs C >= 1 and 2*(C//2)+1 <= N, got (N={n}, C={c})")
        elif kind is ConnectivityKind.PER_STEP_RANDOM_ROWS:
            if not 1 <= c <= n:
                errors.append(f"{kind.value} needs 1 <= C <= N, got (N={n}, C={c})")
        return errors

    def validate(self, n: int) -> None:
        errors = self.feasibility_errors(n)
        if errors:
            raise GraphError('; '.join(errors))

    def to_dict(self) -> Dict[str, Any]:
        data = {'kind': self.kind.value}
        if self.C is not None:
            data['C'] = self.C
        if self.graph_seed is not None:
            data['graph_seed'] = self.graph_seed
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ConnectivitySpec':
        unknown = set(data) - {'kind', 'C', 'graph_seed'}
        if unknown:
            raise GraphError(f"Unknown connectivity keys: {sorted(unknown)}")
        try:
            kind = ConnectivityKind(data['kind'])
        except (KeyError, ValueError):
            raise GraphError(f"Unknown connectivity kind: {data.get('kind')!r}")
        for key in ('C', 'graph_seed'):
            value = data.get(key)
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise GraphError(f"Connectivity '{key}' must be an integer, got {value!r}")
        if data.get('graph_seed') is not None and data['graph_seed'] < 0:
            raise GraphError(f"graph_seed must be non-negative, got {data['graph_seed']}")
        return cls(kind=kind, C=data.get('C'), graph_seed=data.get('graph_seed'))


# ==================== Generators ====================

def complete_matrix(n: int) -> ConnectivityMatrix:
    """alpha^{ij} = 1/n; the bootstrap particle filter"""
    if n < 1:
        raise GraphError(f"n must be >= 1, got {n}")
    return ConnectivityMatrix(n=n, kind=ConnectivityKind.COMPLETE, columns=None, weights=None,
                              bi_stochastic=True, symmetric=True)


def from_dense(alpha: np.ndarray, kind: ConnectivityKind = ConnectivityKind.CUSTOM) -> ConnectivityMatrix:
    """
    Wrap a dense row-stochastic matrix whose rows all have the same number
    of non-zero entries
    """
    alpha = np.asarray(alpha, dtype=float)
    n = alpha.shape[0]
    if alpha.shape != (n, n):
        raise GraphError(f"Expected a square matrix, got shape {alpha.shape}")
    widths = (alpha > 0).sum(axis=1)
    if np.any(widths != widths[0]):
        raise GraphError("Rows must all have the same number of non-zero entries")
    columns = np.sort(np.argsort(alpha <= 0, axis=1, kind='stable')[:, :widths[0]], axis=1)
    weights = np.take_along_axis(alpha, columns, axis=1)
    matrix = ConnectivityMatrix(
        n=n, kind=kind, columns=columns, weights=weights,
        bi_stochastic=bool(np.allclose(alpha.sum(axis=0), 1.0, atol=1e-10)),
        symmetric=bool(np.array_equal(alpha, alpha.T)),
    )
    matrix.check_invariants()
    return matrix


def _regular_from_edges(n: int, c: int, edges: np.ndarray, kind: ConnectivityKind) -> ConnectivityMatrix:
    source = np.concatenate([edges[:, 0], edges[:, 1]])
    target = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((target, source))
    columns = target[order].reshape(n, c)
    return ConnectivityMatrix(n=n, kind=kind, columns=columns, weights=np.full((n, c), 1.0 / c),
                              bi_stochastic=True, symmetric=True)


def _pairing_attempt(n: int, c: int, rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    stubs = np.repeat(np.arange(n), c)
    rng.shuffle(stubs)
    pairs = np.sort(stubs.reshape(-1, 2), axis=1)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        return pairs, False
    codes = pairs[:, 0] * n + pairs[:, 1]
    return pairs, np.unique(codes).shape[0] == codes.shape[0]


def _switch_repair(pairs: np.ndarray, rng: np.random.Generator, budget: int) -> np.ndarray:
    """Remove self-loops and multi-edges by degree-preserving double-edge switches"""
    edges = [tuple(pair) for pair in pairs.tolist()]
    counts = Counter(edges)

    def is_bad(edge):
        return edge[0] == edge[1] or counts[edge] > 1

    bad = {k for k, edge in enumerate(edges) if is_bad(edge)}
    attempts = 0
    while bad:
        if attempts >= budget:
            raise GraphGenerationError(
                f"Edge switching left {len(bad)} bad edges after {budget} attempts")
        attempts += 1
        candidates = sorted(bad)
        k = candidates[int(rng.integers(len(candidates)))]
        if not is_bad(edges[k]):
            bad.discard(k)
            continue
        m = int(rng.integers(len(edges)))
        if m == k:
            continue
        a, b = edges[k]
        c, d = edges[m]
        if rng.random() < 0.5:
            c, d = d, c
        first, second = tuple(sorted((a, c))), tuple(sorted((b, d)))
        if a == c or b == d or first == second or counts[first] or counts[second]:
            continue
        for old in (edges[k], edges[m]):
            counts[old] -= 1
        edges[k], edges[m] = first, second
        counts[first] += 1
        counts[second] += 1
        bad.discard(k)
        bad.discard(m)
    logger.debug("Edge switching repaired the pairing in %d attempts", attempts)
    return np.array(edges, dtype=np.int64)


class RegularGraphSampler:
    """Uniform-ish C-regular graphs by the pairing model with a switching fallback"""

    MAX_RESTARTS = 500
    SWITCH_ATTEMPTS_PER_EDGE = 100

    @classmethod
    def sample(cls, n: int, c: int, rng: np.random.Generator,
               kind: ConnectivityKind = ConnectivityKind.FIXED_REGULAR) -> ConnectivityMatrix:
        if not 3 <= c < n:
            raise GraphError(f"Random regular graphs need 3 <= C < n, got (n={n}, C={c})")
        if (n * c) % 2:
            raise GraphError(f"Random regular graphs need n*C even, got (n={n}, C={c})")

        pairs = None
        for restart in range(cls.MAX_RESTARTS):
            pairs, simple = _pairing_attempt(n, c, rng)
            if simple:
                logger.debug("Pairing model produced a simple graph after %d restarts", restart)
                return _regular_from_edges(n, c, pairs, kind)

        logger.info("Pairing model failed %d times for (n=%d, C=%d); repairing by edge switching",
                    cls.MAX_RESTARTS, n, c)
        edges = _switch_repair(pairs, rng, budget=cls.SWITCH_ATTEMPTS_PER_EDGE * pairs.shape[0])
        return _regular_from_edges(n, c, edges, kind)


def random_regular_matrix(n: int, C: int, rng: np.random.Generator) -> ConnectivityMatrix:
    """Random-walk matrix of a random simple C-regular graph on n vertices"""
    return RegularGraphSampler.sample(n, C, rng)


def local_exchange_width(C: int) -> int:
    """Row width 2 * (C // 2) + 1 of the local exchange window; C + 1 for even C"""
    return 2 * (C // 2) + 1


def local_exchange_matrix(n: int, C: int) -> ConnectivityMatrix:
    """Circulant ring: row i has equal weight at (i + k) mod n for |k| <= C // 2"""
    width = local_exchange_width(C)
    if C < 1 or width > n:
        raise GraphError(f"Local exchange needs C >= 1 and a window of at most n, got (n={n}, C={C})")
    half = C // 2
    offsets = np.arange(-half, half + 1)
    columns = np.sort((np.arange(n)[:, None] + offsets[None, :]) % n, axis=1)
    return ConnectivityMatrix(n=n, kind=ConnectivityKind.LOCAL_EXCHANGE, columns=columns,
                              weights=np.full((n, width), 1.0 / width), bi_stochastic=True, symmetric=True)


def random_rows_matrix(n: int, C: int, rng: np.random.Generator) -> ConnectivityMatrix:
    """Each row: C distinct uniformly chosen columns (self allowed), weight 1/C"""
    if not 1 <= C <= n:
        raise GraphError(f"Random rows need 1 <= C <= n, got (n={n}, C={C})")
    if 4 * C <= n:
        columns = rng.integers(0, n, size=(n, C))
        while True:
            ordered = np.sort(columns, axis=1)
            repeated = np.any(np.diff(ordered, axis=1) == 0, axis=1)
            if not repeated.any():
                break
            columns[repeated] = rng.integers(0, n, size=(int(repeated.sum()), C))
        columns = ordered
    else:
        keys = rng.random((n, n))
        columns = np.sort(np.argpartition(keys, C - 1, axis=1)[:, :C], axis=1)
    return ConnectivityMatrix(n=n, kind=ConnectivityKind.PER_STEP_RANDOM_ROWS, columns=columns,
                              weights=np.full((n, C), 1.0 / C), bi_stochastic=False, symmetric=False)


def build_matrix(spec: ConnectivitySpec, n: int, rng: Optional[np.random.Generator] = None) -> ConnectivityMatrix:
    """Materialise one matrix of the given spec"""
    spec.validate(n)
    kind = spec.kind
    if kind is ConnectivityKind.COMPLETE:
        return complete_matrix(n)
    if kind is ConnectivityKind.LOCAL_EXCHANGE:
        return local_exchange_matrix(n, spec.C)
    if rng is None:
        if spec.graph_seed is None:
            raise GraphError(f"{kind.value} needs an RNG stream or a graph_seed")
        rng = seeded_stream(spec.graph_seed)
    if kind is ConnectivityKind.PER_STEP_RANDOM_ROWS:
        return random_rows_matrix(n, spec.C, rng)
    return RegularGraphSampler.sample(n, spec.C, rng, kind=kind)


class ConnectivityProvider:
    """
    Supplies alpha_{t-1} for the step to time index t of one replicate.

    Fixed kinds are built once; per-step kinds draw a fresh matrix from the
    (replicate, t, graph) stream, independent of the particle history.
    """

    def __init__(self, spec: ConnectivitySpec, n: int, streams: StreamFactory):
        spec.validate(n)
        self.spec = spec
        self.n = n
        self.streams = streams
        self._fixed = None
        if not spec.is_per_step:
            rng = None
            if spec.kind is ConnectivityKind.FIXED_REGULAR and spec.graph_seed is None:
                rng = streams.stream(0, StreamPurpose.GRAPH)
            self._fixed = build_matrix(spec, n, rng)

    @property
    def fixed_matrix(self) -> Optional[ConnectivityMatrix]:
        return self._fixed

    def matrix_for_step(self, t: int) -> ConnectivityMatrix:
        if self._fixed is not None:
            return self._fixed
        if t < 1:
            raise GraphError(f"Steps start at t = 1, got {t}")
        return build_matrix(self.spec, self.n, self.streams.stream(t, StreamPurpose.GRAPH))


# ==================== Mixing constant ====================

DENSE_LIMIT = 16384
# Below this size the projected operator is diagonalised exactly
SMALL_DENSE = 64
MIXING_METHODS = ('lanczos', 'power')
DEFAULT_MIXING_METHOD = 'lanczos'


def _as_operator(alpha: Union[ConnectivityMatrix, np.ndarray, sparse.spmatrix]) -> LinearOperator:
    if isinstance(alpha, ConnectivityMatrix):
        return sparse.csr_matrix(alpha.to_sparse())
    if sparse.issparse(alpha):
        return sparse.csr_matrix(alpha)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[0] > DENSE_LIMIT:
        return sparse.csr_matrix(alpha)
    return alpha


def _clamped_sqrt(value: float) -> float:
    return math.sqrt(min(max(value, 0.0), 1.0))


def mixing_constant(alpha, tol: float = 1e-10, max_iter: int = 100_000, seed: int = 0,
                    method: str = DEFAULT_MIXING_METHOD) -> float:
    """
    Mixing constant lambda(alpha) = sup ||alpha v|| over unit v orthogonal to 1

    Computed as the square root of the top eigenvalue of P alpha^T alpha P,
    P = Id - 1 1^T / n. Both methods stop once the eigen-residual
    ||B v - theta v|| is at most tol * theta.

    Args:
        alpha: ConnectivityMatrix, dense array or scipy sparse matrix
        tol: Relative tolerance on the eigen-residual
        max_iter: Iteration budget
        seed: Seed of the deterministic start vector
        method: 'lanczos' (ARPACK, implicitly restarted Krylov power iteration)
            or 'power' (plain power iteration; slow when the top of the
            spectrum is clustered, e.g. local exchange on large rings)

    Returns:
        lambda in [0, 1]

    Raises:
        MixingConstantError: If the iteration does not converge within max_iter
    """
    if method not in MIXING_METHODS:
        raise ValueError(f"Unknown method: '{method}'. Supported: {list(MIXING_METHODS)}")
    if isinstance(alpha, ConnectivityMatrix) and alpha.is_complete:
        return 0.0
    operator = _as_operator(alpha)
    n = operator.shape[0]
    if n == 1:
        return 0.0

    def project(v):
        return v - v.mean()

    def apply(v):
        v = project(v)
        return project(operator.T @ (operator @ v))

    start = project(np.random.default_rng(seed).standard_normal(n))
    start /= np.linalg.norm(start)

    if method == 'lanczos':
        if n <= SMALL_DENSE:
            dense = np.column_stack([apply(e) for e in np.eye(n)])
            return _clamped_sqrt(float(np.linalg.eigvalsh((dense + dense.T) / 2.0)[-1]))
        projected = LinearOperator((n, n), matvec=apply, rmatvec=apply, dtype=float)
        try:
            values = eigsh(projected, k=1, which='LA', tol=tol, maxiter=max_iter, v0=start,
                           ncv=min(n, SMALL_DENSE), return_eigenvectors=False)
        except ArpackNoConvergence as e:
            estimate = float(e.eigenvalues[0]) if len(e.eigenvalues) else float('nan')
            raise MixingConstantError("Lanczos iteration did not converge",
                                      last_iterate=start, residual=float('nan'),
                                      estimate=math.sqrt(max(estimate, 0.0)))
        return _clamped_sqrt(float(values[0]))

    v = start
    estimate = 0.0
    residual = math.inf
    for iteration in range(max_iter):
        w = apply(v)
        norm_w = float(np.linalg.norm(w))
        if norm_w <= np.finfo(float).eps:
            return 0.0
        estimate = float(v @ w)
        residual = float(np.linalg.norm(w - estimate * v))
        if residual <= tol * estimate:
            logger.debug("Power iteration converged after %d iterations", iteration + 1)
            return _clamped_sqrt(estimate)
        v = w / norm_w

    raise MixingConstantError(
        f"Power iteration did not converge in {max_iter} iterations (residual {residual:.3e})",
        last_iterate=v, residual=residual, estimate=math.sqrt(max(estimate, 0.0)))


def circulant_mixing_constant(n: int, C: int) -> float:
    """Exact lambda of local_exchange_matrix(n, C) from the circulant spectrum"""
    if n == 1:
        return 0.0
    theta = 2.0 * np.pi * np.arange(1, n) / n
    half = C // 2
    eigenvalues = (1.0 + 2.0 * sum(np.cos(m * theta) for m in range(1, half + 1))) / local_exchange_width(C)
    return float(np.abs(eigenvalues).max())


def alon_friedman_limit(C: int) -> float:
    """Large-n limit 2 sqrt(C - 1) / C of lambda for random C-regular graphs"""
    return 2.0 * math.sqrt(C - 1) / C


# ==================== Edge lists ====================

def dump_edge_list(matrix: ConnectivityMatrix, path: Union[str, Path]) -> None:
    """Write stored entries as 'i j' lines; symmetric matrices list each edge once"""
    if matrix.is_complete:
        raise GraphError("Complete matrices are not dumped as edge lists")
    with open(path, 'w', encoding='utf-8') as f:
        for i in range(matrix.n):
            for j in matrix.columns[i].tolist():
                if matrix.symmetric and j < i:
                    continue
                f.write(f"{i} {j}\n")


def load_edge_list(path: Union[str, Path], n: int) -> ConnectivityMatrix:
    """Random-walk matrix of the undirected graph stored in an edge list"""
    edges = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if edges.size == 0:
        raise GraphError(f"Empty edge list: {path}")
    source = np.concatenate([edges[:, 0], edges[:, 1]])
    target = np.concatenate([edges[:, 1], edges[:, 0]])
    loops = edges[:, 0] == edges[:, 1]
    if loops.any():
        source = np.concatenate([edges[~loops, 0], edges[~loops, 1], edges[loops, 0]])
        target = np.concatenate([edges[~loops, 1], edges[~loops, 0], edges[loops, 0]])
    degrees = np.bincount(source, minlength=n)
    if np.any(degrees != degrees[0]) or degrees[0] == 0:
        raise GraphError("Edge list must describe a regular graph without isolated vertices")
    c = int(degrees[0])
    order = np.lexsort((target, source))
    return ConnectivityMatrix(n=n, kind=ConnectivityKind.FIXED_REGULAR, columns=target[order].reshape(n, c),
                              weights=np.full((n, c), 1.0 / c), bi_stochastic=True, symmetric=True)
