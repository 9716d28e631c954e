"""
Batch Experiment Engine
Runs declarative alpha-SMC experiments as tracked jobs with flat-file outputs
"""
import json
import logging
import math
import os
import tempfile
import threading
import time
import concurrent.futures
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from experiment_config import CODE_VERSION, ConfigError, ExperimentConfig, ExperimentKind
from graph_engine import (
    ConnectivityKind, ConnectivitySpec, alon_friedman_limit, build_matrix,
    circulant_mixing_constant, mixing_constant,
)
from metrics_processor import MetricsProcessor, WeightedSample
from oracle_engine import OracleEngine
from rng_streams import StreamFactory, StreamPurpose
from smc_engine import FilterTrace, SMCEngine, get_test_functions, run_bootstrap

logger = logging.getLogger(__name__)

BOOTSTRAP = 'bootstrap'


class ExperimentCancelled(RuntimeError):
    """Raised inside a running experiment whose job was cancelled"""


def default_threads() -> int:
    """Worker count from ALPHA_SMC_THREADS, else BatchProcessor.MAX_WORKERS"""
    value = os.environ.get('ALPHA_SMC_THREADS')
    if value is None:
        return BatchProcessor.MAX_WORKERS
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"ALPHA_SMC_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise ConfigError(f"ALPHA_SMC_THREADS must be >= 1, got {threads}")
    return threads


@dataclass(frozen=True)
class FilterCell:
    """One filter run of a grid: method label, N, C and replicate"""
    method: str
    n: int
    c: Optional[int]
    replicate: int

    @property
    def key(self) -> Tuple[str, int, float]:
        return self.method, self.n, math.nan if self.c is None else self.c


class ExperimentRunner:
    """
    Executes one ExperimentConfig.

    Filter replicates run on SMCEngine's thread pool and mixing
    measurements on the runner's. Every task draws from its own
    (replicate, t, purpose) streams and results are collected in task
    order, so outputs do not depend on the worker count.
    """

    RAW_FILE = 'raw.csv'
    SUMMARY_FILE = 'summary.csv'
    MANIFEST_FILE = 'manifest.json'
    # Stream key of the large reference run; never used by a replicate
    REFERENCE_REPLICATE = 2 ** 31 - 1

    def __init__(self, config: ExperimentConfig, threads: Optional[int] = None,
                 progress: Optional[Callable[[int, int], None]] = None,
                 should_stop: Optional[Callable[[], bool]] = None):
        self.config = config
        self.threads = threads or default_threads()
        self._progress = progress
        self._should_stop = should_stop or (lambda: False)
        self._done = 0
        self._total = 0
        self._lock = threading.Lock()
        self.model = config.model.build() if config.model is not None else None

    # ==================== Scheduling ====================

    def _tick(self, _item=None) -> None:
        """Count one finished task; raise if the run was cancelled"""
        with self._lock:
            self._done += 1
            if self._progress is not None:
                self._progress(self._done, self._total)
        if self._should_stop():
            raise ExperimentCancelled("Experiment cancelled")

    def _check_stop(self) -> None:
        if self._should_stop():
            raise ExperimentCancelled("Experiment cancelled")

    def _map(self, fn: Callable, items: List) -> List:
        with self._lock:
            self._total += len(items)

        def task(item):
            self._check_stop()
            result = fn(item)
            self._tick()
            return result

        if self.threads == 1:
            return [task(item) for item in items]
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.threads) as executor:
            return list(executor.map(task, items))

    def _filter_groups(self, include_bootstrap: bool) -> List[Tuple[str, int, ConnectivitySpec]]:
        """(method label, N, spec) of every filter configuration; the bootstrap runs as the complete kind"""
        groups = []
        for n in self.config.N:
            if include_bootstrap:
                groups.append((BOOTSTRAP, n, ConnectivitySpec(ConnectivityKind.COMPLETE)))
            groups.extend((spec.kind.value, n, spec) for spec in self.config.connectivity_specs(n))
        return groups

    def _run_cells(self, include_bootstrap: bool) -> List[Tuple[FilterCell, FilterTrace]]:
        groups = self._filter_groups(include_bootstrap)
        replicates = self.config.replicates
        with self._lock:
            self._total += len(groups) * replicates
        results = []
        for method, n, spec in groups:
            self._check_stop()
            engine = SMCEngine(self.model, n, spec, self.config.seed, self.config.phi)
            traces = engine.run_replicates(replicates, max_workers=self.threads, on_replicate=self._tick)
            c = None if method == BOOTSTRAP else spec.C
            results.extend((FilterCell(method, n, c, r), trace) for r, trace in enumerate(traces))
        return results

    def _reference(self) -> FilterTrace:
        logger.info("Running reference bootstrap filter with N=%d", self.config.reference_N)
        return run_bootstrap(self.model, self.config.reference_N, self.config.seed,
                             get_test_functions(self.config.phi), self.REFERENCE_REPLICATE)

    @staticmethod
    def _trace_frame(results: List[Tuple[FilterCell, FilterTrace]]) -> pd.DataFrame:
        records = []
        for cell, trace in results:
            method, n, c = cell.key
            for record in trace.to_records(cell.replicate):
                records.append({'method': method, 'N': n, 'C': c, **record})
        return pd.DataFrame(records)

    @staticmethod
    def _grouped(results: List[Tuple[FilterCell, FilterTrace]]) -> Dict[Tuple, List[FilterTrace]]:
        groups: Dict[Tuple, List[FilterTrace]] = {}
        for cell, trace in results:
            groups.setdefault(cell.key, []).append(trace)
        return groups

    # ==================== Studies ====================

    def mixing_sweep(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """lambda(alpha) of independently generated matrices per (method, N, C)"""
        config = self.config
        items = []
        for n in config.N:
            for spec in config.connectivity_specs(n):
                items.extend((spec, n, g) for g in range(config.graphs))

        def measure(item):
            spec, n, graph = item
            rng = StreamFactory(config.seed, graph).stream(0, StreamPurpose.GRAPH)
            matrix = build_matrix(ConnectivitySpec(spec.kind, spec.C), n, rng)
            regular = spec.kind in (ConnectivityKind.FIXED_REGULAR, ConnectivityKind.PER_STEP_REGULAR)
            return {
                'method': spec.kind.value,
                'N': n,
                'C': math.nan if spec.C is None else spec.C,
                'graph': graph,
                'lambda': mixing_constant(matrix, seed=graph, method=config.mixing_method),
                'lambda_exact': (circulant_mixing_constant(n, spec.C)
                                 if spec.kind is ConnectivityKind.LOCAL_EXCHANGE else math.nan),
                'alon_friedman': alon_friedman_limit(spec.C) if regular else math.nan,
            }

        raw = pd.DataFrame(self._map(measure, items))
        summary = MetricsProcessor.summary_frame(raw, ['method', 'N', 'C'], 'lambda')
        limits = raw.groupby(['method', 'N', 'C'], dropna=False)[['alon_friedman', 'lambda_exact']].first()
        summary = summary.merge(limits.reset_index(), on=['method', 'N', 'C'], how='left')
        return raw, summary

    def estimate_vs_c(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """Distribution of pi_hat_T(phi) per method and C, with the bootstrap"""
        raw = self._trace_frame(self._run_cells(include_bootstrap=True))
        final = raw[raw['t'] == self.model.horizon]
        summaries = []
        for phi in self.config.phi:
            summary = MetricsProcessor.summary_frame(final, ['method', 'N', 'C'], f'pi_hat_{phi}')
            summary.insert(3, 'phi', phi)
            summaries.append(summary)
        return raw, pd.concat(summaries, ignore_index=True)

    def wasserstein_vs_c(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """W1 between each final filter sample and a large reference bootstrap sample"""
        reference = self._reference().final
        reference_sample = WeightedSample(reference.states, reference.normalized_weights())
        rows = []
        for cell, trace in self._run_cells(include_bootstrap=True):
            method, n, c = cell.key
            sample = WeightedSample(trace.final.states, trace.final.normalized_weights())
            rows.append({'method': method, 'N': n, 'C': c, 'replicate': cell.replicate,
                         't': trace.final.t,
                         'wasserstein1': MetricsProcessor.wasserstein1(sample, reference_sample)})
        raw = pd.DataFrame(rows)
        return raw, MetricsProcessor.summary_frame(raw, ['method', 'N', 'C'], 'wasserstein1')

    def mse_study(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """
        Relative MSE against the bootstrap at the same N, per time index t = 1..T,
        of log Z_hat_t and of the predictive mean; summarised over t
        """
        reference = self._reference()
        truth = {'log_likelihood': reference.log_z_hat,
                 'predictive_mean': np.array([row.predictive_mean for row in reference.rows])}
        results = self._run_cells(include_bootstrap=True)
        groups = self._grouped(results)

        def targets(traces):
            return {'log_likelihood': np.stack([trace.log_z_hat for trace in traces]),
                    'predictive_mean': np.stack([[row.predictive_mean for row in trace.rows]
                                                 for trace in traces])}

        ratios = []
        for (method, n, c), traces in groups.items():
            if method == BOOTSTRAP:
                continue
            baseline = targets(self._baseline(groups, n))
            estimates = targets(traces)
            for target, values in estimates.items():
                for t in range(1, self.model.horizon + 1):
                    if not math.isfinite(truth[target][t]):
                        continue
                    ratios.append({
                        'method': method, 'N': n, 'C': c, 't': t, 'target': target,
                        'relative_mse': MetricsProcessor.relative_mse(
                            values[:, t], baseline[target][:, t], truth[target][t]),
                    })
        summary = MetricsProcessor.summary_frame(pd.DataFrame(ratios), ['method', 'N', 'C', 'target'],
                                                 'relative_mse')
        return self._trace_frame(results), summary

    @staticmethod
    def _baseline(groups: Dict[Tuple, List[FilterTrace]], n: int) -> List[FilterTrace]:
        for (method, size, _), traces in groups.items():
            if method == BOOTSTRAP and size == n:
                return traces
        raise RuntimeError(f"No bootstrap baseline for N={n}")

    def clt_check(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """Empirical N Var(gamma_hat_T(phi)) against the oracle asymptotic variance"""
        horizon = self.model.horizon
        results = self._run_cells(include_bootstrap=False)
        rows = []
        for cell, trace in results:
            method, n, c = cell.key
            final = trace.rows[-1]
            z_hat = math.exp(final.log_z_hat)
            for phi in self.config.phi:
                rows.append({'method': method, 'N': n, 'C': c, 'replicate': cell.replicate, 'phi': phi,
                             'gamma_hat': z_hat * final.pi_hat[phi], 'mu_hat': final.mu_hat[phi]})
        raw = pd.DataFrame(rows)

        oracles: Dict[float, OracleEngine] = {}
        summary = []
        for (method, n, c, phi), group in raw.groupby(['method', 'N', 'C', 'phi'], sort=True, dropna=False):
            connectivity = math.inf if math.isnan(c) else float(c)
            if connectivity not in oracles:
                oracles[connectivity] = OracleEngine(self.model, self.config.phi, C=connectivity)
                oracles[connectivity].run(horizon)
            oracle = oracles[connectivity]
            state = oracle.states[horizon]
            phi_fn = get_test_functions([phi])[0]
            v_gamma = state.V_gamma[phi]
            empirical = n * float(group['gamma_hat'].var(ddof=1)) if len(group) > 1 else math.nan
            summary.append({
                'method': method, 'N': n, 'C': c, 'phi': phi, 'count': len(group),
                'gamma_hat_mean': float(group['gamma_hat'].mean()),
                'gamma_exact': state.Z * oracle.integrate(state.pi, phi_fn),
                'empirical_variance': empirical,
                'V_gamma': v_gamma,
                'relative_error': abs(empirical - v_gamma) / v_gamma if v_gamma > 0 else math.nan,
                'mu_hat_mean': float(group['mu_hat'].mean()),
                'mu_exact': oracle.integrate(state.mu, phi_fn),
            })
        return raw, pd.DataFrame(summary)

    def density_compare(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """Unweighted final particle locations of each method and of the bootstrap"""
        frames = []
        for cell, trace in self._run_cells(include_bootstrap=True):
            method, n, c = cell.key
            frames.append(pd.DataFrame({
                'method': method, 'N': n, 'C': c, 'replicate': cell.replicate,
                'particle': np.arange(trace.final.n), 'state': trace.final.states,
                'weight': trace.final.normalized_weights(),
            }))
        raw = pd.concat(frames, ignore_index=True)
        return raw, MetricsProcessor.summary_frame(raw, ['method', 'N', 'C'], 'state')

    STUDIES = {
        ExperimentKind.MIXING_SWEEP: mixing_sweep,
        ExperimentKind.ESTIMATE_VS_C: estimate_vs_c,
        ExperimentKind.WASSERSTEIN_VS_C: wasserstein_vs_c,
        ExperimentKind.MSE_VS_C: mse_study,
        ExperimentKind.MSE_VS_N: mse_study,
        ExperimentKind.CLT_CHECK: clt_check,
        ExperimentKind.DENSITY_COMPARE: density_compare,
    }

    # ==================== Outputs ====================

    def run(self, out_dir: Optional[str] = None) -> Dict[str, Any]:
        """
        Run the study and write raw.csv, summary.csv and manifest.json

        Files are written to temporaries in the output directory and renamed
        into place only once all three are complete. Any previous manifest is
        removed first and the new one is renamed last, so a manifest.json
        present next to the CSVs always describes them.

        Returns:
            Dict with output paths, config hash and wall time
        """
        config = self.config
        out_path = Path(out_dir or config.out)
        logger.info("Starting %s experiment (hash %s) with %d threads",
                    config.experiment.value, config.config_hash()[:12], self.threads)
        started = time.perf_counter()
        raw, summary = self.STUDIES[config.experiment](self)
        wall_time = time.perf_counter() - started

        manifest = {
            'config': config.to_dict(),
            'config_hash': config.config_hash(),
            'seed': config.seed,
            'code_version': CODE_VERSION,
            'wall_time_seconds': wall_time,
            'threads': self.threads,
            'rows': {'raw': len(raw), 'summary': len(summary)},
        }

        out_path.mkdir(parents=True, exist_ok=True)
        outputs = {
            'raw': out_path / self.RAW_FILE,
            'summary': out_path / self.SUMMARY_FILE,
            'manifest': out_path / self.MANIFEST_FILE,
        }
        writers = {
            'raw': lambda f: raw.to_csv(f, index=False, float_format='%.17g'),
            'summary': lambda f: summary.to_csv(f, index=False, float_format='%.17g'),
            'manifest': lambda f: json.dump(manifest, f, indent=2, ensure_ascii=False),
        }
        temporaries = {}
        try:
            for name, writer in writers.items():
                fd, temporary = tempfile.mkstemp(dir=out_path, prefix=f'.{name}-', suffix='.tmp')
                temporaries[name] = temporary
                with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
                    writer(f)
            if outputs['manifest'].exists():
                outputs['manifest'].unlink()
            for name in ('raw', 'summary', 'manifest'):
                os.replace(temporaries[name], outputs[name])
        finally:
            for temporary in temporaries.values():
                if os.path.exists(temporary):
                    os.remove(temporary)

        logger.info("Finished %s in %.2fs; outputs in %s", config.experiment.value, wall_time, out_path)
        return {
            'config_hash': manifest['config_hash'],
            'wall_time_seconds': wall_time,
            'outputs': {name: str(path) for name, path in outputs.items()},
            'rows': manifest['rows'],
        }


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None,
                   threads: Optional[int] = None) -> Dict[str, Any]:
    """Run one experiment and write its outputs"""
    return ExperimentRunner(config, threads=threads).run(out_dir)


class BatchStatus(Enum):
    """Status of a batch job"""
    PENDING = 'pending'
    PROCESSING = 'processing'
    COMPLETED = 'completed'
    FAILED = 'failed'
    CANCELLED = 'cancelled'


@dataclass
class BatchJob:
    """Represents one experiment job"""
    job_id: str
    job_type: str  # experiment kind
    config: ExperimentConfig
    status: BatchStatus
    progress: int
    total: int
    results: List[Dict]
    errors: List[Dict]
    options: Dict


class BatchProcessor:
    """Tracks experiment jobs"""

    # Maximum concurrent workers per experiment
    MAX_WORKERS = 4

    def __init__(self):
        self._jobs: Dict[str, BatchJob] = {}
        self._job_counter = 0
        self._lock = threading.Lock()

    def _generate_job_id(self) -> str:
        with self._lock:
            self._job_counter += 1
            return f"batch_{self._job_counter}"

    def create_job(self, config: Dict[str, Any], options: Optional[Dict] = None) -> str:
        """
        Create a new experiment job

        Args:
            config: Experiment config document
            options: 'threads' and 'out_dir' overrides

        Returns:
            job_id for tracking

        Raises:
            ConfigError: If the config is invalid or infeasible
        """
        experiment = ExperimentConfig.from_dict(config)
        job_id = self._generate_job_id()
        self._jobs[job_id] = BatchJob(
            job_id=job_id,
            job_type=experiment.experiment.value,
            config=experiment,
            status=BatchStatus.PENDING,
            progress=0,
            total=0,
            results=[],
            errors=[],
            options=options or {},
        )
        logger.info("Created job %s (%s)", job_id, experiment.experiment.value)
        return job_id

    def get_job(self, job_id: str) -> Optional[Dict]:
        """Get job status and results"""
        job = self._jobs.get(job_id)
        if not job:
            return None

        return {
            'job_id': job.job_id,
            'job_type': job.job_type,
            'status': job.status.value,
            'progress': job.progress,
            'total': job.total,
            'percent': round(job.progress / job.total * 100, 1) if job.total > 0 else 0,
            'config_hash': job.config.config_hash(),
            'results_count': len(job.results),
            'errors_count': len(job.errors),
            'results': job.results,
            'errors': job.errors,
        }

    def process_experiment_batch(self, job_id: str) -> Dict:
        """
        Run an experiment job to completion

        Args:
            job_id: Job ID

        Returns:
            Final job status
        """
        job = self._jobs.get(job_id)
        if not job:
            return {'error': 'Job not found'}
        if job.status is not BatchStatus.PENDING:
            return self.get_job(job_id)

        job.status = BatchStatus.PROCESSING

        def progress(done, total):
            job.progress, job.total = done, total

        runner = ExperimentRunner(job.config, threads=job.options.get('threads'), progress=progress,
                                  should_stop=lambda: job.status is BatchStatus.CANCELLED)
        try:
            job.results.append(runner.run(job.options.get('out_dir')))
            job.status = BatchStatus.COMPLETED
        except ExperimentCancelled:
            logger.info("Job %s cancelled", job_id)
        except Exception as e:
            logger.exception("Job %s failed", job_id)
            job.errors.append({'error': str(e), 'type': type(e).__name__})
            job.status = BatchStatus.FAILED

        return self.get_job(job_id)

    def cancel_job(self, job_id: str) -> bool:
        """Cancel a pending or running job"""
        job = self._jobs.get(job_id)
        if not job:
            return False

        if job.status in [BatchStatus.PENDING, BatchStatus.PROCESSING]:
            job.status = BatchStatus.CANCELLED
            return True
        return False

    def delete_job(self, job_id: str) -> bool:
        """Delete a job from memory"""
        if job_id in self._jobs:
            del self._jobs[job_id]
            return True
        return False

    def list_jobs(self) -> List[Dict]:
        """List all jobs"""
        return [self.get_job(job_id) for job_id in self._jobs.keys()]

    def export_results(self, job_id: str, output_dir: str = None) -> Dict:
        """
        Export a job summary as JSON

        Args:
            job_id: Job ID
            output_dir: Output directory (a temporary one if omitted)

        Returns:
            Dict with export info
        """
        job = self._jobs.get(job_id)
        if not job:
            return {'error': 'Job not found'}

        if output_dir is None:
            output_dir = tempfile.mkdtemp()
        os.makedirs(output_dir, exist_ok=True)

        combined_path = os.path.join(output_dir, f'{job_id}_results.json')
        with open(combined_path, 'w', encoding='utf-8') as f:
            json.dump({
                'job_id': job.job_id,
                'job_type': job.job_type,
                'status': job.status.value,
                'config': job.config.to_dict(),
                'config_hash': job.config.config_hash(),
                'results': job.results,
                'errors': job.errors,
            }, f, ensure_ascii=False, indent=2)

        return {
            'success': True,
            'output_dir': output_dir,
            'combined_file': combined_path,
            'total_exported': len(job.results),
        }
