"""
Metrics Processor for alpha-SMC experiments
Handles MSE ratios, Wasserstein distances and quantile summaries
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import wasserstein_distance

logger = logging.getLogger(__name__)


class MetricsError(ValueError):
    """Empty or mismatched metric inputs"""


@dataclass(frozen=True)
class WeightedSample:
    """1-d weighted empirical measure"""
    values: np.ndarray
    weights: np.ndarray

    NORMALIZATION_TOL = 1e-12

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if values.ndim != 1 or values.shape != weights.shape:
            raise MetricsError(f"Values {values.shape} and weights {weights.shape} must be matching vectors")
        if values.size == 0:
            raise MetricsError("Weighted sample is empty")
        if not np.all(np.isfinite(values)):
            raise MetricsError("Sample values must be finite")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > self.NORMALIZATION_TOL:
            raise MetricsError("Weights must be non-negative and sum to 1")
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def from_unnormalized(cls, values, weights) -> 'WeightedSample':
        weights = np.asarray(weights, dtype=float)
        return cls(values, weights / weights.sum())

    @classmethod
    def uniform(cls, values) -> 'WeightedSample':
        values = np.asarray(values, dtype=float)
        return cls(values, np.full(values.shape[0], 1.0 / max(values.shape[0], 1)))


@dataclass(frozen=True)
class SummaryRow:
    """Quantile summary of one group"""
    key: Tuple[Any, ...]
    median: float
    q05: float
    q95: float
    mean: float
    count: int


class MetricsProcessor:
    """Statistical post-processing of replicate estimates"""

    QUANTILES = (0.05, 0.5, 0.95)

    @staticmethod
    def wasserstein1(a: WeightedSample, b: WeightedSample) -> float:
        """
        Exact W1 between two 1-d weighted samples

        Integrates |F_a - F_b| between the merged sorted supports.
        """
        return float(wasserstein_distance(a.values, b.values, a.weights, b.weights))

    @staticmethod
    def mse(estimates: Sequence[float], truth: float) -> float:
        estimates = np.asarray(estimates, dtype=float)
        if estimates.size == 0:
            raise MetricsError("No estimates")
        return float(np.mean((estimates - truth) ** 2))

    @staticmethod
    def relative_mse(method_estimates: Sequence[float], baseline_estimates: Sequence[float],
                     truth: float) -> float:
        """
        Ratio of the squared error sums of a method and a baseline

        Returns:
            sum (x_r - truth)^2 / sum (b_r - truth)^2, or inf if the baseline is exact

        Raises:
            MetricsError: On empty or mismatched inputs, or a non-finite truth
        """
        method = np.asarray(method_estimates, dtype=float)
        baseline = np.asarray(baseline_estimates, dtype=float)
        if method.size == 0 or baseline.size == 0:
            raise MetricsError("Relative MSE needs non-empty estimates")
        if method.shape != baseline.shape:
            raise MetricsError(f"Replicate counts differ: {method.size} vs {baseline.size}")
        if not math.isfinite(truth):
            raise MetricsError(f"Truth must be finite, got {truth}")
        baseline_error = float(np.sum((baseline - truth) ** 2))
        if baseline_error == 0.0:
            return math.inf
        return float(np.sum((method - truth) ** 2)) / baseline_error

    @classmethod
    def summarize(cls, records: Iterable[Mapping[str, Any]], group_key: Sequence[str],
                  value: str = 'value') -> List[SummaryRow]:
        """
        Median, 5% and 95% quantiles (linear interpolation) per group

        Args:
            records: Flat records, e.g. rows of a raw results table
            group_key: Fields identifying a group, e.g. ('method', 'C', 'N', 't')
            value: Field to summarise

        Returns:
            One SummaryRow per group, sorted by key
        """
        frame = cls.summary_frame(pd.DataFrame(list(records)), group_key, value)
        return [
            SummaryRow(key=tuple(row[k] for k in group_key), median=row['median'], q05=row['q05'],
                       q95=row['q95'], mean=row['mean'], count=int(row['count']))
            for row in frame.to_dict('records')
        ]

    @classmethod
    def summary_frame(cls, frame: pd.DataFrame, group_key: Sequence[str], value: str = 'value') -> pd.DataFrame:
        """Same as summarize() on a DataFrame; returns a DataFrame"""
        group_key = list(group_key)
        if frame.empty or value not in frame:
            raise MetricsError(f"No '{value}' values to summarise")
        frame = frame.dropna(subset=[value])
        if frame.empty:
            raise MetricsError(f"Every '{value}' value is missing")
        grouped = frame.groupby(group_key, sort=True, dropna=False)[value]
        summary = pd.DataFrame({
            'median': grouped.quantile(0.5, interpolation='linear'),
            'q05': grouped.quantile(0.05, interpolation='linear'),
            'q95': grouped.quantile(0.95, interpolation='linear'),
            'mean': grouped.mean(),
            'count': grouped.size(),
        }).reset_index()
        logger.debug("Summarised %d records into %d groups", len(frame), len(summary))
        return summary


def wasserstein1(a: WeightedSample, b: WeightedSample) -> float:
    return MetricsProcessor.wasserstein1(a, b)


def relative_mse(method_estimates, baseline_estimates, truth: float) -> float:
    return MetricsProcessor.relative_mse(method_estimates, baseline_estimates, truth)


def summarize(records, group_key, value: str = 'value') -> List[SummaryRow]:
    return MetricsProcessor.summarize(records, group_key, value)
