"""Explored-set registry with running per-metric maxima and the summed
normalized fitness.

Fitness is computed lazily at comparison time: the normalization denominators
are the current maxima over everything explored so far, so a value computed
earlier can change once a new max-holder is registered.
"""

from __future__ import annotations

import math
import threading

from .errors import EmptyRegistry
from .metrics import MetricVector


def _is_usable_max(x: float) -> bool:
    # -inf sentinels and NaNs never become a normalization denominator
    return x == x and x != -math.inf


class ExploredRegistry:
    """Map canonical-hash -> MetricVector plus running maxima of each metric."""

    def __init__(self):
        self._store: dict[int, MetricVector] = {}
        self._lock = threading.Lock()
        self.max_log_synflow: float | None = None
        self.max_linear_regions: float | None = None
        self.max_skip: float | None = None

    def __len__(self):
        return len(self._store)

    def __contains__(self, key: int):
        return key in self._store

    def get(self, key: int) -> MetricVector | None:
        return self._store.get(key)

    def vectors(self):
        return list(self._store.values())

    def maxima(self) -> tuple[float | None, float | None, float | None]:
        """Consistent snapshot of the three running maxima."""
        with self._lock:
            return self.max_log_synflow, self.max_linear_regions, self.max_skip

    def register(self, key: int, vector: MetricVector):
        with self._lock:
            self._store[key] = vector
            if _is_usable_max(vector.log_synflow):
                if self.max_log_synflow is None or vector.log_synflow > self.max_log_synflow:
                    self.max_log_synflow = vector.log_synflow
            if _is_usable_max(vector.linear_regions):
                if self.max_linear_regions is None or vector.linear_regions > self.max_linear_regions:
                    self.max_linear_regions = vector.linear_regions
            if _is_usable_max(vector.skip_score):
                if self.max_skip is None or vector.skip_score > self.max_skip:
                    self.max_skip = vector.skip_score


def _term(value: float, current_max: float | None) -> float:
    if current_max is None or not math.isfinite(current_max) or current_max <= 0:
        return 0.0
    if value != value or value == -math.inf:
        return 0.0
    return value / current_max


def fitness(vector: MetricVector, registry: ExploredRegistry,
            use_log_synflow: bool = True, use_linear_regions: bool = True,
            use_skip: bool = True) -> float:
    """Sum of per-metric scores normalized by the explored-set maxima.

    A term is zero when disabled, when its metric is the singular sentinel,
    or when its current maximum is non-positive or non-finite. Individual
    terms may be negative (a negative log-det under a positive maximum).
    """
    if len(registry) == 0:
        raise EmptyRegistry("no vectors registered yet")
    max_ls, max_lr, max_skip = registry.maxima()
    total = 0.0
    if use_log_synflow:
        total += _term(vector.log_synflow, max_ls)
    if use_linear_regions:
        total += _term(vector.linear_regions, max_lr)
    if use_skip:
        total += _term(vector.skip_score, max_skip)
    return total
