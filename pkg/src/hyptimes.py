"""
Detection of (sigma, delta)-hyperbolic times.

An iterate n is a hyperbolic time for x when, for every 1 <= k <= n,

    sum_{j=n-k}^{n-1} a_j <= k log(sigma)      (backward contraction)
    r_{n-k} >= b k log(sigma)                  (no close approach to S)

Derivative sums are always formed from the centred increments
a_j - log(sigma), so a window passes when its centred sum is <= 0.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.dynamics import ExceptionalSetError, MapSystem
from src.orbits import (
    MIN_DISTANCE,
    CompensatedSum,
    EnsembleSpec,
    OrbitTerminatedError,
    OrbitTrace,
    compensated_prefix_sums,
    iterate_ensemble,
    log_truncated_distance,
)

logger = logging.getLogger(__name__)


class ParameterMismatchError(ValueError):
    """The trace was generated with a different truncation level."""


@dataclass(frozen=True)
class HyperbolicParams:
    sigma: float
    delta: float
    b: float
    beta: float
    tolerance: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.b <= 0.0:
            raise ValueError(f"b must be positive, got {self.b}")
        bound = min(0.5, 1.0 / (4.0 * self.beta))
        if not self.b < bound:
            raise ValueError(f"b < min(1/2, 1/(4*beta)) violated: b = {self.b} but min(1/2, 1/(4*{self.beta})) = {bound}")
        if self.tolerance < 0.0:
            raise ValueError("tolerance must be non-negative")

    @property
    def log_sigma(self) -> float:
        return math.log(self.sigma)

    @property
    def c(self) -> float:
        return -self.log_sigma

    @property
    def bc(self) -> float:
        return self.b * self.c


@dataclass(frozen=True)
class HypTimesResult:
    """Hyperbolic times of one trace up to its length N."""
    times: np.ndarray
    N: int

    @property
    def first(self) -> Optional[int]:
        """Smallest hyperbolic time, or None when censored at N."""
        return int(self.times[0]) if self.times.size else None

    @property
    def censored(self) -> bool:
        return self.times.size == 0

    def count_at(self, n: int) -> int:
        """l(n): number of hyperbolic times <= n."""
        if not 0 <= n <= self.N:
            raise ValueError(f"n = {n} outside [0, {self.N}]")
        return int(np.searchsorted(self.times, n, side="right"))

    def frequency_at(self, n: int) -> float:
        """l(n) / n for 1 <= n <= N."""
        if n < 1:
            raise ValueError(f"frequency needs n >= 1, got {n}")
        return self.count_at(n) / n

    def __eq__(self, other) -> bool:
        if not isinstance(other, HypTimesResult):
            return NotImplemented
        return self.N == other.N and np.array_equal(self.times, other.times)


def _check_delta(trace: OrbitTrace, params: HyperbolicParams) -> None:
    if trace.delta != params.delta:
        raise ParameterMismatchError(f"trace delta {trace.delta} differs from params delta {params.delta}")


def detect_brute(trace: OrbitTrace, params: HyperbolicParams) -> HypTimesResult:
    """Check every (n, k) pair directly; O(N^2), used as the oracle."""
    _check_delta(trace, params)
    centred = (trace.a - params.log_sigma).tolist()
    r = trace.r.tolist()
    tol = params.tolerance
    bar = params.b * params.log_sigma
    times = []
    for n in range(1, trace.length + 1):
        total = 0.0
        compensation = 0.0
        admissible = True
        for k in range(1, n + 1):
            v = centred[n - k]
            t = total + v
            if abs(total) >= abs(v):
                compensation += (total - t) + v
            else:
                compensation += (v - t) + total
            total = t
            if total + compensation > tol or r[n - k] + tol < bar * k:
                admissible = False
                break
        if admissible:
            times.append(n)
    return HypTimesResult(times=np.asarray(times, dtype=int), N=trace.length)


def recurrence_thresholds(r: np.ndarray, params: HyperbolicParams) -> np.ndarray:
    """Per-step wait ceil(-r_m / (b c)) before the recurrence bar clears."""
    return np.ceil((-r - params.tolerance) / params.bc)


def detect_fast(trace: OrbitTrace, params: HyperbolicParams) -> HypTimesResult:
    """
    O(N) detection with two running scans.

    With T_n the prefix sums of a_j - log(sigma), n passes the derivative
    condition iff T_n <= min_{m<n} T_m, and the recurrence condition iff
    n >= max_{m<n} (m + ceil(-r_m / (b c))).
    """
    _check_delta(trace, params)
    N = trace.length
    T = compensated_prefix_sums(trace.a - params.log_sigma)
    lowest = np.minimum.accumulate(T)[:-1]
    derivative_ok = T[1:] <= lowest + params.tolerance

    wait = np.arange(N) + recurrence_thresholds(trace.r, params)
    blocked_until = np.maximum.accumulate(wait)
    recurrence_ok = np.arange(1, N + 1) >= blocked_until

    times = np.flatnonzero(derivative_ok & recurrence_ok) + 1
    return HypTimesResult(times=times.astype(int), N=N)


def detect(trace: OrbitTrace, params: HyperbolicParams) -> HypTimesResult:
    return detect_fast(trace, params)


class HyperbolicTimeScanner:
    """
    Streaming version of detect_fast over a vector of orbits.

    Feed the observables of step m = 0, 1, ... to update(); it returns
    which orbits have n = m + 1 as a hyperbolic time.
    """

    def __init__(self, params: HyperbolicParams, size: int):
        self.params = params
        self.n = 0
        self._sum = CompensatedSum((size,))
        self._lowest = np.zeros(size)
        self._blocked_until = np.full(size, -np.inf)

    def update(self, a: np.ndarray, r: np.ndarray) -> np.ndarray:
        p = self.params
        self._blocked_until = np.maximum(self._blocked_until, self.n + recurrence_thresholds(r, p))
        self._sum.add(a - p.log_sigma)
        T = self._sum.value
        self.n += 1
        hyperbolic = (T <= self._lowest + p.tolerance) & (self.n >= self._blocked_until)
        self._lowest = np.minimum(self._lowest, T)
        return hyperbolic

    def compress(self, keep: np.ndarray) -> None:
        self._sum.compress(keep)
        self._lowest = self._lowest[keep]
        self._blocked_until = self._blocked_until[keep]


@dataclass(frozen=True)
class FirstHyperbolicTime:
    time: Optional[int]
    horizon: int

    @property
    def censored(self) -> bool:
        return self.time is None


def first_hyperbolic_time(map_system: MapSystem, x0: float, params: HyperbolicParams,
                          horizon: int) -> FirstHyperbolicTime:
    """Iterate x0 until its first hyperbolic time or the horizon, whichever comes first."""
    if float(map_system.dist_to_S(x0)) <= 0.0:
        raise ExceptionalSetError(f"x0 = {x0!r} lies on the exceptional set")
    scanner = HyperbolicTimeScanner(params, 1)
    xs: List[float] = []
    a: List[float] = []
    r: List[float] = []
    for step in iterate_ensemble(map_system, [x0], horizon, params.delta):
        if not step.alive[0]:
            xs.append(float(map_system.eval(xs[-1])) if xs else float(x0))
            partial = OrbitTrace(x=np.asarray(xs), a=np.asarray(a), r=np.asarray(r), delta=params.delta)
            raise OrbitTerminatedError(step.j, partial)
        xs.append(float(step.x[0]))
        a.append(float(step.a[0]))
        r.append(float(step.r[0]))
        if scanner.update(step.a, step.r)[0]:
            return FirstHyperbolicTime(time=scanner.n, horizon=horizon)
    return FirstHyperbolicTime(time=None, horizon=horizon)


def escape_time(map_system: MapSystem, x0: float, params: HyperbolicParams, horizon: int) -> Optional[int]:
    """
    First j with a_j <= log(sigma), i.e. |f'(x_j)| >= 1/sigma.

    The last step before any hyperbolic time must expand by 1/sigma, so
    h(x0) >= escape_time + 1. None when no such j < horizon exists.
    """
    for step in iterate_ensemble(map_system, [x0], horizon, params.delta):
        if step.alive[0] and step.a[0] <= params.log_sigma:
            return step.j
    return None


def geometric_schedule(horizon: int) -> List[int]:
    """1, 10, 100, ... up to the horizon, with the horizon itself appended."""
    schedule = []
    n = 1
    while n <= horizon:
        schedule.append(n)
        n *= 10
    if schedule[-1] != horizon:
        schedule.append(horizon)
    return schedule


@dataclass
class FirstTimeDistribution:
    """
    Histogram of first hyperbolic times over an ensemble.

    first_times holds h per kept point, -1 when censored at the horizon.
    """
    histogram: Dict[int, int]
    censored: int
    horizon: int
    sample_size: int
    first_times: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    dropped: int = 0

    def __post_init__(self):
        if sum(self.histogram.values()) + self.censored != self.sample_size:
            raise ValueError("histogram and censored counts do not add up to the sample size")

    @classmethod
    def from_first_times(cls, first_times: np.ndarray, horizon: int, dropped: int = 0) -> "FirstTimeDistribution":
        first_times = np.asarray(first_times, dtype=int)
        found = first_times[first_times > 0]
        values, counts = np.unique(found, return_counts=True)
        return cls(
            histogram={int(k): int(c) for k, c in zip(values, counts)},
            censored=int(np.count_nonzero(first_times <= 0)),
            horizon=horizon,
            sample_size=int(first_times.size),
            first_times=first_times,
            dropped=dropped,
        )

    def mass(self, k: int) -> float:
        """Empirical m(H_k*)."""
        return self.histogram.get(k, 0) / self.sample_size

    def survival(self, n: int) -> float:
        """Empirical P(h > n) for n <= horizon; censored points count as h > horizon."""
        if n > self.horizon:
            raise ValueError(f"survival beyond the horizon {self.horizon} is unknown")
        above = sum(c for k, c in self.histogram.items() if k > n)
        return (above + self.censored) / self.sample_size

    def truncated_mean(self, n: int, exclude_censored: bool = False) -> float:
        """E[min(h, n)]; censored points enter as min(horizon+, n) = n unless excluded."""
        if n > self.horizon:
            raise ValueError(f"truncated mean beyond the horizon {self.horizon} is unknown")
        total = sum(min(k, n) * c for k, c in self.histogram.items())
        if exclude_censored:
            uncensored = self.sample_size - self.censored
            return total / uncensored if uncensored else float("nan")
        return (total + n * self.censored) / self.sample_size

    def truncated_means(self, schedule: Optional[Sequence[int]] = None,
                        exclude_censored: bool = False) -> Dict[int, float]:
        schedule = geometric_schedule(self.horizon) if schedule is None else schedule
        return {int(n): self.truncated_mean(int(n), exclude_censored) for n in schedule}


def first_time_distribution(map_system: MapSystem, ensemble: EnsembleSpec, params: HyperbolicParams,
                            horizon: int, x0: Optional[np.ndarray] = None) -> FirstTimeDistribution:
    """
    First hyperbolic times of a whole ensemble, streamed in lock step.

    Orbits leave the active set as soon as their first time is found;
    orbits that reach S first are dropped and counted.
    """
    points = ensemble.points() if x0 is None else np.asarray(x0, dtype=float)
    x = points.copy()
    index = np.arange(points.size)
    first = np.full(points.size, -1, dtype=int)
    dropped = np.zeros(points.size, dtype=bool)
    scanner = HyperbolicTimeScanner(params, points.size)

    for j in range(horizon):
        if index.size == 0:
            break
        dist = np.asarray(map_system.dist_to_S(x), dtype=float)
        hit = dist < MIN_DISTANCE
        if np.any(hit):
            dropped[index[hit]] = True
            keep = ~hit
            x, dist, index = x[keep], dist[keep], index[keep]
            scanner.compress(keep)
        a = np.asarray(map_system.log_inv_deriv_norm(x), dtype=float)
        r = log_truncated_distance(dist, params.delta)
        hyperbolic = scanner.update(a, r)
        if np.any(hyperbolic):
            first[index[hyperbolic]] = scanner.n
            keep = ~hyperbolic
            x, index = x[keep], index[keep]
            scanner.compress(keep)
        x = np.asarray(map_system.eval(x), dtype=float)
        if j and j % 10_000 == 0:
            logger.debug("first times: step %d, %d orbits still active", j, index.size)

    n_dropped = int(np.count_nonzero(dropped))
    if n_dropped:
        logger.warning("%d points reached the exceptional set before a hyperbolic time", n_dropped)
    dist_ = FirstTimeDistribution.from_first_times(first[~dropped], horizon, dropped=n_dropped)
    logger.info("first-time distribution: %d points, %d censored at %d",
                dist_.sample_size, dist_.censored, horizon)
    return dist_


@dataclass
class SetStatistics:
    """Empirical masses of H_n and H_n* plus realised gap pairs (n, k)."""
    n_max: int
    sample_size: int
    hyperbolic_mass: np.ndarray
    first_mass: np.ndarray
    censored_fraction: float
    gap_counts: Dict[Tuple[int, int], int]

    def m_H(self, n: int) -> float:
        return float(self.hyperbolic_mass[n - 1])

    def m_H_star(self, n: int) -> float:
        return float(self.first_mass[n - 1])


def classify_sets(traces: Sequence[OrbitTrace], params: HyperbolicParams, n_max: int,
                  results: Optional[Sequence[HypTimesResult]] = None) -> SetStatistics:
    """
    Masses of H_n, H_n* for n <= n_max and counts of R_{n,k} membership.

    A pair (n, k) is counted when n <= n_max is a hyperbolic time and
    n + k is the next one.
    """
    if not traces:
        raise ValueError("classify_sets needs at least one trace")
    short = [t.length for t in traces if t.length < n_max]
    if short:
        raise ValueError(f"traces must have length >= n_max = {n_max}, shortest is {min(short)}")
    results = [detect_fast(t, params) for t in traces] if results is None else results

    hyperbolic = np.zeros(n_max)
    first = np.zeros(n_max)
    gaps: Dict[Tuple[int, int], int] = {}
    for result in results:
        times = result.times
        inside = times[times <= n_max]
        hyperbolic[inside - 1] += 1
        if inside.size:
            first[inside[0] - 1] += 1
        for n, nxt in zip(times[:-1], times[1:]):
            if n > n_max:
                break
            key = (int(n), int(nxt - n))
            gaps[key] = gaps.get(key, 0) + 1

    size = len(results)
    return SetStatistics(
        n_max=n_max,
        sample_size=size,
        hyperbolic_mass=hyperbolic / size,
        first_mass=first / size,
        censored_fraction=1.0 - float(first.sum()) / size,
        gap_counts=gaps,
    )


DEFAULT_THETAS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0)


@dataclass
class FrequencyReport:
    """
    Counts l(n) per point at each horizon.

    Frequencies are finite-horizon proxies for the liminf of l(n)/n.
    """
    point_index: np.ndarray
    x0: np.ndarray
    horizons: List[int]
    counts: np.ndarray
    first_times: np.ndarray
    thetas: Tuple[float, ...] = DEFAULT_THETAS

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / np.asarray(self.horizons, dtype=float)

    def fraction_at_least(self, theta: float, horizon: Optional[int] = None) -> float:
        column = self.horizons.index(horizon if horizon is not None else self.horizons[-1])
        freq = self.frequencies[:, column]
        return float(np.count_nonzero(freq >= theta)) / freq.size if freq.size else float("nan")

    def aggregate(self) -> Dict[int, Dict[float, float]]:
        return {h: {t: self.fraction_at_least(t, h) for t in self.thetas} for h in self.horizons}


def _validated_horizons(horizons: Sequence[int]) -> List[int]:
    horizons = sorted(int(h) for h in horizons)
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive")
    return horizons


def frequency_report(traces: Sequence[OrbitTrace], params: HyperbolicParams, horizons: Sequence[int],
                     thetas: Sequence[float] = DEFAULT_THETAS,
                     x0: Optional[np.ndarray] = None) -> FrequencyReport:
    """Frequencies of hyperbolic times for stored traces."""
    horizons = _validated_horizons(horizons)
    too_short = [t.length for t in traces if t.length < horizons[-1]]
    if too_short:
        raise ValueError(f"horizon {horizons[-1]} exceeds the shortest trace length {min(too_short)}")
    results = [detect_fast(t, params) for t in traces]
    counts = np.array([[res.count_at(h) for h in horizons] for res in results], dtype=int).reshape(len(results), len(horizons))
    first = np.array([res.first if res.first is not None else -1 for res in results], dtype=int)
    starts = np.array([t.x[0] for t in traces]) if x0 is None else np.asarray(x0)
    return FrequencyReport(point_index=np.arange(len(traces)), x0=starts, horizons=horizons,
                           counts=counts, first_times=first, thetas=tuple(thetas))


def stream_frequency_report(map_system: MapSystem, ensemble: EnsembleSpec, params: HyperbolicParams,
                            horizons: Sequence[int], thetas: Sequence[float] = DEFAULT_THETAS) -> FrequencyReport:
    """Same report as frequency_report, without storing the orbits."""
    horizons = _validated_horizons(horizons)
    points = ensemble.points()
    scanner = HyperbolicTimeScanner(params, points.size)
    running = np.zeros(points.size, dtype=int)
    first = np.full(points.size, -1, dtype=int)
    counts = np.zeros((points.size, len(horizons)), dtype=int)
    alive = np.ones(points.size, dtype=bool)
    column = 0
    for step in iterate_ensemble(map_system, points, horizons[-1], params.delta):
        alive = step.alive
        hyperbolic = scanner.update(step.a, step.r) & alive
        running += hyperbolic
        first = np.where((first < 0) & hyperbolic, scanner.n, first)
        while column < len(horizons) and horizons[column] == scanner.n:
            counts[:, column] = running
            column += 1
        if step.j and step.j % 10_000 == 0:
            logger.debug("frequencies: step %d of %d", step.j, horizons[-1])

    kept = np.flatnonzero(alive)
    if kept.size < points.size:
        logger.warning("%d points reached the exceptional set and were dropped", points.size - kept.size)
    return FrequencyReport(point_index=kept, x0=points[kept], horizons=horizons, counts=counts[kept],
                           first_times=first[kept], thetas=tuple(thetas))
