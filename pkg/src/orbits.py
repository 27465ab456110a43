"""
Orbit generation, observable traces and Birkhoff statistics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from src.dynamics import ExceptionalSetError, MapSystem

logger = logging.getLogger(__name__)

# orbits closer than this to S stop instead of producing -inf logs
MIN_DISTANCE = 1e-300

OBSERVABLES = ("inv-deriv", "neg-log-dist")


class OrbitTerminatedError(RuntimeError):
    """The orbit came within MIN_DISTANCE of the exceptional set."""

    def __init__(self, completed_steps: int, trace: "OrbitTrace"):
        self.completed_steps = completed_steps
        self.trace = trace
        super().__init__(f"orbit reached the exceptional set after {completed_steps} completed steps "
                         f"(x = {trace.x[-1]!r})")


@dataclass(frozen=True)
class OrbitTrace:
    """
    Orbit x_0..x_N together with the per-step observables.

    a_j = log||Df(x_j)^-1|| and r_j = log dist_delta(x_j, S) for j < N.
    """
    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    delta: float

    def __post_init__(self):
        if len(self.x) != len(self.a) + 1 or len(self.a) != len(self.r):
            raise ValueError(f"inconsistent trace lengths: x={len(self.x)} a={len(self.a)} r={len(self.r)}")

    @property
    def length(self) -> int:
        return len(self.a)

    def suffix(self, start: int) -> "OrbitTrace":
        """Trace of f^start(x_0), sharing the stored observables."""
        if not 0 <= start <= self.length:
            raise ValueError(f"suffix start {start} outside [0, {self.length}]")
        return OrbitTrace(x=self.x[start:], a=self.a[start:], r=self.r[start:], delta=self.delta)

    def prefix(self, length: int) -> "OrbitTrace":
        if not 0 <= length <= self.length:
            raise ValueError(f"prefix length {length} outside [0, {self.length}]")
        return OrbitTrace(x=self.x[:length + 1], a=self.a[:length], r=self.r[:length], delta=self.delta)


class CompensatedSum:
    """
    Neumaier running sum over arrays of independent accumulators.

    The vector update performs the same floating-point operations as
    compensated_prefix_sums does on scalars, so both give identical bits.
    """

    def __init__(self, shape=()):
        self.total = np.zeros(shape)
        self.compensation = np.zeros(shape)

    def add(self, values: np.ndarray) -> None:
        t = self.total + values
        big = np.abs(self.total) >= np.abs(values)
        self.compensation = self.compensation + np.where(big, (self.total - t) + values, (values - t) + self.total)
        self.total = t

    @property
    def value(self) -> np.ndarray:
        return self.total + self.compensation

    def compress(self, keep: np.ndarray) -> None:
        self.total = self.total[keep]
        self.compensation = self.compensation[keep]


def compensated_prefix_sums(values) -> np.ndarray:
    """Prefix sums S_0 = 0, S_n = sum_{j<n} values_j with Neumaier compensation."""
    total = 0.0
    compensation = 0.0
    out = [0.0]
    for v in np.asarray(values, dtype=float).tolist():
        t = total + v
        if abs(total) >= abs(v):
            compensation += (total - t) + v
        else:
            compensation += (v - t) + total
        total = t
        out.append(total + compensation)
    return np.asarray(out)


def truncate_distance(dist: np.ndarray, delta: float) -> np.ndarray:
    """dist where dist <= delta, else 1."""
    return np.where(dist <= delta, dist, 1.0)


def dist_truncated(x, map_system: MapSystem, delta: float):
    """The delta-truncated distance from x to S (1 when S is empty)."""
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    dist = np.asarray(map_system.dist_to_S(x), dtype=float)
    if np.any(dist == 0.0):
        raise ExceptionalSetError("point lies on the exceptional set")
    out = truncate_distance(dist, delta)
    return float(out) if out.ndim == 0 else out


def log_truncated_distance(dist: np.ndarray, delta: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(dist <= delta, np.log(dist), 0.0)


@dataclass
class EnsembleStep:
    """Observables of one lock-step iterate of an ensemble."""
    j: int
    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    alive: np.ndarray
    newly_dropped: np.ndarray


def iterate_ensemble(map_system: MapSystem, x0, steps: int, delta: float) -> Iterator[EnsembleStep]:
    """
    Step a whole ensemble forward, yielding (x_j, a_j, r_j) for j < steps.

    Points that come within MIN_DISTANCE of S are marked dead; their
    observables are reported as 0 from then on and consumers must mask
    them with `alive`.
    """
    x = np.array(x0, dtype=float, ndmin=1)
    alive = np.ones(x.shape, dtype=bool)
    for j in range(steps):
        dist = np.asarray(map_system.dist_to_S(x), dtype=float)
        hit = alive & (dist < MIN_DISTANCE)
        if np.any(hit):
            alive = alive & ~hit
            # park dead points somewhere harmless
            x = np.where(alive, x, 0.5)
            dist = np.where(alive, dist, 0.5)
        a = np.where(alive, np.asarray(map_system.log_inv_deriv_norm(x), dtype=float), 0.0)
        r = np.where(alive, log_truncated_distance(dist, delta), 0.0)
        yield EnsembleStep(j=j, x=x, a=a, r=r, alive=alive, newly_dropped=hit)
        x = np.asarray(map_system.eval(x), dtype=float)


def generate_orbit(map_system: MapSystem, x0: float, N: int, delta: float) -> OrbitTrace:
    """Forward orbit of x0 with N steps of observables."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if float(map_system.dist_to_S(x0)) <= 0.0:
        raise ExceptionalSetError(f"x0 = {x0!r} lies on the exceptional set")

    xs = np.empty(N + 1)
    a = np.empty(N)
    r = np.empty(N)
    last = float(x0)
    for step in iterate_ensemble(map_system, [x0], N, delta):
        j = step.j
        if not step.alive[0]:
            partial = OrbitTrace(x=np.append(xs[:j], last), a=a[:j].copy(), r=r[:j].copy(), delta=delta)
            raise OrbitTerminatedError(j, partial)
        xs[j] = step.x[0]
        a[j] = step.a[0]
        r[j] = step.r[0]
        last = map_system.eval(step.x)[0]
    xs[N] = last
    return OrbitTrace(x=xs, a=a, r=r, delta=delta)


def birkhoff_average(trace: OrbitTrace, observable: str, n: int) -> float:
    """Time average of a_j ("inv-deriv") or -r_j ("neg-log-dist") over j < n."""
    if observable not in OBSERVABLES:
        raise ValueError(f"unknown observable '{observable}', expected one of {OBSERVABLES}")
    if not 1 <= n <= trace.length:
        raise ValueError(f"n = {n} outside [1, {trace.length}]")
    values = trace.a[:n] if observable == "inv-deriv" else -trace.r[:n]
    return math.fsum(values.tolist()) / n


@dataclass(frozen=True)
class EnsembleSpec:
    """Initial points: stratified midpoint grid or seeded PCG64 sample."""
    kind: str = "grid"
    size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("grid", "random"):
            raise ValueError(f"ensemble kind must be 'grid' or 'random', got '{self.kind}'")
        if self.size < 1:
            raise ValueError("ensemble size must be positive")

    def points(self) -> np.ndarray:
        if self.kind == "grid":
            return -1.0 + (np.arange(self.size) + 0.5) * (2.0 / self.size)
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-1.0, 1.0, self.size)


@dataclass
class EnsembleTraces:
    """Traces of every ensemble point that survived, indexed by point."""
    traces: List[OrbitTrace]
    indices: np.ndarray
    x0: np.ndarray
    dropped: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __len__(self) -> int:
        return len(self.traces)


def generate_traces(map_system: MapSystem, ensemble: EnsembleSpec, N: int, delta: float) -> EnsembleTraces:
    """Traces of length N for every ensemble point, in point-index order."""
    x0 = ensemble.points()
    xs = np.empty((N + 1, x0.size))
    a = np.empty((N, x0.size))
    r = np.empty((N, x0.size))
    alive = np.ones(x0.size, dtype=bool)
    last = x0
    for step in iterate_ensemble(map_system, x0, N, delta):
        xs[step.j], a[step.j], r[step.j] = step.x, step.a, step.r
        alive = step.alive
        last = np.asarray(map_system.eval(step.x))
    xs[N] = last

    indices = np.flatnonzero(alive)
    dropped = np.flatnonzero(~alive)
    if dropped.size:
        logger.warning("%d of %d points reached the exceptional set and were dropped", dropped.size, x0.size)
    traces = [OrbitTrace(x=xs[:, i].copy(), a=a[:, i].copy(), r=r[:, i].copy(), delta=delta) for i in indices]
    return EnsembleTraces(traces=traces, indices=indices, x0=x0, dropped=dropped)


def ensemble_birkhoff_averages(map_system: MapSystem, ensemble: EnsembleSpec, horizon: int,
                               observable: str = "inv-deriv", delta: float = 1.0,
                               x0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-point Birkhoff averages at `horizon`, streamed without storing orbits.

    Dropped points come back as NaN.
    """
    if observable not in OBSERVABLES:
        raise ValueError(f"unknown observable '{observable}', expected one of {OBSERVABLES}")
    points = ensemble.points() if x0 is None else np.asarray(x0, dtype=float)
    acc = CompensatedSum(points.shape)
    alive = np.ones(points.shape, dtype=bool)
    for step in iterate_ensemble(map_system, points, horizon, delta):
        acc.add(step.a if observable == "inv-deriv" else -step.r)
        alive = step.alive
        if step.j and step.j % 10_000 == 0:
            logger.debug("birkhoff averages: step %d of %d", step.j, horizon)
    return np.where(alive, acc.value / horizon, np.nan)
