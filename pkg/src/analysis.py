"""
Quantitative checks for the intermittent circle example and for the
hyperbolic-time machinery in general.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from src.dynamics import MapSystem
from src.hyptimes import (
    FirstTimeDistribution,
    HyperbolicParams,
    HypTimesResult,
    detect_fast,
    geometric_schedule,
)
from src.orbits import (
    CompensatedSum,
    EnsembleSpec,
    OrbitTrace,
    compensated_prefix_sums,
    ensemble_birkhoff_averages,
    generate_traces,
    iterate_ensemble,
    truncate_distance,
)
from src.quadrature import (
    DEFAULT_SCHEDULE,
    QuadratureResult,
    circle_breakpoints,
    half_gaps,
    log_linear_integral,
    log_power_integral,
    refine,
    regular_integral,
    singular_integral,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- integrals

@dataclass
class LyapunovEstimate:
    value: float
    method: str
    refinements: List[float] = field(default_factory=list)
    spread: float = float("nan")
    sample_size: int = 0


def _lyapunov_quadrature(map_system: MapSystem, tol: float, schedule) -> QuadratureResult:
    func = map_system.log_inv_deriv_norm
    singular = {float(s) for s in map_system.exceptional_set}
    if -1.0 in singular:
        singular.add(1.0)
    cuts = circle_breakpoints(map_system.exceptional_set)

    def evaluate(levels: int, order: int) -> float:
        parts = []
        for u, v in zip(cuts[:-1], cuts[1:]):
            ends = []
            if u in singular and v in singular:
                ends = [(u, 1.0, (v - u) / 2.0), (v, -1.0, (v - u) / 2.0)]
            elif u in singular:
                ends = [(u, 1.0, v - u)]
            elif v in singular:
                ends = [(v, -1.0, v - u)]
            if not ends:
                parts.append(regular_integral(func, u, v, levels, order))
                continue
            for s, direction, width in ends:
                coef, const = map_system.singular_profile(s)
                parts.append(singular_integral(
                    lambda t, s=s, direction=direction: func(s + direction * t),
                    width,
                    lambda h, coef=coef, const=const: log_linear_integral(h, coef, const),
                    levels, order,
                ))
        # normalized Lebesgue measure has density 1/2 on [-1, 1)
        return 0.5 * math.fsum(parts)

    return refine(evaluate, tol, schedule)


def lyapunov_integral(map_system: MapSystem, method: str = "quadrature", tol: float = 1e-10,
                      schedule=DEFAULT_SCHEDULE, ensemble: Optional[EnsembleSpec] = None,
                      horizon: int = 100_000) -> LyapunovEstimate:
    """Integral of log||Df^-1|| against normalized Lebesgue measure."""
    if method == "quadrature":
        result = _lyapunov_quadrature(map_system, tol, schedule)
        logger.info("Lyapunov integral by quadrature for %s: %.12f", map_system.name, result.value)
        return LyapunovEstimate(value=result.value, method=method, refinements=result.refinements)
    if method == "ensemble":
        ensemble = ensemble or EnsembleSpec(kind="random", size=10_000, seed=0)
        averages = ensemble_birkhoff_averages(map_system, ensemble, horizon, "inv-deriv")
        kept = averages[np.isfinite(averages)]
        value = float(np.mean(kept))
        logger.info("Lyapunov Birkhoff proxy for %s: %.6f over %d points", map_system.name, value, kept.size)
        return LyapunovEstimate(value=value, method=method, spread=float(np.std(kept)), sample_size=int(kept.size))
    raise ValueError(f"unknown method '{method}', expected 'quadrature' or 'ensemble'")


def log_dist_moment(map_system: MapSystem, p: float, truncation: Optional[float] = None,
                    tol: float = 1e-10, schedule=DEFAULT_SCHEDULE) -> QuadratureResult:
    """
    Integral of |log dist_delta(x, S)|^p against normalized Lebesgue measure.

    Near each point of S the integrand is (-ln t)^p in the distance t, so
    each side of each point contributes an integral over t up to half the
    arc to the next point, cut at the truncation level.
    """
    if p < 1.0:
        raise ValueError(f"p must be at least 1, got {p}")
    if truncation is not None and not 0.0 < truncation <= 1.0:
        raise ValueError(f"truncation must lie in (0, 1], got {truncation}")
    sides = half_gaps(map_system.exceptional_set)
    if not sides:
        return QuadratureResult(value=0.0, refinements=[0.0])

    def integrand(t):
        return (-np.log(t)) ** p

    def evaluate(levels: int, order: int) -> float:
        parts = []
        for _, gap in sides:
            width = gap if truncation is None else min(gap, truncation)
            parts.append(singular_integral(integrand, width, lambda h: log_power_integral(h, p), levels, order))
        return 0.5 * math.fsum(parts)

    result = refine(evaluate, tol, schedule)
    logger.info("log-distance moment p=%g for %s: %.12g", p, map_system.name, result.value)
    return result


def log_dist_moment_closed_form(p: float, half_gap: float = 0.5, points: int = 2) -> float:
    """Closed form for the intermittent geometry: 2 * points * (1/2) * Gamma(p + 1, -ln half_gap)."""
    return points * log_power_integral(half_gap, p)


# ------------------------------------------------------- recurrence sequence

class Lemma51Violation(AssertionError):
    def __init__(self, check: str, n: int):
        self.check = check
        self.n = n
        super().__init__(f"{check} fails at n = {n}")


@dataclass
class RecurrenceSequence:
    """x_1, ..., x_N under x_{n+1} = (1 + x_n)^2 / 4."""
    x1: float
    x: np.ndarray

    @property
    def N(self) -> int:
        return self.x.size


def recurrence_sequence(x1: float, N: int) -> RecurrenceSequence:
    if not 0.0 < x1 < 0.5:
        raise ValueError(f"x1 must lie in (0, 1/2), got {x1}")
    if N < 1:
        raise ValueError("N must be positive")
    out = np.empty(N)
    x = float(x1)
    for i in range(N):
        out[i] = x
        x = (1.0 + x) ** 2 / 4.0
    return RecurrenceSequence(x1=x1, x=out)


IDENTITY_TOL = 1e-14
LOWER_BOUND_SLACK = 1e-16


@dataclass
class Lemma51Report:
    x1: float
    N: int
    checks: Dict[str, bool]
    first_failure: Optional[Tuple[str, int]]
    table: List[Dict[str, float]]
    final_ratio: float

    @property
    def passed(self) -> bool:
        return self.first_failure is None

    def raise_for_failure(self) -> None:
        if self.first_failure is not None:
            raise Lemma51Violation(*self.first_failure)


def _first_failure(name: str, ok: np.ndarray) -> Optional[Tuple[str, int]]:
    bad = np.flatnonzero(~ok)
    return (name, int(bad[0]) + 1) if bad.size else None


def lemma51_verify(x1: float, N: int) -> Lemma51Report:
    """
    Per-n checks of the bounded increasing sequence and of the divergence
    of S_N = sum_{n<=N} n (x_{n+1} - x_n).
    """
    if N < 10:
        raise ValueError("N must be at least 10")
    seq = recurrence_sequence(x1, N + 1).x
    n = np.arange(1, N + 1, dtype=float)
    x, nxt = seq[:N], seq[1:]
    inc = nxt - x

    checks = {
        "upper_bound": (x >= 0.0) & (x <= 1.0 - 1.0 / (2.0 * n)),
        "increment_identity": np.abs(inc - (1.0 - x) ** 2 / 4.0) <= IDENTITY_TOL,
        "increment_lower_bound": inc >= 1.0 / (16.0 * n * n) - LOWER_BOUND_SLACK,
    }
    S = compensated_prefix_sums(n * inc)[1:]
    H = compensated_prefix_sums(1.0 / n)[1:]
    checks["harmonic_bound"] = (S >= H / 16.0) & (S >= (H - 1.0) / 16.0)
    checks["monotone_sums"] = np.concatenate([[True], np.diff(S) >= 0.0])

    first = None
    for name, ok in checks.items():
        failure = _first_failure(name, ok)
        if failure is not None and (first is None or failure[1] < first[1]):
            first = failure

    table = []
    for m in geometric_schedule(N)[1:]:
        table.append({"N": m, "S_N": float(S[m - 1]), "S_N_over_log_N": float(S[m - 1] / math.log(m)),
                      "harmonic_over_16": float(H[m - 1] / 16.0)})
    report = Lemma51Report(x1=x1, N=N, checks={k: bool(v.all()) for k, v in checks.items()},
                           first_failure=first, table=table, final_ratio=float(S[-1] / math.log(N)))
    if first is not None:
        logger.warning("recurrence check %s failed at n = %d for x1 = %g", first[0], first[1], x1)
    return report


@dataclass
class Lemma51Sweep:
    x1: np.ndarray
    N: int
    first_failure: np.ndarray
    final_ratio: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.first_failure == 0))


def lemma51_grid(points: int = 100) -> np.ndarray:
    """Midpoint grid of (0, 1/2)."""
    return (np.arange(points) + 0.5) / (2.0 * points)


def lemma51_sweep(x1_values: Sequence[float], N: int, block: int = 4096) -> Lemma51Sweep:
    """
    The per-n checks of lemma51_verify for many starting points at once.

    The sequence is advanced one step at a time for all starts; the checks
    run on blocks of stored iterates. first_failure is 0 where every
    check held.
    """
    x1 = np.asarray(x1_values, dtype=float)
    if np.any((x1 <= 0.0) | (x1 >= 0.5)):
        raise ValueError("every x1 must lie in (0, 1/2)")
    G = x1.size
    first_failure = np.zeros(G, dtype=int)
    carry_S = np.zeros(G)
    carry_H = 0.0
    x = x1.copy()
    buffer = np.empty((block + 1, G))
    start = 1
    while start <= N:
        stop = min(start + block, N + 1)
        length = stop - start
        buffer[0] = x
        for i in range(1, length + 1):
            buffer[i] = (1.0 + buffer[i - 1]) ** 2 / 4.0
        xs, nxt = buffer[:length], buffer[1:length + 1]
        n = np.arange(start, stop, dtype=float)[:, None]
        inc = nxt - xs
        S = carry_S + np.cumsum(n * inc, axis=0)
        H = carry_H + np.cumsum(1.0 / n[:, 0])
        bad = ((xs < 0.0) | (xs > 1.0 - 1.0 / (2.0 * n))
               | (np.abs(inc - (1.0 - xs) ** 2 / 4.0) > IDENTITY_TOL)
               | (inc < 1.0 / (16.0 * n * n) - LOWER_BOUND_SLACK)
               | (S < H[:, None] / 16.0))
        if np.any(bad):
            rows = np.argmax(bad, axis=0)
            fresh = bad.any(axis=0) & (first_failure == 0)
            first_failure[fresh] = start + rows[fresh]
        carry_S, carry_H = S[-1], float(H[-1])
        x = buffer[length].copy()
        start = stop
    return Lemma51Sweep(x1=x1, N=N, first_failure=first_failure, final_ratio=carry_S / math.log(N))


# ---------------------------------------------------------------- tails

@dataclass
class TailReport:
    survival: List[Tuple[int, float]]
    truncated_means: Dict[int, float]
    growth: List[Tuple[int, int, float]]
    slope: float
    slope_ci: Tuple[float, float]
    window: Tuple[float, float]
    window_points: int
    flagged: bool
    message: str = ""


def _survival_slope(values_sorted: np.ndarray, lower: float, upper: float) -> float:
    grid = np.unique(np.round(np.geomspace(lower, upper, 16)).astype(int))
    above = values_sorted.size - np.searchsorted(values_sorted, grid, side="right")
    survival = above / values_sorted.size
    positive = survival > 0.0
    if np.count_nonzero(positive) < 2:
        return float("nan")
    return float(stats.linregress(np.log(grid[positive]), np.log(survival[positive])).slope)


def tail_report(dist: FirstTimeDistribution, resamples: int = 200, seed: int = 0,
                min_window_points: int = 200, min_sample_size: int = 10_000,
                min_horizon: int = 1_000) -> TailReport:
    """
    Survival curve, truncated-mean growth and a log-log tail slope.

    The slope window is the highest decade of uncensored first times that
    holds at least min_window_points samples; when none does the fit is
    flagged and the slope left undefined.
    """
    if dist.sample_size < min_sample_size:
        raise ValueError(f"tail diagnostics need at least {min_sample_size} points, got {dist.sample_size}")
    if dist.horizon < min_horizon:
        raise ValueError(f"tail diagnostics need a horizon of at least {min_horizon}, got {dist.horizon}")

    grid = np.unique(np.round(np.geomspace(1, dist.horizon, 200)).astype(int))
    survival = [(int(n), dist.survival(int(n))) for n in grid]
    means = dist.truncated_means()
    schedule = sorted(means)
    growth = [(a, b, means[b] / means[a] - 1.0) for a, b in zip(schedule[:-1], schedule[1:])]

    values = np.where(dist.first_times > 0, dist.first_times, dist.horizon + 1).astype(float)
    values.sort()
    uncensored = values[values <= dist.horizon]

    slope, ci, window, count, flagged, message = float("nan"), (float("nan"), float("nan")), (0.0, 0.0), 0, True, ""
    upper = float(uncensored[-1]) if uncensored.size else 0.0
    while upper >= 10.0:
        lower = upper / 10.0
        count = int(np.count_nonzero((uncensored >= lower) & (uncensored <= upper)))
        if count >= min_window_points:
            window, flagged = (lower, upper), False
            break
        upper /= 10.0 ** 0.25
    if flagged:
        message = f"fewer than {min_window_points} uncensored first times in every decade window"
        logger.warning("tail fit flagged: %s", message)
    else:
        slope = _survival_slope(values, *window)
        rng = np.random.default_rng(seed)
        boot = []
        for _ in range(resamples):
            sample = np.sort(rng.choice(values, size=values.size, replace=True))
            boot.append(_survival_slope(sample, *window))
        boot = np.asarray(boot)
        boot = boot[np.isfinite(boot)]
        if boot.size:
            ci = (float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5)))
    return TailReport(survival=survival, truncated_means=means, growth=growth, slope=slope, slope_ci=ci,
                      window=window, window_points=count, flagged=flagged, message=message)


# ------------------------------------------------- contraction and distortion

@dataclass
class PullbackReport:
    """Backward contraction and distortion along one hyperbolic time."""
    n: int
    radius: float
    pairs_used: int
    discarded: int
    violations: int
    worst_slack: float
    log_distortion: float

    @property
    def C1(self) -> float:
        return math.exp(self.log_distortion)


def _pullback(map_system: MapSystem, trace: OrbitTrace, n: int, params: HyperbolicParams,
              pair_count: int, radius: float, rng: np.random.Generator) -> PullbackReport:
    if not 1 <= n <= trace.length:
        raise ValueError(f"n = {n} outside the trace")
    dy = rng.uniform(-radius, radius, pair_count)
    dz = rng.uniform(-radius, radius, pair_count)
    degenerate = dy == dz
    xi = float(trace.x[n])

    valid = np.ones(pair_count, dtype=bool)
    log_gap = np.zeros(pair_count)
    distortion = np.zeros(pair_count)
    worst = np.full(pair_count, -np.inf)
    half_log_sigma = 0.5 * params.log_sigma
    for k in range(1, n + 1):
        j = n - k
        x_prev = trace.x[j]
        valid &= np.asarray(map_system.branch_domain_ok(xi, dy)) & np.asarray(map_system.branch_domain_ok(xi, dz))
        secant = np.asarray(map_system.branch_secant(x_prev, xi, dy, dz))
        with np.errstate(divide="ignore", invalid="ignore"):
            log_gap = log_gap + np.log(np.abs(secant))
        if k < n:
            worst = np.maximum(worst, log_gap - k * half_log_sigma)
        dy = np.asarray(map_system.branch_offset(x_prev, xi, dy))
        dz = np.asarray(map_system.branch_offset(x_prev, xi, dz))
        xi = float(map_system.branch_pullback(x_prev, xi))
        distortion = distortion + np.asarray(map_system.log_abs_det_difference(xi, dy, dz))

    checked = valid & ~degenerate
    slack = worst[checked]
    violations = int(np.count_nonzero(slack > 0.0))
    return PullbackReport(
        n=n,
        radius=radius,
        pairs_used=int(np.count_nonzero(valid)),
        discarded=int(np.count_nonzero(~valid)),
        violations=violations,
        worst_slack=float(slack.max()) if slack.size else float("-inf"),
        log_distortion=float(np.abs(distortion[valid]).max()) if np.any(valid) else 0.0,
    )


def contraction_check(map_system: MapSystem, trace: OrbitTrace, n: int, params: HyperbolicParams,
                      pair_count: int = 10, radius: float = 1e-6, seed: int = 0) -> PullbackReport:
    """
    Pull back random pairs from an arc of `radius` around f^n(x) along the
    recorded itinerary and compare separations with sigma^(k/2).
    """
    return _pullback(map_system, trace, n, params, pair_count, radius, np.random.default_rng(seed))


def distortion_check(map_system: MapSystem, trace: OrbitTrace, n: int, params: HyperbolicParams,
                     pair_count: int = 10, radius: float = 1e-6, seed: int = 0) -> float:
    """Empirical C1 = exp(sup |log|Df^n(y)| - log|Df^n(z)||) over pulled-back pairs."""
    return _pullback(map_system, trace, n, params, pair_count, radius, np.random.default_rng(seed)).C1


@dataclass
class PullbackSuite:
    scales: List[int]
    reports: Dict[int, List[PullbackReport]]

    def violations(self) -> int:
        return sum(r.violations for reps in self.reports.values() for r in reps)

    def C1_by_scale(self) -> Dict[int, float]:
        return {s: max((r.C1 for r in reps), default=float("nan")) for s, reps in self.reports.items()}


def pullback_suite(map_system: MapSystem, params: HyperbolicParams, scales: Sequence[int] = (10, 100, 1000),
                   times_per_scale: int = 100, pair_count: int = 10, radius: float = 1e-6,
                   seed: int = 0) -> PullbackSuite:
    """
    Contraction and distortion checks at hyperbolic times near each scale.

    For every trace of a seeded ensemble the first hyperbolic time at or
    after the scale is used, until times_per_scale of them are collected.
    """
    length = 2 * max(scales)
    ensemble = EnsembleSpec(kind="random", size=2 * times_per_scale, seed=seed)
    batch = generate_traces(map_system, ensemble, length, params.delta)
    results = [detect_fast(t, params) for t in batch.traces]
    rng = np.random.default_rng(seed)
    reports: Dict[int, List[PullbackReport]] = {}
    for scale in scales:
        chosen = []
        for trace, result in zip(batch.traces, results):
            later = result.times[result.times >= scale]
            if later.size:
                chosen.append(_pullback(map_system, trace, int(later[0]), params, pair_count, radius, rng))
            if len(chosen) == times_per_scale:
                break
        if len(chosen) < times_per_scale:
            logger.warning("only %d hyperbolic times found near n = %d", len(chosen), scale)
        reports[scale] = chosen
    return PullbackSuite(scales=list(scales), reports=reports)


# ------------------------------------------------------ Birkhoff statistics

@dataclass
class BirkhoffNegativityReport:
    log_sigma: float
    traces: int
    censored: int
    violations: int
    liminf_proxy: np.ndarray
    max_centred_sum: float

    @property
    def fraction_below(self) -> float:
        found = self.liminf_proxy[np.isfinite(self.liminf_proxy)]
        # compare the centred form, which is what detection guarantees
        return float(np.mean(found <= self.log_sigma + 1e-12)) if found.size else float("nan")


def birkhoff_negativity(traces: Sequence[OrbitTrace], params: HyperbolicParams,
                        results: Optional[Sequence[HypTimesResult]] = None) -> BirkhoffNegativityReport:
    """
    At each detected time n, (1/n) sum_{j<n} a_j <= log sigma; that is the
    k = n window of the detection inequality, re-checked from the trace.
    """
    results = [detect_fast(t, params) for t in traces] if results is None else results
    proxies = np.full(len(traces), np.nan)
    violations = 0
    censored = 0
    worst = -np.inf
    for i, (trace, result) in enumerate(zip(traces, results)):
        if result.censored:
            censored += 1
            continue
        T = compensated_prefix_sums(trace.a - params.log_sigma)
        centred = T[result.times]
        violations += int(np.count_nonzero(centred > params.tolerance))
        worst = max(worst, float(centred.max()))
        S = compensated_prefix_sums(trace.a)
        proxies[i] = float(np.min(S[result.times] / result.times))
    if violations:
        logger.warning("%d detected times violate the averaged derivative bound", violations)
    return BirkhoffNegativityReport(log_sigma=params.log_sigma, traces=len(traces), censored=censored,
                                    violations=violations, liminf_proxy=proxies, max_centred_sum=worst)


@dataclass
class SlowRecurrenceProfile:
    schedule: List[Tuple[int, float]]
    horizon: int
    phi_mean: np.ndarray
    phi_max: np.ndarray
    phi_min: np.ndarray
    masses: np.ndarray
    fixed_threshold: float
    fixed_threshold_masses: np.ndarray
    pointwise_monotone: bool

    @property
    def proof_bound_holds(self) -> List[bool]:
        return [bool(m <= 2.0 ** -(k + 1)) for (k, _), m in zip(self.schedule, self.masses)]

    @property
    def phi_mean_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.phi_mean) <= 0.0))

    @property
    def masses_monotone_from(self) -> int:
        """Smallest k from which the masses of E_k no longer increase."""
        start = len(self.masses) - 1
        while start > 0 and self.masses[start - 1] >= self.masses[start]:
            start -= 1
        return self.schedule[start][0]


def slow_recurrence_profile(map_system: MapSystem, ensemble: EnsembleSpec, schedule: Sequence[Tuple[int, float]],
                            horizon: int, fixed_threshold: float = 0.1) -> SlowRecurrenceProfile:
    """
    Finite-horizon phi_k = Birkhoff average of -log dist_{delta_k}, and the
    masses of E_k = {phi_k > 1/k}. Masses at one fixed threshold are also
    reported; they cannot increase as delta_k shrinks.
    """
    schedule = [(int(k), float(d)) for k, d in schedule]
    deltas = np.array([d for _, d in schedule])
    if np.any((deltas <= 0.0) | (deltas > 1.0)):
        raise ValueError("every delta_k must lie in (0, 1]")
    if np.any(np.diff(deltas) > 0.0):
        raise ValueError("delta_k must not increase with k")

    points = ensemble.points()
    acc = CompensatedSum((len(schedule), points.size))
    alive = np.ones(points.size, dtype=bool)
    for step in iterate_ensemble(map_system, points, horizon, 1.0):
        alive = step.alive
        dist = np.where(alive, np.asarray(map_system.dist_to_S(step.x), dtype=float), 1.0)
        truncated = truncate_distance(dist[None, :], deltas[:, None])
        acc.add(-np.log(truncated))
    phi = acc.value[:, alive] / horizon

    ks = np.array([k for k, _ in schedule], dtype=float)
    masses = np.mean(phi > (1.0 / ks)[:, None], axis=1)
    fixed = np.mean(phi > fixed_threshold, axis=1)
    return SlowRecurrenceProfile(
        schedule=schedule,
        horizon=horizon,
        phi_mean=phi.mean(axis=1),
        phi_max=phi.max(axis=1),
        phi_min=phi.min(axis=1),
        masses=masses,
        fixed_threshold=fixed_threshold,
        fixed_threshold_masses=fixed,
        pointwise_monotone=bool(np.all(np.diff(phi, axis=0) <= 0.0)),
    )


@dataclass
class ExpansionFraction:
    threshold: float
    fraction: float
    averages: np.ndarray


def nonuniform_expansion_fraction(map_system: MapSystem, ensemble: EnsembleSpec, horizon: int,
                                  threshold: float = -0.1) -> ExpansionFraction:
    """Share of the ensemble whose Birkhoff average of log||Df^-1|| is <= threshold."""
    averages = ensemble_birkhoff_averages(map_system, ensemble, horizon, "inv-deriv")
    kept = averages[np.isfinite(averages)]
    return ExpansionFraction(threshold=threshold, fraction=float(np.mean(kept <= threshold)), averages=averages)
