"""
Named experiments and the acceptance checks they record.

Each experiment writes its artifacts under <output_dir>/<experiment>/ and
appends AcceptanceCheck entries; the report experiment aggregates them.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.analysis import (
    Lemma51Violation,
    birkhoff_negativity,
    lemma51_grid,
    lemma51_sweep,
    lemma51_verify,
    log_dist_moment,
    log_dist_moment_closed_form,
    lyapunov_integral,
    nonuniform_expansion_fraction,
    pullback_suite,
    slow_recurrence_profile,
    tail_report,
)
from src.config import EXPERIMENTS, ExperimentConfig
from src.dynamics import LOG_HALF, ExceptionalSetError, get_map, probe_nondegeneracy
from src.export_utils import ExportManager
from src.hyptimes import (
    HyperbolicParams,
    ParameterMismatchError,
    classify_sets,
    detect_brute,
    detect_fast,
    escape_time,
    first_hyperbolic_time,
    first_time_distribution,
    stream_frequency_report,
)
from src.measures import (
    ConvergenceError,
    build_ulam_exact,
    build_ulam_sampled,
    cell_edges,
    cesaro_density,
    gap_pushforward,
    invariant_density,
    refinement_profile,
    restricted_pushforward_profile,
    transfer_apply,
)
from src.orbits import EnsembleSpec, OrbitTerminatedError, OrbitTrace, generate_traces
from src.quadrature import QuadratureError

logger = logging.getLogger(__name__)

EXPERIMENT_REGISTRY: Dict[str, str] = {
    "detect": "per-point hyperbolic times, set masses and frequency table",
    "firsttime": "first hyperbolic time distribution, survival curve and tail diagnostics",
    "ulam": "Ulam invariant density, refinement profile and restricted pushforwards",
    "verify": "integrals, recurrence sequence, transfer identity and pullback checks",
    "report": "aggregate summary of every recorded acceptance check",
}

LYAPUNOV_REFERENCE = {"intermittent": -0.5, "doubling": LOG_HALF}

# tie-free parameters for comparing the two detectors on synthetic traces
DETECTOR_CHECK_PARAMS = HyperbolicParams(sigma=0.7, delta=1.0, b=0.45, beta=0.5)

# errors a single experiment may raise without aborting the run
MODULE_ERRORS = (ExceptionalSetError, OrbitTerminatedError, ParameterMismatchError, ConvergenceError,
                 QuadratureError, Lemma51Violation, ValueError, RuntimeError)


@dataclass
class AcceptanceCheck:
    experiment: str
    name: str
    measured: Any
    threshold: Any
    passed: bool
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunSummary:
    checks: List[AcceptanceCheck] = field(default_factory=list)
    metrics: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(1 for c in self.checks if not c.passed)


class ExperimentRunner:
    """
    Runs the experiments named in a config in order, the report last.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.map_system = get_map(config.map)
        self.params = config.params()
        self.root = Path(config.output_dir)
        self.summary = RunSummary()

    # -- bookkeeping

    def check(self, experiment: str, name: str, measured, threshold, passed: bool, detail: str = "") -> bool:
        passed = bool(passed)
        self.summary.checks.append(AcceptanceCheck(experiment, name, measured, threshold, passed, detail))
        if passed:
            logger.info("[%s] %s passed (measured %s, threshold %s)", experiment, name, measured, threshold)
        else:
            logger.warning("[%s] %s FAILED (measured %s, threshold %s) %s", experiment, name, measured,
                           threshold, detail)
        return passed

    def metric(self, experiment: str, name: str, value) -> None:
        self.summary.metrics.setdefault(experiment, {})[name] = value

    def exporter(self, experiment: str) -> ExportManager:
        return ExportManager(self.root / experiment)

    def run(self, names: Optional[List[str]] = None) -> int:
        """Run the experiments and return the number of failed checks."""
        names = list(self.config.experiments if names is None else names)
        unknown = [n for n in names if n not in EXPERIMENTS]
        if unknown:
            raise ValueError(f"unknown experiment(s) {unknown}")
        ordered = [n for n in names if n != "report"] + (["report"] if "report" in names else [])
        for name in ordered:
            logger.info("starting experiment '%s' on %s", name, self.map_system.name)
            exporter = self.exporter(name)
            try:
                getattr(self, f"run_{name}")(exporter)
            except MODULE_ERRORS as exc:
                logger.error("experiment '%s' failed: %s: %s", name, type(exc).__name__, exc)
                self.check(name, "completed", type(exc).__name__, "no error", False, str(exc))
            logger.info("finished experiment '%s'", name)
        return self.summary.failures

    # -- experiments

    def run_detect(self, exporter: ExportManager) -> None:
        settings = self.config.detect
        ensemble = self.config.ensemble.spec(settings.ensemble_size)

        report = stream_frequency_report(self.map_system, ensemble, self.params, settings.horizons,
                                         settings.thetas)
        columns: Dict[str, Any] = {"point": report.point_index, "x0": report.x0, "first_time": report.first_times,
                                  "censored": (report.first_times < 0).astype(int)}
        for i, h in enumerate(report.horizons):
            columns[f"count_{h}"] = report.counts[:, i]
            columns[f"frequency_{h}"] = report.frequencies[:, i]
        exporter.export_columns("frequencies.csv", columns)

        aggregate = report.aggregate()
        rows = [{"horizon": h, "theta": t, "fraction": f} for h, by_theta in aggregate.items() for t, f in by_theta.items()]
        table = pd.DataFrame(rows)
        exporter.export_to_csv("frequency_table.csv", table)
        exporter.export_to_text("frequency_table.txt", table, "fraction of points with frequency >= theta")

        fraction = report.fraction_at_least(self.config.theta)
        self.metric("detect", "fraction_at_theta", fraction)
        self.check("detect", "positive_frequency", fraction, settings.min_fraction,
                   fraction >= settings.min_fraction,
                   f"theta = {self.config.theta}, horizon = {report.horizons[-1]}")

        # stored traces at the shortest horizon for set masses and explicit times
        n_max = settings.horizons[0]
        batch = generate_traces(self.map_system, ensemble, n_max, self.params.delta)
        results = [detect_fast(t, self.params) for t in batch.traces]
        sets = classify_sets(batch.traces, self.params, n_max, results)
        n = np.arange(1, n_max + 1)
        exporter.export_columns("set_masses.csv", {"n": n, "m_H": sets.hyperbolic_mass, "m_H_star": sets.first_mass})
        gaps = sorted(sets.gap_counts.items())
        exporter.export_columns("gap_counts.csv", {
            "n": [k[0] for k, _ in gaps],
            "k": [k[1] for k, _ in gaps],
            "count": [c for _, c in gaps],
        })
        points = np.concatenate([np.full(r.times.size, i) for i, r in zip(batch.indices, results)] or [np.empty(0, int)])
        times = np.concatenate([r.times for r in results] or [np.empty(0, int)])
        exporter.export_columns("hyperbolic_times.csv", {"point": points.astype(int), "n": times.astype(int)})
        if batch.traces:
            exporter.export_trace("trace_0.csv", batch.traces[0])
        self.metric("detect", "censored_fraction", sets.censored_fraction)

    def run_firsttime(self, exporter: ExportManager) -> None:
        settings = self.config.firsttime
        horizon = self.config.horizon
        dist = first_time_distribution(self.map_system, self.config.ensemble.spec(), self.params, horizon)

        ks = sorted(dist.histogram)
        exporter.export_columns("histogram.csv", {
            "k": ks,
            "count": [dist.histogram[k] for k in ks],
            "mass": [dist.mass(k) for k in ks],
        })
        means = dist.truncated_means()
        uncensored = dist.truncated_means(exclude_censored=True)
        exporter.export_columns("truncated_means.csv", {
            "n": list(means),
            "mean": list(means.values()),
            "mean_uncensored": [uncensored[n] for n in means],
        })
        self.metric("firsttime", "censored", dist.censored)
        self.metric("firsttime", "dropped", dist.dropped)
        self.metric("firsttime", "truncated_means", means)

        if not self.map_system.exceptional_set:
            expected_one = self.params.log_sigma >= LOG_HALF
            if expected_one:
                ok = ks == [1] and dist.censored == 0
                self.check("firsttime", "first_time_identically_one", ks, [1], ok)
        else:
            decades = [(a, b) for a, b in zip(list(means)[:-1], list(means)[1:]) if a >= 1000 and b == 10 * a]
            for a, b in decades:
                growth = means[b] / means[a] - 1.0
                self.check("firsttime", f"truncated_mean_growth_{a}_{b}", growth, settings.min_growth,
                           growth >= settings.min_growth)
            self._near_one(exporter, settings.near_one_offsets)

        if dist.sample_size >= 10_000 and horizon >= 1_000:
            tail = tail_report(dist, resamples=settings.resamples, seed=self.config.ensemble.seed,
                               min_window_points=settings.min_window_points)
            exporter.export_columns("survival.csv", {
                "n": [n for n, _ in tail.survival],
                "survival": [p for _, p in tail.survival],
            })
            self.metric("firsttime", "tail", {
                "slope": tail.slope,
                "slope_ci": list(tail.slope_ci),
                "window": list(tail.window),
                "window_points": tail.window_points,
                "flagged": tail.flagged,
                "message": tail.message,
            })
        else:
            logger.info("sample of %d points at horizon %d is too small for tail diagnostics",
                        dist.sample_size, horizon)

    def _near_one(self, exporter: ExportManager, offsets: List[float]) -> None:
        rows = []
        for eps in offsets:
            x0 = 1.0 - eps
            h = first_hyperbolic_time(self.map_system, x0, self.params, self.config.horizon).time
            esc = escape_time(self.map_system, x0, self.params, self.config.horizon)
            rows.append({"epsilon": eps, "x0": x0, "h": h if h is not None else -1,
                         "escape": esc if esc is not None else -1,
                         "h_times_epsilon": h * eps if h is not None else float("nan")})
            if h is not None and esc is not None:
                self.check("firsttime", f"escape_bound_{eps:g}", h, esc + 1, h >= esc + 1)
        exporter.export_to_csv("near_one.csv", pd.DataFrame(rows))

    def run_ulam(self, exporter: ExportManager) -> None:
        settings = self.config.ulam
        K = self.config.ulam_resolution
        U = build_ulam_exact(self.map_system, K)
        residual = U.uniform_residual()
        self.check("ulam", "uniform_fixed_vector", residual, settings.uniform_residual_tol,
                   residual <= settings.uniform_residual_tol)

        density = invariant_density(U, settings.tol, settings.max_iters)
        exporter.export_columns("density.csv", {"x": density.left_endpoints, "density": density.density})
        deviation = density.sup_deviation_from_uniform()
        self.check("ulam", "sup_deviation_from_uniform", deviation, settings.sup_deviation_tol,
                   deviation <= settings.sup_deviation_tol)

        if settings.sampled_per_cell:
            sampled = invariant_density(build_ulam_sampled(self.map_system, K, settings.sampled_per_cell,
                                                           self.config.ensemble.seed), settings.tol, settings.max_iters)
            exporter.export_columns("density_sampled.csv", {"x": sampled.left_endpoints, "density": sampled.density})
            self.metric("ulam", "sampled_l1_distance", sampled.l1_distance(density))

        if len(settings.refinement) >= 2:
            profile = refinement_profile(self.map_system, settings.refinement, settings.tol, settings.max_iters)
            exporter.export_to_csv("refinement.csv", pd.DataFrame(profile))
            distances = [row["l1_distance"] for row in profile]
            settled = all(b <= a or b < 1e-9 for a, b in zip(distances, distances[1:]))
            self.check("ulam", "refinement_convergence", distances, "non-increasing or < 1e-9", settled)

        times = settings.pushforward_times
        Kp = settings.pushforward_resolution
        ensemble = self.config.ensemble.spec(settings.pushforward_size)
        nu = restricted_pushforward_profile(self.map_system, ensemble, self.params, times, Kp)
        columns: Dict[str, Any] = {"x": cell_edges(Kp)[:-1]}
        sups = {}
        for n in times:
            columns[f"nu_{n}"] = nu[n].density
            sups[n] = nu[n].sup()
        exporter.export_columns("pushforward.csv", columns)
        self.metric("ulam", "pushforward_sup", sups)
        positive = [s for s in sups.values() if s > 0.0]
        spread = max(positive) / min(positive) if positive else float("inf")
        self.check("ulam", "pushforward_density_spread", spread, settings.max_spread, spread <= settings.max_spread)

        gap = gap_pushforward(self.map_system, ensemble, self.params, times[0], Kp, times[-1])
        cesaro = cesaro_density(self.map_system, ensemble, times[-1], Kp)
        exporter.export_columns("gap_and_cesaro.csv", {
            "x": cell_edges(Kp)[:-1],
            "eta": gap.density.density,
            "cesaro": cesaro.density,
        })
        self.metric("ulam", "gap_pushforward", {"n": times[0], "started": gap.started, "unresolved": gap.unresolved,
                                                "mass": gap.density.total_mass})

    def run_verify(self, exporter: ExportManager) -> None:
        settings = self.config.verify
        seed = self.config.ensemble.seed
        rows = []

        mismatches = self._detector_mismatches(settings.detector_traces, settings.detector_length, seed)
        self.check("verify", "detector_equivalence", mismatches, 0, mismatches == 0,
                   f"{settings.detector_traces} random traces of length {settings.detector_length}")

        lyap = lyapunov_integral(self.map_system, "quadrature")
        reference = LYAPUNOV_REFERENCE.get(self.map_system.name)
        rows.append({"quantity": "lyapunov_quadrature", "value": lyap.value})
        self.metric("verify", "lyapunov", lyap.value)
        if reference is not None:
            self.check("verify", "lyapunov_quadrature", lyap.value, reference,
                       abs(lyap.value - reference) <= settings.lyapunov_tol)
        proxy = lyapunov_integral(self.map_system, "ensemble",
                                  ensemble=EnsembleSpec("random", settings.lyapunov_ensemble_size, seed),
                                  horizon=settings.lyapunov_horizon)
        rows.append({"quantity": "lyapunov_ensemble", "value": proxy.value})
        if reference is not None:
            self.check("verify", "lyapunov_ensemble", proxy.value, reference,
                       abs(proxy.value - reference) <= settings.lyapunov_ensemble_tol)

        for p in settings.moment_powers:
            moment = log_dist_moment(self.map_system, p)
            rows.append({"quantity": f"log_dist_moment_p{p:g}", "value": moment.value})
            if self.map_system.exceptional_set:
                expected = log_dist_moment_closed_form(p)
                self.check("verify", f"log_dist_moment_p{p:g}", moment.value, expected,
                           abs(moment.value - expected) <= settings.moment_tol * max(1.0, abs(expected)))
        truncated = log_dist_moment(self.map_system, 1.0, truncation=self.config.delta)
        rows.append({"quantity": "log_dist_moment_p1_truncated", "value": truncated.value})

        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, settings.transfer_points)
        error = float(np.abs(transfer_apply(self.map_system, np.ones_like, x) - 1.0).max())
        self.check("verify", "transfer_identity", error, settings.transfer_tol, error <= settings.transfer_tol)

        if self.map_system.name == "intermittent":
            self._lemma51(exporter, settings)
            probe = probe_nondegeneracy(self.map_system, grid_size=200)
            self.metric("verify", "nondegeneracy", probe.to_dict())

        suite = pullback_suite(self.map_system, self.params, settings.pullback_scales, settings.pullback_times,
                               settings.pullback_pairs, seed=seed)
        c1 = suite.C1_by_scale()
        exporter.export_columns("distortion.csv", {"scale": list(c1), "C1": list(c1.values())})
        self.check("verify", "backward_contraction", suite.violations(), 0, suite.violations() == 0)
        worst = max((v for v in c1.values() if math.isfinite(v)), default=float("nan"))
        self.check("verify", "bounded_distortion", worst, settings.distortion_bound,
                   math.isfinite(worst) and worst <= settings.distortion_bound)

        batch = generate_traces(self.map_system, EnsembleSpec("random", settings.birkhoff_size, seed),
                                settings.birkhoff_horizon, self.params.delta)
        negativity = birkhoff_negativity(batch.traces, self.params)
        self.check("verify", "birkhoff_negativity", negativity.violations, 0, negativity.violations == 0)
        self.metric("verify", "birkhoff_fraction_below", negativity.fraction_below)

        profile = slow_recurrence_profile(self.map_system,
                                          EnsembleSpec("random", settings.slow_recurrence_size, seed),
                                          settings.slow_recurrence_schedule(), settings.slow_recurrence_horizon)
        exporter.export_columns("slow_recurrence.csv", {
            "k": [k for k, _ in profile.schedule],
            "delta": [d for _, d in profile.schedule],
            "phi_mean": profile.phi_mean,
            "phi_max": profile.phi_max,
            "mass_E_k": profile.masses,
            "mass_fixed_threshold": profile.fixed_threshold_masses,
        })
        fixed = profile.fixed_threshold_masses
        self.check("verify", "slow_recurrence_monotone", profile.pointwise_monotone, True,
                   profile.pointwise_monotone and bool(np.all(np.diff(fixed) <= 0.0)))
        self.check("verify", "slow_recurrence_phi_mean_decreasing", profile.phi_mean.tolist(), "non-increasing",
                   profile.phi_mean_decreasing)
        self.metric("verify", "slow_recurrence_masses", {
            "k": [k for k, _ in profile.schedule],
            "mass_E_k": profile.masses.tolist(),
            "monotone": bool(np.all(np.diff(profile.masses) <= 0.0)),
            "monotone_from_k": profile.masses_monotone_from,
        })

        expansion = nonuniform_expansion_fraction(self.map_system,
                                                  EnsembleSpec("random", settings.slow_recurrence_size, seed),
                                                  settings.slow_recurrence_horizon, settings.expansion_threshold)
        self.metric("verify", "nonuniform_expansion_fraction", expansion.fraction)

        exporter.export_to_csv("quantities.csv", pd.DataFrame(rows))

    def _detector_mismatches(self, count: int, length: int, seed: int) -> int:
        rng = np.random.default_rng(seed)
        mismatches = 0
        for _ in range(count):
            trace = OrbitTrace(x=np.zeros(length + 1), a=rng.uniform(-2.0, 0.5, length),
                               r=rng.uniform(-3.0, 0.0, length), delta=DETECTOR_CHECK_PARAMS.delta)
            if detect_fast(trace, DETECTOR_CHECK_PARAMS) != detect_brute(trace, DETECTOR_CHECK_PARAMS):
                mismatches += 1
        return mismatches

    def _lemma51(self, exporter: ExportManager, settings) -> None:
        single = lemma51_verify(0.25, settings.lemma51_N)
        exporter.export_to_csv("recurrence_sequence.csv", pd.DataFrame(single.table))
        self.check("verify", "recurrence_sequence_x1_0.25", single.first_failure, None, single.passed)
        self.check("verify", "recurrence_sum_ratio", single.final_ratio, 1.0 / 16.0, single.final_ratio >= 1.0 / 16.0)
        sweep = lemma51_sweep(lemma51_grid(settings.lemma51_grid), settings.lemma51_N)
        failing = int(np.count_nonzero(sweep.first_failure))
        self.check("verify", "recurrence_sequence_grid", failing, 0, sweep.passed)
        worst = float(sweep.final_ratio.min())
        self.check("verify", "recurrence_sum_ratio_grid", worst, 1.0 / 16.0, worst >= 1.0 / 16.0)

    def run_report(self, exporter: ExportManager) -> None:
        checks = [c.to_dict() for c in self.summary.checks]
        exporter.export_to_json("summary.json", {
            "map": self.map_system.name,
            "config": self.config.model_dump(),
            "checks": checks,
            "metrics": self.summary.metrics,
            "failures": self.summary.failures,
        })
        table = pd.DataFrame([{
            "experiment": c.experiment,
            "check": c.name,
            "measured": str(c.measured),
            "threshold": str(c.threshold),
            "passed": c.passed,
        } for c in self.summary.checks], columns=["experiment", "check", "measured", "threshold", "passed"])
        exporter.export_to_text("summary.txt", table, f"{self.summary.failures} failed of {len(checks)} checks")


def run_experiments(config: ExperimentConfig) -> int:
    """Process exit status for a run: failed checks, capped at 255."""
    failures = ExperimentRunner(config).run()
    return min(failures, 255)
