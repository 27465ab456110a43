"""
Full-scale runs with the committed default parameters.

Deselected by default; run with `pytest -m slow`.
"""

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from src.analysis import (
    lemma51_grid,
    lemma51_sweep,
    lemma51_verify,
    log_dist_moment,
    lyapunov_integral,
    pullback_suite,
    tail_report,
)
from src.config import load_config
from src.dynamics import DoublingBaselineMap, IntermittentCircleMap
from src.experiments import run_experiments
from src.hyptimes import HyperbolicParams, detect_brute, detect_fast, first_time_distribution, stream_frequency_report
from src.measures import build_ulam_exact, invariant_density, restricted_pushforward_profile, transfer_apply
from src.orbits import EnsembleSpec

from tests.conftest import make_trace

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def default_config():
    return load_config(CONFIGS / "default.json", env=False)


def test_detector_equivalence_on_quantized_traces():
    params = HyperbolicParams(sigma=0.6, delta=1.0, b=0.45, beta=0.5)
    steps = list(itertools.product([-1.0, -0.1, 0.1], [-2.0, 0.0]))
    rng = np.random.default_rng(12)
    for N in range(1, 13):
        total = len(steps) ** N
        if total <= 14_000:
            cases = itertools.product(range(len(steps)), repeat=N)
        else:
            cases = rng.integers(0, len(steps), size=(14_000, N))
        for case in cases:
            a, r = zip(*(steps[i] for i in case))
            trace = make_trace(a, r)
            assert detect_fast(trace, params) == detect_brute(trace, params)


def test_detector_equivalence_on_random_traces():
    params = HyperbolicParams(sigma=0.7, delta=1.0, b=0.45, beta=0.5)
    rng = np.random.default_rng(99)
    for _ in range(1_000):
        trace = make_trace(rng.uniform(-2.0, 0.5, 200), rng.uniform(-3.0, 0.0, 200))
        assert detect_fast(trace, params) == detect_brute(trace, params)


def test_transfer_identity():
    x = np.random.default_rng(3).uniform(-1.0, 1.0, 10_000)
    values = transfer_apply(IntermittentCircleMap(), np.ones_like, x)
    assert np.abs(values - 1.0).max() <= 1e-12


def test_lebesgue_is_invariant(default_config):
    U = build_ulam_exact(IntermittentCircleMap(), default_config.ulam_resolution)
    assert U.uniform_residual() <= 1e-10
    assert invariant_density(U).sup_deviation_from_uniform() <= 0.02


def test_lyapunov_integral():
    f = IntermittentCircleMap()
    assert lyapunov_integral(f, "quadrature").value == pytest.approx(-0.5, abs=1e-6)
    proxy = lyapunov_integral(f, "ensemble", ensemble=EnsembleSpec("random", 10_000, 0), horizon=100_000)
    assert proxy.value == pytest.approx(-0.5, abs=0.02)


def test_log_distance_moments():
    f = IntermittentCircleMap()
    assert log_dist_moment(f, 1.0).value == pytest.approx(1.0 + math.log(2.0), abs=1e-6)
    for p in [2.0, 4.0, 8.0]:
        result = log_dist_moment(f, p)
        assert math.isfinite(result.value)
        assert result.last_change < 1e-8 * max(1.0, result.value)


def test_recurrence_sequence_to_a_million():
    report = lemma51_verify(0.25, 1_000_000)
    assert report.passed
    assert report.final_ratio >= 1.0 / 16.0
    sweep = lemma51_sweep(lemma51_grid(100), 1_000_000)
    assert sweep.passed
    assert sweep.final_ratio.min() >= 1.0 / 16.0


def test_truncated_mean_grows_per_decade(default_config):
    dist = first_time_distribution(IntermittentCircleMap(), default_config.ensemble.spec(),
                                   default_config.params(), 100_000)
    means = [dist.truncated_mean(n) for n in (1_000, 10_000, 100_000)]
    assert means[1] >= 1.1 * means[0]
    assert means[2] >= 1.1 * means[1]

    tail = tail_report(dist, seed=default_config.ensemble.seed)
    assert tail.flagged or -1.5 <= tail.slope <= -0.6


def test_doubling_first_time_is_identically_one():
    params = HyperbolicParams(sigma=0.5, delta=1e-4, b=0.25, beta=0.5)
    dist = first_time_distribution(DoublingBaselineMap(), EnsembleSpec("grid", 10_000, 0), params, 1_000)
    assert dist.histogram == {1: 10_000}
    assert dist.censored == 0


def test_positive_frequency(default_config):
    report = stream_frequency_report(IntermittentCircleMap(), default_config.ensemble.spec(1_000),
                                     default_config.params(), [100_000], [default_config.theta])
    assert report.fraction_at_least(default_config.theta) >= 0.95


def test_contraction_and_distortion(default_config):
    suite = pullback_suite(IntermittentCircleMap(), default_config.params(), (10, 100, 1_000), 100, 10,
                           seed=default_config.ensemble.seed)
    assert suite.violations() == 0
    assert all(math.isfinite(c) and c <= 2.0 for c in suite.C1_by_scale().values())


def test_restricted_pushforward_density_spread(default_config):
    nu = restricted_pushforward_profile(IntermittentCircleMap(), default_config.ensemble.spec(100_000),
                                        default_config.params(), [10, 100, 1_000], 128)
    sups = [d.sup() for d in nu.values()]
    assert max(sups) <= 2.0 * min(sups)


def test_default_run_passes_and_is_reproducible(default_config, tmp_path):
    config = default_config.model_copy(update={"output_dir": str(tmp_path)})
    assert run_experiments(config) == 0
    first = {p.relative_to(tmp_path): p.read_bytes() for p in sorted(tmp_path.rglob("*")) if p.is_file()}
    assert run_experiments(config) == 0
    second = {p.relative_to(tmp_path): p.read_bytes() for p in sorted(tmp_path.rglob("*")) if p.is_file()}
    assert first == second
    summary = json.loads((tmp_path / "report" / "summary.json").read_text())
    assert summary["failures"] == 0
