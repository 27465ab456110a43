import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from src.dynamics import LOG_HALF
from src.hyptimes import (
    FirstTimeDistribution,
    HyperbolicParams,
    HyperbolicTimeScanner,
    ParameterMismatchError,
    classify_sets,
    detect_brute,
    detect_fast,
    escape_time,
    first_hyperbolic_time,
    first_time_distribution,
    frequency_report,
    geometric_schedule,
    stream_frequency_report,
)
from src.orbits import EnsembleSpec, OrbitTerminatedError, generate_orbit, generate_traces

from tests.conftest import make_trace

RANDOM_PARAMS = HyperbolicParams(sigma=0.7, delta=1.0, b=0.45, beta=0.5)


def random_trace(rng, N):
    a = rng.uniform(-2.0, 0.5, N)
    r = rng.uniform(-3.0, 0.0, N)
    return make_trace(a, r)


def test_params_validation():
    with pytest.raises(ValueError, match=r"b < min\(1/2, 1/\(4\*beta\)\)"):
        HyperbolicParams(sigma=0.5, delta=0.1, b=0.6, beta=0.5)
    with pytest.raises(ValueError, match="b < min"):
        HyperbolicParams(sigma=0.5, delta=0.1, b=0.3, beta=1.0)
    with pytest.raises(ValueError, match="sigma"):
        HyperbolicParams(sigma=1.0, delta=0.1, b=0.1, beta=0.5)
    p = HyperbolicParams(sigma=math.exp(-0.05), delta=1e-4, b=0.25, beta=0.5)
    assert p.log_sigma == pytest.approx(-0.05)
    assert p.c == pytest.approx(0.05)
    assert p.bc == pytest.approx(0.0125)


def test_hand_checked_example():
    params = HyperbolicParams(sigma=0.5, delta=1.0, b=0.25, beta=0.5)
    trace = make_trace([math.log(0.9), math.log(0.1)], [0.0, 0.0])
    assert list(detect_brute(trace, params).times) == [2]
    assert list(detect_fast(trace, params).times) == [2]


def test_recurrence_condition_blocks_after_a_close_approach():
    params = HyperbolicParams(sigma=0.5, delta=1.0, b=0.25, beta=0.5)
    r = np.zeros(70)
    r[0] = -10.0
    trace = make_trace(np.full(70, math.log(0.1)), r)
    # ceil(10 / (0.25 log 2)) = 58
    assert list(detect_fast(trace, params).times) == list(range(58, 71))
    assert detect_brute(trace, params) == detect_fast(trace, params)


def test_neutral_trace_has_no_hyperbolic_times():
    params = HyperbolicParams(sigma=0.9, delta=1.0, b=0.25, beta=0.5)
    result = detect_fast(make_trace(np.zeros(50), np.zeros(50)), params)
    assert result.censored
    assert result.first is None
    assert result.count_at(50) == 0


@pytest.mark.parametrize("sigma", [0.5, 0.6])
def test_doubling_map_is_hyperbolic_at_every_step(doubling, sigma):
    params = HyperbolicParams(sigma=sigma, delta=1.0, b=0.25, beta=0.5)
    trace = generate_orbit(doubling, 0.123, 40, delta=1.0)
    expected = list(range(1, 41))
    assert list(detect_brute(trace, params).times) == expected
    assert list(detect_fast(trace, params).times) == expected


def test_delta_mismatch_is_rejected():
    params = HyperbolicParams(sigma=0.5, delta=0.1, b=0.25, beta=0.5)
    trace = make_trace([0.0], [0.0], delta=1.0)
    with pytest.raises(ParameterMismatchError):
        detect_fast(trace, params)
    with pytest.raises(ParameterMismatchError):
        detect_brute(trace, params)


@given(st.lists(st.tuples(st.sampled_from([-1.0, -0.1, 0.1]), st.sampled_from([-2.0, 0.0])),
                min_size=1, max_size=12))
@settings(max_examples=500)
def test_fast_matches_brute_on_quantized_traces(steps):
    params = HyperbolicParams(sigma=0.6, delta=1.0, b=0.45, beta=0.5)
    a, r = zip(*steps)
    trace = make_trace(a, r)
    assert detect_fast(trace, params) == detect_brute(trace, params)


def test_fast_matches_brute_on_random_traces():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        trace = random_trace(rng, int(rng.integers(1, 201)))
        assert detect_fast(trace, RANDOM_PARAMS) == detect_brute(trace, RANDOM_PARAMS)


def test_detected_times_satisfy_every_window():
    rng = np.random.default_rng(5)
    for _ in range(20):
        trace = random_trace(rng, 150)
        for n in detect_fast(trace, RANDOM_PARAMS).times:
            for k in range(1, n + 1):
                assert math.fsum(trace.a[n - k:n]) <= k * RANDOM_PARAMS.log_sigma + 1e-12
                assert trace.r[n - k] >= RANDOM_PARAMS.b * k * RANDOM_PARAMS.log_sigma - 1e-12


def test_concatenation_of_hyperbolic_times():
    rng = np.random.default_rng(11)
    for _ in range(30):
        trace = random_trace(rng, 120)
        times = set(detect_fast(trace, RANDOM_PARAMS).times.tolist())
        for n in sorted(times)[:5]:
            later = detect_fast(trace.suffix(n), RANDOM_PARAMS).times
            assert {n + k for k in later.tolist()} <= times


def test_gaps_match_first_times_of_shifted_traces():
    rng = np.random.default_rng(3)
    for _ in range(20):
        trace = random_trace(rng, 100)
        times = detect_fast(trace, RANDOM_PARAMS).times
        for n, nxt in zip(times[:-1], times[1:]):
            assert detect_fast(trace.suffix(int(n)), RANDOM_PARAMS).first == nxt - n


def test_monotone_in_sigma_without_recurrence(tie_free_params):
    rng = np.random.default_rng(8)
    low = tie_free_params
    high = HyperbolicParams(sigma=0.8, delta=1.0, b=0.45, beta=0.5)
    for _ in range(50):
        trace = make_trace(rng.uniform(-2.0, 0.5, 100), np.zeros(100))
        assert set(detect_fast(trace, low).times) <= set(detect_fast(trace, high).times)


def test_scanner_reproduces_detect_fast_bit_for_bit():
    rng = np.random.default_rng(17)
    traces = [random_trace(rng, 80) for _ in range(6)]
    scanner = HyperbolicTimeScanner(RANDOM_PARAMS, len(traces))
    hits = np.zeros((len(traces), 80), dtype=bool)
    for j in range(80):
        hits[:, j] = scanner.update(np.array([t.a[j] for t in traces]), np.array([t.r[j] for t in traces]))
    for i, trace in enumerate(traces):
        assert np.array_equal(np.flatnonzero(hits[i]) + 1, detect_fast(trace, RANDOM_PARAMS).times)


def test_result_counts():
    params = HyperbolicParams(sigma=0.5, delta=1.0, b=0.25, beta=0.5)
    result = detect_fast(make_trace(np.full(10, LOG_HALF), np.zeros(10)), params)
    assert result.first == 1
    assert result.count_at(4) == 4
    assert result.frequency_at(10) == 1.0
    with pytest.raises(ValueError):
        result.count_at(11)
    with pytest.raises(ValueError, match="n >= 1"):
        result.frequency_at(0)


def test_first_hyperbolic_time_agrees_with_detection(intermittent, default_params):
    for x0 in (0.3, -0.6, 0.9, 0.05):
        trace = generate_orbit(intermittent, x0, 3000, default_params.delta)
        expected = detect_fast(trace, default_params).first
        assert first_hyperbolic_time(intermittent, x0, default_params, 3000).time == expected


def test_first_hyperbolic_time_censoring(intermittent, default_params):
    result = first_hyperbolic_time(intermittent, 1.0 - 1e-4, default_params, 100)
    assert result.censored
    assert result.horizon == 100


def test_first_hyperbolic_time_distinguishes_hitting_s(intermittent):
    # with delta = 1 the visit at 1/4 blocks n = 1, and the next iterate is 0
    params = HyperbolicParams(sigma=math.exp(-0.05), delta=1.0, b=0.25, beta=0.5)
    with pytest.raises(OrbitTerminatedError) as info:
        first_hyperbolic_time(intermittent, 0.25, params, 100)
    assert info.value.completed_steps == 1


def test_doubling_first_time_is_one(doubling):
    params = HyperbolicParams(sigma=0.5, delta=1e-4, b=0.25, beta=0.5)
    assert first_hyperbolic_time(doubling, 0.37, params, 10).time == 1


def test_first_time_grows_near_the_neutral_point(intermittent, default_params):
    times = []
    for eps in (1e-1, 1e-2, 1e-3):
        x0 = 1.0 - eps
        h = first_hyperbolic_time(intermittent, x0, default_params, 100_000).time
        escape = escape_time(intermittent, x0, default_params, 100_000)
        assert h is not None and escape is not None
        assert h >= escape + 1
        times.append(h)
    assert times[0] < times[1] < times[2]


def test_first_time_distribution_doubling(doubling):
    params = HyperbolicParams(sigma=0.5, delta=1e-4, b=0.25, beta=0.5)
    dist = first_time_distribution(doubling, EnsembleSpec("grid", 200), params, 50)
    assert dist.histogram == {1: 200}
    assert dist.censored == 0
    assert dist.mass(1) == 1.0
    assert all(v == 1.0 for v in dist.truncated_means().values())


def test_first_time_distribution_matches_single_orbits(intermittent, default_params):
    ensemble = EnsembleSpec("random", 40, seed=4)
    dist = first_time_distribution(intermittent, ensemble, default_params, 2000)
    for x0, h in zip(ensemble.points(), dist.first_times):
        single = first_hyperbolic_time(intermittent, x0, default_params, 2000).time
        assert h == (single if single is not None else -1)
    assert sum(dist.histogram.values()) + dist.censored == dist.sample_size


def test_first_time_distribution_statistics():
    dist = FirstTimeDistribution.from_first_times(np.array([1, 1, 3, 10, -1]), horizon=20)
    assert dist.histogram == {1: 2, 3: 1, 10: 1}
    assert dist.censored == 1
    assert dist.survival(2) == pytest.approx(3 / 5)
    assert dist.truncated_mean(5) == pytest.approx((1 + 1 + 3 + 5 + 5) / 5)
    assert dist.truncated_mean(5, exclude_censored=True) == pytest.approx((1 + 1 + 3 + 5) / 4)
    with pytest.raises(ValueError):
        dist.survival(21)
    with pytest.raises(ValueError):
        FirstTimeDistribution(histogram={1: 2}, censored=0, horizon=5, sample_size=3)


def test_geometric_schedule():
    assert geometric_schedule(1000) == [1, 10, 100, 1000]
    assert geometric_schedule(250) == [1, 10, 100, 250]


def test_classify_sets_doubling(doubling):
    params = HyperbolicParams(sigma=0.5, delta=1.0, b=0.25, beta=0.5)
    batch = generate_traces(doubling, EnsembleSpec("random", 10, seed=0), 30, 1.0)
    stats = classify_sets(batch.traces, params, 20)
    assert np.all(stats.hyperbolic_mass == 1.0)
    assert stats.m_H_star(1) == 1.0
    assert np.all(stats.first_mass[1:] == 0.0)
    assert stats.gap_counts[(1, 1)] == 10


def test_classify_sets_partition():
    rng = np.random.default_rng(9)
    traces = [random_trace(rng, 60) for _ in range(50)]
    stats = classify_sets(traces, RANDOM_PARAMS, 60)
    assert stats.first_mass.sum() + stats.censored_fraction == pytest.approx(1.0)
    with pytest.raises(ValueError):
        classify_sets(traces, RANDOM_PARAMS, 61)


def test_frequency_reports_agree(intermittent, default_params):
    ensemble = EnsembleSpec("random", 30, seed=2)
    horizons = [100, 1000, 3000]
    batch = generate_traces(intermittent, ensemble, 3000, default_params.delta)
    stored = frequency_report(batch.traces, default_params, horizons)
    streamed = stream_frequency_report(intermittent, ensemble, default_params, horizons)
    assert np.array_equal(stored.counts, streamed.counts[[list(streamed.point_index).index(i) for i in batch.indices]])
    assert np.all(np.diff(stored.counts, axis=1) >= 0)
    assert 0.0 <= stored.fraction_at_least(0.01) <= 1.0


def test_frequency_report_doubling(doubling):
    params = HyperbolicParams(sigma=0.5, delta=1.0, b=0.25, beta=0.5)
    report = stream_frequency_report(doubling, EnsembleSpec("grid", 20), params, [10, 100])
    assert np.all(report.frequencies == 1.0)
    assert report.aggregate()[100][1.0] == 1.0
