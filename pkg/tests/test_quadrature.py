import math

import numpy as np
import pytest
from scipy import special

from src.quadrature import (
    QuadratureError,
    circle_breakpoints,
    half_gaps,
    log_linear_integral,
    log_power_integral,
    refine,
    regular_integral,
    singular_integral,
    upper_gamma,
)


def test_upper_gamma_matches_elementary_forms():
    x = 0.7
    assert upper_gamma(1.0, x) == pytest.approx(math.exp(-x), rel=1e-14)
    assert upper_gamma(2.0, x) == pytest.approx((1.0 + x) * math.exp(-x), rel=1e-14)
    assert upper_gamma(5.0, 0.0) == pytest.approx(special.gamma(5.0))


@pytest.mark.parametrize("h", [0.5, 1e-3, 1e-9])
def test_log_power_integral_first_moment(h):
    assert log_power_integral(h, 1.0) == pytest.approx(h * (1.0 - math.log(h)), rel=1e-13)


def test_log_linear_integral():
    h = 0.01
    assert log_linear_integral(h, 0.5, 0.0) == pytest.approx(0.5 * (h * math.log(h) - h))
    assert log_linear_integral(h, 0.0, 3.0) == pytest.approx(3.0 * h)


def test_regular_integral_is_exact_for_polynomials():
    assert regular_integral(lambda x: x ** 2, 0.0, 1.0, 4, 6) == pytest.approx(1.0 / 3.0, rel=1e-14)


@pytest.mark.parametrize("p", [1.0, 2.0, 4.0])
def test_singular_integral_of_log_powers(p):
    value = singular_integral(lambda t: (-np.log(t)) ** p, 0.5, lambda h: log_power_integral(h, p), 40, 16)
    assert value == pytest.approx(log_power_integral(0.5, p), rel=1e-12)


def test_refine_stops_when_successive_values_agree():
    calls = []

    def evaluate(levels, order):
        calls.append((levels, order))
        return 1.0 + 2.0 ** -levels

    result = refine(evaluate, tol=1e-6, schedule=[(4, 1), (10, 1), (20, 1), (30, 1), (40, 1)])
    assert result.value == pytest.approx(1.0, abs=1e-6)
    assert result.last_change <= 1e-6
    assert len(calls) < 5


def test_refine_raises_when_values_keep_moving():
    with pytest.raises(QuadratureError) as info:
        refine(lambda levels, order: float(levels), tol=1e-10, schedule=[(1, 1), (2, 1), (3, 1)])
    assert (info.value.previous, info.value.last) == (2.0, 3.0)


def test_circle_geometry():
    assert circle_breakpoints((-1.0, 0.0)) == [-1.0, 0.0, 1.0]
    assert circle_breakpoints(()) == [-1.0, 1.0]
    assert half_gaps((-1.0, 0.0)) == [(-1.0, 0.5), (-1.0, 0.5), (0.0, 0.5), (0.0, 0.5)]
    assert half_gaps((0.0,)) == [(0.0, 1.0), (0.0, 1.0)]
    assert half_gaps(()) == []
