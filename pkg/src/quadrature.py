"""
Quadrature for integrands with logarithmic singularities at isolated points.

Each singular endpoint gets a geometric mesh of Gauss-Legendre cells
shrinking towards it; the innermost cell is replaced by a closed-form
integral supplied by the caller. Refinements of (levels, order) are run
until two successive values agree.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE: Tuple[Tuple[int, int], ...] = ((16, 8), (24, 12), (32, 16), (48, 20), (64, 24), (80, 32))


class QuadratureError(RuntimeError):
    """Successive refinements failed to agree."""

    def __init__(self, previous: float, last: float):
        self.previous = previous
        self.last = last
        super().__init__(f"quadrature did not converge: last two refinements {previous!r} and {last!r}")


@lru_cache(maxsize=None)
def _gauss(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return leggauss(order)


def upper_gamma(s: float, x: float) -> float:
    """Upper incomplete Gamma function Gamma(s, x)."""
    return float(special.gammaincc(s, x) * special.gamma(s))


def log_power_integral(h: float, p: float) -> float:
    """Closed form of the integral of (-ln t)^p over (0, h], h < 1."""
    return upper_gamma(p + 1.0, -math.log(h))


def log_linear_integral(h: float, coef: float, const: float) -> float:
    """Closed form of the integral of coef * ln t + const over (0, h]."""
    return coef * (h * math.log(h) - h) + const * h


def _gauss_cells(func: Callable[[np.ndarray], np.ndarray], lo: np.ndarray, hi: np.ndarray, order: int) -> float:
    nodes, weights = _gauss(order)
    half = (hi - lo)[:, None] / 2.0
    mid = (hi + lo)[:, None] / 2.0
    values = np.asarray(func(mid + half * nodes[None, :]), dtype=float)
    return math.fsum((half * weights[None, :] * values).ravel().tolist())


def regular_integral(func: Callable[[np.ndarray], np.ndarray], a: float, b: float, levels: int, order: int) -> float:
    """Composite Gauss-Legendre over `levels` equal cells of [a, b]."""
    edges = np.linspace(a, b, max(levels, 1) + 1)
    return _gauss_cells(func, edges[:-1], edges[1:], order)


def singular_integral(func_t: Callable[[np.ndarray], np.ndarray], width: float,
                      inner: Callable[[float], float], levels: int, order: int) -> float:
    """
    Integral of func_t(t) over t in (0, width], singular at t = 0.

    Cells [width 2^-(i+1), width 2^-i] for i < levels use Gauss-Legendre;
    the innermost (0, width 2^-levels] uses inner(h).
    """
    scale = width * np.power(0.5, np.arange(levels + 1))
    body = _gauss_cells(func_t, scale[1:], scale[:-1], order)
    return body + inner(float(scale[-1]))


@dataclass
class QuadratureResult:
    value: float
    refinements: List[float] = field(default_factory=list)
    schedule: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def last_change(self) -> float:
        if len(self.refinements) < 2:
            return float("nan")
        return abs(self.refinements[-1] - self.refinements[-2])


def refine(evaluate: Callable[[int, int], float], tol: float = 1e-10,
           schedule: Sequence[Tuple[int, int]] = DEFAULT_SCHEDULE) -> QuadratureResult:
    """Evaluate along the schedule until two successive values agree to tol (relative)."""
    result = QuadratureResult(value=float("nan"))
    for levels, order in schedule:
        value = evaluate(levels, order)
        result.refinements.append(value)
        result.schedule.append((levels, order))
        if not math.isfinite(value):
            break
        if len(result.refinements) >= 2:
            change = abs(value - result.refinements[-2])
            logger.debug("quadrature levels=%d order=%d value=%.17g change=%.3e", levels, order, value, change)
            if change <= tol * max(1.0, abs(value)):
                result.value = value
                return result
    previous = result.refinements[-2] if len(result.refinements) >= 2 else float("nan")
    raise QuadratureError(previous, result.refinements[-1])


def circle_breakpoints(points: Sequence[float]) -> List[float]:
    """Sorted cut points in [-1, 1] for a finite subset of the circle, endpoints included."""
    cuts = {-1.0, 1.0}
    for s in points:
        s = float(s)
        cuts.add(s)
        if s == -1.0:
            cuts.add(1.0)
    return sorted(cuts)


def half_gaps(points: Sequence[float]) -> List[Tuple[float, float]]:
    """
    For each side of each point of a finite circle subset, the half-length
    of the arc to the neighbouring point on that side.

    Returned as (point, half_gap) pairs, two per point.
    """
    ordered = sorted(float(s) for s in points)
    if not ordered:
        return []
    out = []
    count = len(ordered)
    for i, s in enumerate(ordered):
        ahead = ordered[(i + 1) % count]
        arc = (ahead - s) % 2.0 or 2.0
        out.append((s, arc / 2.0))
        behind = ordered[(i - 1) % count]
        arc = (s - behind) % 2.0 or 2.0
        out.append((s, arc / 2.0))
    return out
