"""
Circle maps with an exceptional set.

Points live on the circle obtained from [-1, 1] by identifying -1 with 1,
stored as coordinates in [-1, 1). Every map exposes the observables the
hyperbolic-time machinery needs (log of the inverse derivative norm, the
distance to the exceptional set) plus the inverse-branch helpers used by
the transfer operator and the backward contraction checks.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Type, Union

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

CIRCUMFERENCE = 2.0
LOG_HALF = math.log(0.5)


class ExceptionalSetError(ValueError):
    """Raised when an operation is asked to act on or near the exceptional set."""


def _finish(result: np.ndarray, template) -> ArrayLike:
    """Return a float for scalar input and an array otherwise."""
    if np.ndim(template) == 0:
        return float(result)
    return result


def wrap(x: ArrayLike) -> ArrayLike:
    """Normalize coordinates to the representative in [-1, 1)."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot wrap a non-finite coordinate")

    shifted = arr - CIRCUMFERENCE * np.floor((arr + 1.0) / CIRCUMFERENCE)
    out = np.where((arr >= -1.0) & (arr < 1.0), arr, shifted)
    # floor rounding can leave the result on the wrong side of the cut
    out = np.where(out >= 1.0, out - CIRCUMFERENCE, out)
    out = np.where(out < -1.0, out + CIRCUMFERENCE, out)
    return _finish(out, x)


def geodesic_distance(x: ArrayLike, y: ArrayLike) -> ArrayLike:
    """Arc-length distance on the circle of circumference 2, in [0, 1]."""
    gap = np.abs(np.asarray(wrap(x)) - np.asarray(wrap(y)))
    out = np.minimum(gap, CIRCUMFERENCE - gap)
    return float(out) if out.ndim == 0 else out


class MapSystem(ABC):
    """
    Contract every dynamical example satisfies.

    All methods accept scalars or numpy arrays and are pure.
    """

    name: str = "abstract"
    exceptional_set: Tuple[float, ...] = ()

    @abstractmethod
    def eval(self, x: ArrayLike) -> ArrayLike:
        """Image of x, wrapped to [-1, 1)."""

    @abstractmethod
    def log_inv_deriv_norm(self, x: ArrayLike) -> ArrayLike:
        """log ||Df(x)^-1||, which is -log|f'(x)| on the circle."""

    @abstractmethod
    def dist_to_S(self, x: ArrayLike) -> ArrayLike:
        """Geodesic distance to the exceptional set (1 when it is empty)."""

    @abstractmethod
    def inverse_branches(self, x: ArrayLike) -> Tuple[ArrayLike, ...]:
        """All preimages of x, one per inverse branch."""

    @abstractmethod
    def preimage_arcs(self, lo: np.ndarray, hi: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Preimages of the arcs [lo, hi] as (lo, hi) arcs, one pair per branch."""

    def log_abs_det(self, x: ArrayLike) -> ArrayLike:
        """log|det Df(x)|; in one dimension this is log|f'(x)|."""
        out = -np.asarray(self.log_inv_deriv_norm(x), dtype=float)
        return _finish(out, x)

    # Backward pullback along a recorded itinerary. The reference chain
    # xi_j is the exact preimage of xi_{j+1} on the branch that contains
    # the recorded orbit point x_j; nearby points are tracked as offsets.

    @abstractmethod
    def branch_offset(self, x_prev: np.ndarray, xi_next: np.ndarray, offset: np.ndarray) -> np.ndarray:
        """Offset of the pulled-back point from the pulled-back reference."""

    @abstractmethod
    def branch_secant(self, x_prev: np.ndarray, xi_next: np.ndarray,
                      dy: np.ndarray, dz: np.ndarray) -> np.ndarray:
        """Ratio of separations |g(y) - g(z)| / |y - z| for the branch at x_prev."""

    @abstractmethod
    def branch_pullback(self, x_prev: ArrayLike, xi_next: ArrayLike) -> ArrayLike:
        """Preimage of xi_next on the branch containing x_prev."""

    def branch_domain_ok(self, xi_next: np.ndarray, offset: np.ndarray) -> np.ndarray:
        """Whether xi_next + offset is still inside the branch domain."""
        return np.ones(np.shape(offset), dtype=bool)

    @abstractmethod
    def log_abs_det_difference(self, xi: np.ndarray, dy: np.ndarray, dz: np.ndarray) -> np.ndarray:
        """log|f'(xi + dy)| - log|f'(xi + dz)| evaluated without cancellation."""

    def singular_profile(self, s: float) -> Tuple[float, float]:
        """
        Leading behaviour of log||Df^-1|| near a point s of S.

        Returns (coef, const) with log||Df^-1||(x) ~ coef * log|x - s| + const.
        """
        raise NotImplementedError(f"{self.name} has no singular profile at {s}")

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class IntermittentCircleMap(MapSystem):
    """
    f(x) = 2*sqrt(x) - 1 for x >= 0 and 1 - 2*sqrt(|x|) for x < 0.

    Continuous on the circle, expanding away from the neutral fixed point
    at 1 ~ -1, with |f'(x)| = |x|^(-1/2) blowing up at 0.
    """

    name = "intermittent"
    exceptional_set = (-1.0, 0.0)

    def eval(self, x: ArrayLike) -> ArrayLike:
        arr = np.asarray(x, dtype=float)
        root = 2.0 * np.sqrt(np.abs(arr))
        image = np.where(arr >= 0.0, root - 1.0, 1.0 - root)
        return _finish(np.asarray(wrap(image)), x)

    def log_inv_deriv_norm(self, x: ArrayLike) -> ArrayLike:
        arr = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            out = 0.5 * np.log(np.abs(arr))
        return _finish(out, x)

    def dist_to_S(self, x: ArrayLike) -> ArrayLike:
        mag = np.abs(np.asarray(x, dtype=float))
        return _finish(np.minimum(mag, 1.0 - mag), x)

    @staticmethod
    def _g1(x):
        return ((1.0 + x) / 2.0) ** 2

    @staticmethod
    def _g2(x):
        return -(((1.0 - x) / 2.0) ** 2)

    def inverse_branches(self, x: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
        arr = np.asarray(x, dtype=float)
        if np.any(arr <= -1.0) or np.any(arr >= 1.0):
            raise ExceptionalSetError("inverse branches meet at the identified point -1 ~ 1")
        return _finish(self._g1(arr), x), _finish(self._g2(arr), x)

    def preimage_arcs(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        # both branches are increasing on [-1, 1]
        return [(self._g1(lo), self._g1(hi)), (self._g2(lo), self._g2(hi))]

    def branch_pullback(self, x_prev, xi_next):
        xi = np.asarray(xi_next, dtype=float)
        out = np.where(np.asarray(x_prev) >= 0.0, self._g1(xi), self._g2(xi))
        return _finish(out, xi_next)

    def branch_offset(self, x_prev, xi_next, offset):
        upper = np.asarray(x_prev) >= 0.0
        grow = np.where(upper, 2.0 + 2.0 * xi_next + offset, 2.0 - 2.0 * xi_next - offset)
        return offset * grow / 4.0

    def branch_secant(self, x_prev, xi_next, dy, dz):
        upper = np.asarray(x_prev) >= 0.0
        return np.where(upper, 2.0 + 2.0 * xi_next + dy + dz, 2.0 - 2.0 * xi_next - dy - dz) / 4.0

    def branch_domain_ok(self, xi_next, offset):
        return np.abs(xi_next + offset) < 1.0

    def log_abs_det_difference(self, xi, dy, dz):
        # log|f'(x)| = -1/2 log|x|
        return -0.5 * (np.log1p(dy / xi) - np.log1p(dz / xi))

    def singular_profile(self, s: float) -> Tuple[float, float]:
        if s == 0.0:
            return 0.5, 0.0
        if abs(s) == 1.0:
            # smooth there: 1/2 log(1 - t) vanishes at t = 0
            return 0.0, 0.0
        return super().singular_profile(s)


class DoublingBaselineMap(MapSystem):
    """x -> 2x on the circle; uniformly expanding, empty exceptional set."""

    name = "doubling"
    exceptional_set = ()

    def eval(self, x: ArrayLike) -> ArrayLike:
        return wrap(2.0 * np.asarray(x, dtype=float))

    def log_inv_deriv_norm(self, x: ArrayLike) -> ArrayLike:
        return _finish(np.full(np.shape(x), LOG_HALF), x)

    def dist_to_S(self, x: ArrayLike) -> ArrayLike:
        return _finish(np.ones(np.shape(x)), x)

    def inverse_branches(self, x: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
        arr = np.asarray(wrap(x), dtype=float)
        half = arr / 2.0
        other = np.where(arr < 0.0, half + 1.0, half - 1.0)
        return _finish(half, x), _finish(other, x)

    def preimage_arcs(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        shift = np.where(lo < 0.0, 1.0, -1.0)
        return [(lo / 2.0, hi / 2.0), (lo / 2.0 + shift, hi / 2.0 + shift)]

    def branch_pullback(self, x_prev, xi_next):
        half, other = (np.asarray(b) for b in self.inverse_branches(np.asarray(xi_next, dtype=float)))
        prev = np.asarray(x_prev, dtype=float)
        nearer = np.asarray(geodesic_distance(half, prev)) <= np.asarray(geodesic_distance(other, prev))
        return _finish(np.where(nearer, half, other), xi_next)

    def branch_offset(self, x_prev, xi_next, offset):
        return offset / 2.0

    def branch_secant(self, x_prev, xi_next, dy, dz):
        return np.full(np.broadcast(xi_next, dy, dz).shape, 0.5)

    def log_abs_det_difference(self, xi, dy, dz):
        return np.zeros(np.broadcast(xi, dy, dz).shape)


MAPS: Dict[str, Type[MapSystem]] = {
    IntermittentCircleMap.name: IntermittentCircleMap,
    DoublingBaselineMap.name: DoublingBaselineMap,
}


def get_map(name: str) -> MapSystem:
    """Instantiate a map by its config name."""
    try:
        return MAPS[name]()
    except KeyError:
        raise ValueError(f"unknown map '{name}', expected one of {sorted(MAPS)}") from None


@dataclass(frozen=True)
class NonDegeneracyEstimate:
    """Fitted constants of the power-of-distance conditions on a probe grid."""
    B_hat: float
    beta_hat: float
    zeta_hat: float
    grid_size: int
    residuals: Dict[str, float] = field(default_factory=dict)
    lipschitz_exponent: float = float("nan")

    def to_dict(self) -> Dict[str, float]:
        return {
            "B_hat": self.B_hat,
            "beta_hat": self.beta_hat,
            "zeta_hat": self.zeta_hat,
            "grid_size": self.grid_size,
            "residuals": dict(self.residuals),
            "lipschitz_exponent": self.lipschitz_exponent,
        }


# slack applied to B_hat so the reported residuals survive rounding
_B_INFLATION = 1.0 + 1e-9


def probe_nondegeneracy(map_system: MapSystem, grid_size: int,
                        shallowest: float = 1e-1, deepest: float = 1e-12) -> NonDegeneracyEstimate:
    """
    Fit (B, beta) of the non-degeneracy conditions on a log-spaced grid.

    beta_hat is the smallest exponent for which the derivative bound
    (1/B) d^beta <= |f'| <= B d^-beta holds with B = 1 on the grid. B_hat is
    then the smallest constant above 1 making the two Lipschitz conditions
    hold for pairs offset by a quarter of the distance to S. Those
    conditions need their own exponent for a depth-independent B; it is
    reported as lipschitz_exponent.
    """
    if not map_system.exceptional_set:
        raise ExceptionalSetError(f"{map_system.name} has an empty exceptional set")
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")

    depths = np.geomspace(shallowest, deepest, grid_size)
    points, owners = [], []
    for index, s in enumerate(map_system.exceptional_set):
        for sign in (1.0, -1.0):
            points.append(np.asarray(wrap(s + sign * depths)))
            owners.append(np.full(grid_size, index))
    x = np.concatenate(points)
    owner = np.concatenate(owners)
    dist = np.asarray(map_system.dist_to_S(x))
    usable = dist > 0.0
    if not np.any(usable):
        raise ExceptionalSetError("no usable grid point off the exceptional set")
    skipped = int(np.count_nonzero(~usable))
    if skipped:
        logger.debug("skipped %d probe points lying on S", skipped)
    x, dist, owner = x[usable], dist[usable], owner[usable]

    log_dist = np.log(dist)
    log_inv = np.asarray(map_system.log_inv_deriv_norm(x))
    log_det = np.asarray(map_system.log_abs_det(x))

    beta_hat = float(np.max(np.abs(log_det) / np.abs(log_dist)))
    zeta_hat = float(np.max(np.abs(log_inv) / np.abs(log_dist)))

    offsets = dist / 4.0
    partners = [np.asarray(wrap(x + offsets)), np.asarray(wrap(x - offsets))]
    jumps_inv = np.concatenate([np.abs(log_inv - np.asarray(map_system.log_inv_deriv_norm(y))) for y in partners])
    jumps_det = np.concatenate([np.abs(log_det - np.asarray(map_system.log_abs_det(y))) for y in partners])
    scale = np.concatenate([offsets / dist ** beta_hat] * 2)

    need_s1 = float(np.exp(np.max(beta_hat * log_dist + np.abs(log_det))))
    need_s2 = float(np.max(jumps_inv / scale))
    need_s3 = float(np.max(jumps_det / scale))
    B_hat = max(need_s1, need_s2, need_s3, 1.0) * _B_INFLATION

    residuals = {
        "s1": float(np.min(math.log(B_hat) - (beta_hat * log_dist + np.abs(log_det)))),
        "s2": float(np.min(B_hat * scale - jumps_inv)),
        "s3": float(np.min(B_hat * scale - jumps_det)),
    }

    # exponent needed by the Lipschitz conditions: B(beta) ~ d^(beta - 1 - slope)
    # fitted separately around each point of S, worst case reported
    both_dist = np.concatenate([dist, dist])
    both_owner = np.concatenate([owner, owner])
    exponents = []
    for index in np.unique(both_owner):
        mask = (both_owner == index) & (jumps_inv > 0.0)
        if np.count_nonzero(mask) >= 2:
            fit = stats.linregress(np.log(both_dist[mask]), np.log(jumps_inv[mask]))
            exponents.append(1.0 - fit.slope)
    lipschitz_exponent = float(max(exponents)) if exponents else float("nan")

    logger.info("non-degeneracy probe for %s: B_hat=%.6g beta_hat=%.6g zeta_hat=%.6g",
                map_system.name, B_hat, beta_hat, zeta_hat)
    return NonDegeneracyEstimate(
        B_hat=B_hat,
        beta_hat=beta_hat,
        zeta_hat=zeta_hat,
        grid_size=grid_size,
        residuals=residuals,
        lipschitz_exponent=lipschitz_exponent,
    )
