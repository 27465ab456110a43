"""
Transfer-operator tools: Ulam matrices, invariant densities and the
empirical pushforward densities of the hyperbolic-time constructions.

Densities are expressed as multiples of the uniform probability, so the
normalized Lebesgue measure has density 1 in every cell.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse

from src.dynamics import MapSystem
from src.hyptimes import HyperbolicParams, HyperbolicTimeScanner, HypTimesResult
from src.orbits import EnsembleSpec, OrbitTrace, iterate_ensemble

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Power iteration did not settle within the iteration budget."""

    def __init__(self, last_residual: float, iterations: int):
        self.last_residual = last_residual
        self.iterations = iterations
        super().__init__(f"power iteration stopped after {iterations} iterations "
                         f"with L1 residual {last_residual:.3e}")


def cell_edges(K: int) -> np.ndarray:
    """K + 1 edges of the equal-length partition of [-1, 1)."""
    if K < 1:
        raise ValueError("K must be positive")
    edges = -1.0 + (2.0 / K) * np.arange(K + 1)
    edges[-1] = 1.0
    return edges


def cell_index(x, K: int) -> np.ndarray:
    idx = np.floor((np.asarray(x, dtype=float) + 1.0) * (K / 2.0)).astype(int)
    return np.clip(idx, 0, K - 1)


def histogram(x: np.ndarray, K: int, weight: float) -> np.ndarray:
    return np.bincount(cell_index(x, K), minlength=K) * weight


@dataclass
class UlamOperator:
    """Row-stochastic K x K matrix, P[i, j] = m(cell_i & f^-1(cell_j)) / m(cell_i)."""
    K: int
    P: sparse.csr_matrix

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.P.sum(axis=1)).ravel()

    def left_apply(self, v: np.ndarray) -> np.ndarray:
        """v P, the pushforward of the cell masses v."""
        return self.P.T @ v

    def uniform_residual(self) -> float:
        """L1 distance between u P and u for the uniform vector u."""
        u = np.full(self.K, 1.0 / self.K)
        return float(np.abs(self.left_apply(u) - u).sum())


def _normalize_rows(P: sparse.csr_matrix) -> sparse.csr_matrix:
    sums = np.asarray(P.sum(axis=1)).ravel()
    if np.any(sums <= 0.0):
        raise ValueError("Ulam matrix has an empty row")
    return sparse.diags(1.0 / sums) @ P


def build_ulam_exact(map_system: MapSystem, K: int) -> UlamOperator:
    """
    Ulam matrix from the preimage arcs of every cell.

    Each inverse branch is monotone, so the preimage of an arc is an arc
    and overlaps with the partition are interval intersections. Rows are
    renormalized at the end to absorb rounding in the overlap lengths.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    edges = cell_edges(K)
    lo, hi = edges[:-1], edges[1:]
    widths = hi - lo

    rows, cols, vals = [], [], []
    for arc_lo, arc_hi in map_system.preimage_arcs(lo, hi):
        first = np.searchsorted(edges, arc_lo, side="right") - 1
        last = np.searchsorted(edges, arc_hi, side="left") - 1
        first = np.clip(first, 0, K - 1)
        last = np.clip(np.maximum(last, first), 0, K - 1)
        span = last - first + 1
        offsets = np.arange(span.sum()) - np.repeat(np.cumsum(span) - span, span)
        row = np.repeat(first, span) + offsets
        col = np.repeat(np.arange(K), span)
        overlap = np.minimum(np.repeat(arc_hi, span), hi[row]) - np.maximum(np.repeat(arc_lo, span), lo[row])
        positive = overlap > 0.0
        rows.append(row[positive])
        cols.append(col[positive])
        vals.append(overlap[positive] / widths[row[positive]])

    P = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(K, K)).tocsr()
    P = _normalize_rows(P).tocsr()
    logger.info("exact Ulam matrix for %s: K=%d, %d non-zeros", map_system.name, K, P.nnz)
    return UlamOperator(K=K, P=P)


def build_ulam_sampled(map_system: MapSystem, K: int, samples_per_cell: int, seed: int) -> UlamOperator:
    """Monte Carlo Ulam matrix from jittered stratified samples in every cell."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be positive")
    rng = np.random.default_rng(seed)
    edges = cell_edges(K)
    width = (edges[1:] - edges[:-1])[:, None]
    jitter = rng.random((K, samples_per_cell))
    x = edges[:-1, None] + (np.arange(samples_per_cell) + jitter) * (width / samples_per_cell)
    target = cell_index(map_system.eval(x.ravel()), K)
    source = np.repeat(np.arange(K), samples_per_cell)
    counts = sparse.coo_matrix((np.ones(source.size), (source, target)), shape=(K, K)).tocsr()
    return UlamOperator(K=K, P=_normalize_rows(counts).tocsr())


@dataclass
class EmpiricalDensity:
    """Cell masses of a (sub-)probability measure on the K-cell partition."""
    mass: np.ndarray

    @property
    def K(self) -> int:
        return self.mass.size

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def density(self) -> np.ndarray:
        """Cell values as multiples of the uniform probability density."""
        return self.mass * self.K

    @property
    def left_endpoints(self) -> np.ndarray:
        return cell_edges(self.K)[:-1]

    def sup(self) -> float:
        return float(self.density.max())

    def sup_deviation_from_uniform(self) -> float:
        return float(np.abs(self.density - 1.0).max())

    def coarsen(self, K: int) -> "EmpiricalDensity":
        if self.K % K:
            raise ValueError(f"cannot coarsen {self.K} cells to {K}")
        return EmpiricalDensity(self.mass.reshape(K, -1).sum(axis=1))

    def l1_distance(self, other: "EmpiricalDensity") -> float:
        """L1(m) distance between the two densities, at the coarser resolution."""
        K = min(self.K, other.K)
        return float(np.abs(self.coarsen(K).mass - other.coarsen(K).mass).sum())


def invariant_density(U: UlamOperator, tol: float = 1e-10, max_iters: int = 100_000,
                      initial: Optional[np.ndarray] = None) -> EmpiricalDensity:
    """Left fixed vector of U by power iteration from the uniform vector."""
    v = np.full(U.K, 1.0 / U.K) if initial is None else np.asarray(initial, dtype=float) / np.sum(initial)
    residual = float("inf")
    for iteration in range(1, max_iters + 1):
        w = U.left_apply(v)
        w = w / w.sum()
        residual = float(np.abs(w - v).sum())
        v = w
        if residual <= tol:
            logger.debug("power iteration converged after %d iterations (residual %.3e)", iteration, residual)
            return EmpiricalDensity(v)
    raise ConvergenceError(residual, max_iters)


def refinement_profile(map_system: MapSystem, resolutions: Sequence[int], tol: float = 1e-10,
                       max_iters: int = 100_000) -> List[Dict[str, float]]:
    """L1 distance between invariant densities at consecutive resolutions."""
    densities = [invariant_density(build_ulam_exact(map_system, K), tol, max_iters) for K in resolutions]
    profile = []
    for coarse, fine in zip(densities[:-1], densities[1:]):
        profile.append({
            "K": coarse.K,
            "K_next": fine.K,
            "l1_distance": coarse.l1_distance(fine),
            "sup_deviation": fine.sup_deviation_from_uniform(),
        })
    return profile


def transfer_apply(map_system: MapSystem, phi: Callable[[np.ndarray], np.ndarray], x):
    """T_f(phi)(x) = sum over preimages z of phi(z) / |f'(z)|."""
    total = 0.0
    for z in map_system.inverse_branches(x):
        z = np.asarray(z, dtype=float)
        total = total + np.asarray(phi(z), dtype=float) * np.exp(np.asarray(map_system.log_inv_deriv_norm(z)))
    total = np.asarray(total, dtype=float)
    return float(total) if total.ndim == 0 else total


def pushforward_restricted(map_system: MapSystem, traces: Sequence[OrbitTrace],
                           hyp_results: Sequence[HypTimesResult], n: int, K: int) -> EmpiricalDensity:
    """Histogram of f^n(x) over points with n among their hyperbolic times (nu_n)."""
    if len(traces) != len(hyp_results):
        raise ValueError("one detection result per trace is required")
    weight = 1.0 / len(traces)
    mass = np.zeros(K)
    for trace, result in zip(traces, hyp_results):
        if trace.length < n:
            raise ValueError(f"trace of length {trace.length} is shorter than n = {n}")
        if np.any(result.times == n):
            mass[cell_index(trace.x[n], K)] += weight
    return EmpiricalDensity(mass)


def restricted_pushforward_profile(map_system: MapSystem, ensemble: EnsembleSpec, params: HyperbolicParams,
                                   ns: Sequence[int], K: int) -> Dict[int, EmpiricalDensity]:
    """nu_n for several n in one streamed pass over the ensemble."""
    points = ensemble.points()
    wanted = sorted(set(int(n) for n in ns))
    weight = 1.0 / points.size
    scanner = HyperbolicTimeScanner(params, points.size)
    out: Dict[int, EmpiricalDensity] = {}
    for step in iterate_ensemble(map_system, points, wanted[-1], params.delta):
        hyperbolic = scanner.update(step.a, step.r) & step.alive
        if scanner.n in wanted:
            image = np.asarray(map_system.eval(step.x[hyperbolic]))
            out[scanner.n] = EmpiricalDensity(histogram(image, K, weight))
    return out


def cesaro_density(map_system: MapSystem, ensemble: EnsembleSpec, n: int, K: int) -> EmpiricalDensity:
    """mu_n = (1/n) sum_{j<n} f^j_* m, estimated on the ensemble."""
    if n < 1:
        raise ValueError("n must be at least 1")
    points = ensemble.points()
    weight = 1.0 / (n * points.size)
    mass = np.zeros(K)
    for step in iterate_ensemble(map_system, points, n, 1.0):
        mass += histogram(step.x[step.alive], K, weight)
    return EmpiricalDensity(mass)


@dataclass
class GapPushforward:
    """eta_n and the bookkeeping of gaps that had not closed by the horizon."""
    density: EmpiricalDensity
    started: int
    unresolved: int


def gap_pushforward(map_system: MapSystem, ensemble: EnsembleSpec, params: HyperbolicParams,
                    n: int, K: int, horizon: int) -> GapPushforward:
    """
    eta_n: mass carried by f^{n+j} for 0 < j < k over points whose
    hyperbolic time n is followed by the next one at n + k.

    Gaps still open at the horizon contribute their iterates up to it and
    are counted as unresolved.
    """
    if horizon <= n:
        raise ValueError("horizon must exceed n")
    points = ensemble.points()
    weight = 1.0 / points.size
    scanner = HyperbolicTimeScanner(params, points.size)
    open_gap = np.zeros(points.size, dtype=bool)
    mass = np.zeros(K)
    started = 0
    for step in iterate_ensemble(map_system, points, horizon, params.delta):
        hyperbolic = scanner.update(step.a, step.r) & step.alive
        t = scanner.n
        if t == n:
            open_gap = hyperbolic.copy()
            started = int(np.count_nonzero(open_gap))
            continue
        if t < n:
            continue
        # x_t lies inside the gap unless t closes it
        open_gap &= ~hyperbolic & step.alive
        if not np.any(open_gap):
            break
        mass += histogram(np.asarray(map_system.eval(step.x[open_gap])), K, weight)
    return GapPushforward(density=EmpiricalDensity(mass), started=started,
                          unresolved=int(np.count_nonzero(open_gap)))
