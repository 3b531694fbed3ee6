"""Earth mover's distance between a histogram and a demand vector.

Every bin of the source histogram is a supply that must be shipped out in
full; every bin of the target is a demand with a capacity that may not be
exceeded.  With both sides summing to one this is the classical balanced
EMD.  Flow variables can be restricted to the ``K`` nearest demands of each
supply (see :func:`flow_pattern`), which keeps the linear programs small.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from . import lp_solver
from .errors import (BadK, DimensionMismatch, EmptyPrototypes,
                     InfeasibleTransport, InvalidHistogram, SolverFailure)

HIST_SUM_TOL = 1e-9


def check_histogram(x, D: Optional[int] = None, name: str = "histogram"):
    """Return ``x`` as a float array after checking it is a distribution."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidHistogram(f"{name} must be a non-empty vector")
    if D is not None and x.size != D:
        raise DimensionMismatch(f"{name} has {x.size} bins, expected {D}")
    if not np.all(np.isfinite(x)):
        raise InvalidHistogram(f"{name} has non-finite bins")
    if np.any(x < 0):
        raise InvalidHistogram(f"{name} has negative bins")
    total = x.sum()
    if abs(total - 1.0) > HIST_SUM_TOL:
        raise InvalidHistogram(f"{name} sums to {total!r}, not 1")
    return x


def normalize_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise InvalidHistogram("cannot normalize an empty histogram")
    return counts / total


@dataclass(frozen=True, eq=False)
class GroundDistance:
    """Cost ``d[i, j]`` of moving one unit of mass from bin i to bin j."""

    d: np.ndarray
    symmetric: bool = True

    @property
    def size(self) -> int:
        return self.d.shape[0]

    def scaled(self, alpha: float) -> "GroundDistance":
        return GroundDistance(self.d * alpha, self.symmetric)


def ground_distance(matrix) -> GroundDistance:
    """Validate a user-supplied ground distance matrix.

    Asymmetric matrices are accepted; ``symmetric`` is then False and a
    warning is emitted.
    """
    d = np.array(matrix, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] == 0:
        raise DimensionMismatch("ground distance must be a square matrix")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InvalidHistogram("ground distance entries must be finite and >= 0")
    if np.any(np.abs(np.diag(d)) > 1e-12):
        raise InvalidHistogram("ground distance must have a zero diagonal")
    np.fill_diagonal(d, 0.0)
    symmetric = bool(np.array_equal(d, d.T))
    if not symmetric:
        warnings.warn("ground distance is not symmetric", stacklevel=2)
    d.setflags(write=False)
    return GroundDistance(d, symmetric)


def index_ground_distance(D: int) -> GroundDistance:
    """``|i - j|`` on bin indices; the fallback when bins have no geometry."""
    idx = np.arange(D, dtype=float)
    d = np.abs(idx[:, None] - idx[None, :])
    d.setflags(write=False)
    return GroundDistance(d, True)


def ground_from_prototypes(prototypes) -> GroundDistance:
    """Euclidean distances between prototype centroids.

    Accepts a :class:`~sc_emd.mil_pipeline.PrototypeSet` or a ``(D, p)``
    array of centroids.
    """
    centroids = getattr(prototypes, "centroids", prototypes)
    c = np.asarray(centroids, dtype=float)
    if c.size == 0:
        raise EmptyPrototypes("no prototypes given")
    if c.ndim != 2:
        raise DimensionMismatch("prototype centroids must share one length")
    diff = c[:, None, :] - c[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    d.setflags(write=False)
    return GroundDistance(d, True)


def default_k(D: int) -> int:
    return min(D, max(4, math.ceil(D / 4)))


@dataclass(frozen=True, eq=False)
class FlowPattern:
    """Allowed routes: row ``i`` of ``allowed`` lists the demands supply i may
    ship to, sorted ascending and always containing ``i``."""

    allowed: np.ndarray

    @property
    def D(self) -> int:
        return self.allowed.shape[0]

    @property
    def K(self) -> int:
        return self.allowed.shape[1]

    @property
    def n_routes(self) -> int:
        return self.allowed.size

    @property
    def sources(self) -> np.ndarray:
        return np.repeat(np.arange(self.D), self.K)

    @property
    def targets(self) -> np.ndarray:
        return self.allowed.ravel()

    def route_costs(self, gd: GroundDistance) -> np.ndarray:
        return gd.d[self.sources, self.targets]

    def supply_matrix(self) -> sp.csr_matrix:
        """``D x routes`` matrix summing each supply's outgoing flow."""
        n = self.n_routes
        return sp.csr_matrix((np.ones(n), (self.sources, np.arange(n))),
                             shape=(self.D, n))

    def demand_matrix(self) -> sp.csr_matrix:
        """``D x routes`` matrix summing each demand's incoming flow."""
        n = self.n_routes
        return sp.csr_matrix((np.ones(n), (self.targets, np.arange(n))),
                             shape=(self.D, n))

    @classmethod
    def full(cls, D: int) -> "FlowPattern":
        allowed = np.tile(np.arange(D), (D, 1))
        allowed.setflags(write=False)
        return cls(allowed)


def flow_pattern(gd: GroundDistance, K: int) -> FlowPattern:
    """Keep, for each supply, its ``K`` nearest demands.

    Ties go to the lower index.  The self-route ``i -> i`` is forced in,
    displacing the farthest kept demand if it was not already selected.
    """
    D = gd.size
    if not isinstance(K, (int, np.integer)) or K < 1 or K > D:
        raise BadK(f"K must be an integer in [1, {D}], got {K!r}")
    allowed = np.empty((D, K), dtype=np.int64)
    for i in range(D):
        order = np.argsort(gd.d[i], kind="stable")[:K]
        if i not in order:
            order[-1] = i
        allowed[i] = np.sort(order)
    allowed.setflags(write=False)
    return FlowPattern(allowed)


@dataclass
class FlowMatrix:
    """Transport plan restricted to a :class:`FlowPattern`; ``values[i, k]``
    is the mass moved from supply i to demand ``pattern.allowed[i, k]``."""

    pattern: FlowPattern
    values: np.ndarray

    def to_dense(self) -> np.ndarray:
        F = np.zeros((self.pattern.D, self.pattern.D))
        np.add.at(F, (self.pattern.sources, self.pattern.targets),
                  self.values.ravel())
        return F

    def cost(self, gd: GroundDistance) -> float:
        return float(self.pattern.route_costs(gd) @ self.values.ravel())

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.pattern.targets, weights=self.values.ravel(),
                           minlength=self.pattern.D)


def _check_pair(x, y_bins, gd: GroundDistance, pattern: FlowPattern,
                feas_tol: float):
    D = gd.size
    x = check_histogram(x, D)
    y = np.asarray(y_bins, dtype=float)
    if y.shape != (D,):
        raise DimensionMismatch(f"demand vector must have {D} bins")
    if not np.all(np.isfinite(y)) or np.any(y < -feas_tol):
        raise InvalidHistogram("demand vector must be finite and >= 0")
    if pattern.D != D:
        raise DimensionMismatch("flow pattern and ground distance disagree")
    if y.sum() < x.sum() - feas_tol:
        raise InfeasibleTransport(
            f"total demand {y.sum():.6g} is below total supply {x.sum():.6g}")
    return x, np.maximum(y, 0.0)


def emd(x, y_bins, gd: GroundDistance, pattern: Optional[FlowPattern] = None,
        tol: lp_solver.SolverTolerances = lp_solver.DEFAULT_TOLERANCES
        ) -> Tuple[float, FlowMatrix]:
    """Minimum transport cost shipping all of ``x`` into capacities ``y_bins``.

    Returns ``(cost, flow)``.  Raises :class:`InfeasibleTransport` when the
    demands cannot absorb the supply, either because their total is too small
    or because ``pattern`` forbids the needed routes.
    """
    if pattern is None:
        pattern = FlowPattern.full(gd.size)
    x, y = _check_pair(x, y_bins, gd, pattern, tol.feas_tol)
    problem = lp_solver.LpProblem(
        c=pattern.route_costs(gd),
        A_eq=pattern.supply_matrix(), b_eq=x,
        A_ub=pattern.demand_matrix(), b_ub=y,
    )
    sol = lp_solver.solve(problem, tol)
    if sol.status is lp_solver.Status.INFEASIBLE:
        raise InfeasibleTransport(
            "flow pattern too restrictive to route all supply; widen K")
    if not sol.optimal:
        raise SolverFailure(f"EMD solve ended with status {sol.status.value}")
    flow = FlowMatrix(pattern, sol.primal.reshape(pattern.D, pattern.K))
    return flow.cost(gd), flow


def emd_balanced(x, y, gd: GroundDistance) -> float:
    """EMD between two normalized histograms over the full route set."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size != gd.size:
        raise DimensionMismatch("histograms and ground distance disagree")
    check_histogram(y, gd.size, "second histogram")
    return emd(x, y, gd)[0]
