"""Sparse coding of histograms with an EMD reconstruction loss.

Each histogram ``x`` is approximated by ``U @ v`` where the columns of ``U``
are basic histograms.  The loss is the EMD from ``x`` to ``U @ v`` plus
``gamma * sum(xi)`` where ``xi >= |v|`` elementwise.  With the dictionary
fixed, coding one sample is a single LP over its flows, its code and its
slack; with the codes fixed, the dictionary update is one joint LP over all
flows and all dictionary entries.  :func:`fit` alternates the two.

Flows must ship every supply bin in full (``sum_j f_ij = x_i``) and may not
exceed the reconstructed demand (``sum_i f_ij <= (U v)_j``).  Because the
columns of ``U`` sum to one, every feasible code has ``sum(v) >= 1``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import lp_solver
from .emd_core import (FlowMatrix, FlowPattern, GroundDistance,
                       check_histogram, default_k, flow_pattern,
                       index_ground_distance)
from .errors import (ConfigError, DimensionMismatch, InfeasibleTransport,
                     InfeasibleUpdate, SolverFailure, TooFewSamples)

log = logging.getLogger(__name__)

MAX_LP_VARS = 2_000_000


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit`.  ``K=None`` picks :func:`default_k`."""

    M: int
    T: int = 10
    gamma: float = 0.1
    K: Optional[int] = None
    seed: int = 0
    rel_tol: float = 1e-6
    max_vars: int = MAX_LP_VARS
    jobs: int = 1

    def validate(self, N: Optional[int] = None, D: Optional[int] = None):
        if not isinstance(self.M, (int, np.integer)) or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M!r}")
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T!r}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.K is not None and D is not None and not 1 <= self.K <= D:
            raise ConfigError(f"K must lie in [1, {D}], got {self.K}")
        if N is not None and self.M > N:
            raise TooFewSamples(f"need at least M={self.M} samples, got {N}")


@dataclass
class ScemdModel:
    """Learned basic histograms plus everything needed to encode new data.

    ``dictionary`` is ``D x M`` with one basic histogram per column.
    ``fit_trace`` holds the training objective after every half-step.
    """

    dictionary: np.ndarray
    gamma: float
    gd: GroundDistance
    pattern: FlowPattern
    fit_trace: List[float] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    codes: Optional[np.ndarray] = None

    @property
    def D(self) -> int:
        return self.dictionary.shape[0]

    @property
    def M(self) -> int:
        return self.dictionary.shape[1]

    @property
    def K(self) -> int:
        return self.pattern.K

    @classmethod
    def from_dictionary(cls, dictionary, gamma: float = 0.1,
                        gd: Optional[GroundDistance] = None,
                        K: Optional[int] = None) -> "ScemdModel":
        U = np.array(dictionary, dtype=float)
        if U.ndim != 2 or U.shape[1] < 1:
            raise DimensionMismatch("dictionary must be a D x M matrix")
        for m in range(U.shape[1]):
            check_histogram(U[:, m], name=f"dictionary column {m}")
        gd = gd if gd is not None else index_ground_distance(U.shape[0])
        if gd.size != U.shape[0]:
            raise DimensionMismatch("dictionary and ground distance disagree")
        if gamma < 0:
            raise ConfigError("gamma must be >= 0")
        K = default_k(gd.size) if K is None else K
        return cls(U, float(gamma), gd, flow_pattern(gd, K))

    def with_gamma(self, gamma: float) -> "ScemdModel":
        return ScemdModel(self.dictionary, float(gamma), self.gd,
                          self.pattern)


@dataclass
class EncodeResult:
    code: np.ndarray
    slack: np.ndarray
    flow: FlowMatrix
    emd_cost: float
    objective: float


def reconstruct(model: ScemdModel, code) -> np.ndarray:
    """``U @ v``.  Entries can be negative for arbitrary codes; codes from
    :func:`encode_one` reconstruct to nonnegative vectors."""
    v = np.asarray(code, dtype=float)
    if v.shape != (model.M,):
        raise DimensionMismatch(f"code must have length {model.M}")
    return model.dictionary @ v


def _encode_problem(x: np.ndarray, model: ScemdModel) -> lp_solver.LpProblem:
    # variables: [flows (D*K) | v (M) | xi (M)]
    pat, M = model.pattern, model.M
    R = pat.n_routes
    n = R + 2 * M
    c = np.concatenate([pat.route_costs(model.gd), np.zeros(M),
                        np.full(M, model.gamma)])
    A_eq = sp.hstack([pat.supply_matrix(), sp.csr_matrix((pat.D, 2 * M))])
    eye = sp.identity(M, format="csr")
    demand = sp.hstack([pat.demand_matrix(),
                        sp.csr_matrix(-model.dictionary),
                        sp.csr_matrix((pat.D, M))])
    upper = sp.hstack([sp.csr_matrix((M, R)), eye, -eye])
    lower = sp.hstack([sp.csr_matrix((M, R)), -eye, -eye])
    A_ub = sp.vstack([demand, upper, lower], format="csr")
    lo = np.zeros(n)
    lo[R:R + M] = -np.inf
    return lp_solver.LpProblem(c=c, A_eq=A_eq, b_eq=x, A_ub=A_ub,
                               b_ub=np.zeros(pat.D + 2 * M), lo=lo)


def encode_one(x, model: ScemdModel,
               tol: lp_solver.SolverTolerances = lp_solver.DEFAULT_TOLERANCES
               ) -> EncodeResult:
    """Optimal sparse code of one histogram under a fixed dictionary."""
    x = check_histogram(x, model.D)
    sol = lp_solver.solve(_encode_problem(x, model), tol)
    if sol.status is lp_solver.Status.INFEASIBLE:
        raise InfeasibleTransport(
            "no code can route this histogram under the flow pattern; "
            "widen K")
    if not sol.optimal:
        raise SolverFailure(f"encode LP ended with status {sol.status.value}")
    R, M = model.pattern.n_routes, model.M
    flow = FlowMatrix(model.pattern,
                      sol.primal[:R].reshape(model.D, model.K))
    v = sol.primal[R:R + M].copy()
    xi = sol.primal[R + M:].copy()
    if model.gamma == 0:
        # xi carries no cost here, so the LP leaves it anywhere above |v|
        xi = np.abs(v)
    cost = flow.cost(model.gd)
    return EncodeResult(v, xi, flow, cost, cost + model.gamma * float(xi.sum()))


def _encode_chunk(args):
    xs, model, tol = args
    out = []
    for x in xs:
        try:
            out.append(encode_one(x, model, tol))
        except Exception as exc:  # reported with its index by the caller
            out.append(exc)
    return out


class EncodeBatchError(SolverFailure):
    """Raised when some items of a batch fail; ``failures`` maps index to
    exception."""

    def __init__(self, failures):
        self.failures = failures
        idx = ", ".join(str(i) for i in sorted(failures))
        first = failures[min(failures)]
        super().__init__(f"encoding failed for items [{idx}]: {first}")
        if all(isinstance(e, InfeasibleTransport) for e in failures.values()):
            self.code = InfeasibleTransport.code


def encode_batch(xs: Sequence, model: ScemdModel, jobs: int = 1,
                 tol: lp_solver.SolverTolerances = lp_solver.DEFAULT_TOLERANCES
                 ) -> List[EncodeResult]:
    """Encode every histogram independently; results keep input order."""
    xs = [np.asarray(x, dtype=float) for x in xs]
    if jobs <= 1 or len(xs) < 2:
        results = _encode_chunk((xs, model, tol))
    else:
        chunks = np.array_split(np.arange(len(xs)), min(jobs, len(xs)))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_encode_chunk,
                             [([xs[i] for i in ch], model, tol)
                              for ch in chunks])
            results = [r for part in parts for r in part]
    failures = {i: r for i, r in enumerate(results)
                if isinstance(r, Exception)}
    if failures:
        raise EncodeBatchError(failures)
    return results


def update_dictionary(xs: Sequence, codes: Sequence, model: ScemdModel,
                      tol: lp_solver.SolverTolerances = lp_solver.DEFAULT_TOLERANCES,
                      max_vars: int = MAX_LP_VARS):
    """Re-optimize the dictionary for fixed codes.

    Solves one LP over the flows of all samples and all dictionary entries.
    Returns ``(dictionary, total_transport_cost)``.
    """
    X = np.array([check_histogram(x, model.D) for x in xs])
    V = np.asarray(codes, dtype=float)
    N, D, M = X.shape[0], model.D, model.M
    if N < 1:
        raise TooFewSamples("need at least one sample")
    if V.shape != (N, M):
        raise DimensionMismatch(f"codes must be {N} x {M}, got {V.shape}")
    short = np.flatnonzero(V.sum(axis=1) < 1.0 - 1e-8)
    if short.size:
        raise InfeasibleUpdate(
            f"codes {short.tolist()} have total weight below 1 and cannot "
            "carry the full supply")
    pat = model.pattern
    R = pat.n_routes
    n_flow = N * R
    n = n_flow + D * M
    if n > max_vars:
        raise ConfigError(
            f"dictionary update needs {n} variables, above the cap of "
            f"{max_vars}; reduce N, D or K")

    # variables: [f^1 | ... | f^N | u_1 | ... | u_M], u_m is column m of U
    eye_n = sp.identity(N, format="csr")
    supply = sp.hstack([sp.kron(eye_n, pat.supply_matrix()),
                        sp.csr_matrix((N * D, D * M))])
    colsum = sp.hstack([sp.csr_matrix((M, n_flow)),
                        sp.kron(sp.identity(M), np.ones((1, D)))])
    A_eq = sp.vstack([supply, colsum], format="csr")
    b_eq = np.concatenate([X.ravel(), np.ones(M)])
    capacity = sp.kron(sp.csr_matrix(-V), sp.identity(D))
    A_ub = sp.hstack([sp.kron(eye_n, pat.demand_matrix()), capacity],
                     format="csr")
    A_ub.eliminate_zeros()
    c = np.concatenate([np.tile(pat.route_costs(model.gd), N),
                        np.zeros(D * M)])
    problem = lp_solver.LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub,
                                  b_ub=np.zeros(N * D))
    sol = lp_solver.solve(problem, tol)
    if sol.status is lp_solver.Status.INFEASIBLE:
        raise InfeasibleUpdate("dictionary update LP is infeasible")
    if not sol.optimal:
        raise SolverFailure(
            f"dictionary update ended with status {sol.status.value}")
    U = sol.primal[n_flow:].reshape(M, D).T.copy()
    U = np.maximum(U, 0.0)
    U /= U.sum(axis=0, keepdims=True)
    total = float(c[:n_flow] @ sol.primal[:n_flow])
    return U, total


def objective(xs: Sequence, model: ScemdModel,
              results: Sequence[EncodeResult]) -> float:
    """Training objective recomputed from the flows and slacks."""
    if len(xs) != len(results):
        raise DimensionMismatch("one result per sample required")
    total = 0.0
    for x, res in zip(xs, results):
        if len(x) != model.D or res.flow.pattern.D != model.D:
            raise DimensionMismatch("result does not match the model size")
        if res.slack.shape != (model.M,):
            raise DimensionMismatch("slack length does not match the model")
        total += res.flow.cost(model.gd) + model.gamma * float(res.slack.sum())
    return total


def _half_step_value(results: Sequence[EncodeResult], gamma: float) -> float:
    return float(sum(r.emd_cost + gamma * r.slack.sum() for r in results))


def initial_dictionary(X: np.ndarray, M: int, seed: int) -> np.ndarray:
    """``M`` distinct training histograms, as columns.

    The first is drawn uniformly; each further one with probability
    proportional to its squared L1 distance from the nearest one already
    drawn.  Spreading the picks this way keeps every region of the data
    within reach of some column, which the encode LP needs to be feasible.
    """
    rng = np.random.default_rng(seed)
    N = X.shape[0]
    chosen = [int(rng.integers(N))]
    nearest = np.abs(X - X[chosen[0]]).sum(axis=1) ** 2
    for _ in range(1, M):
        weights = nearest.copy()
        weights[chosen] = 0.0
        total = weights.sum()
        if total > 0:
            idx = int(rng.choice(N, p=weights / total))
        else:
            # remaining samples duplicate chosen ones
            idx = int(rng.choice(np.setdiff1d(np.arange(N), chosen)))
        chosen.append(idx)
        nearest = np.minimum(nearest, np.abs(X - X[idx]).sum(axis=1) ** 2)
    return X[chosen].T.copy()


def fit(xs: Sequence, config: FitConfig,
        gd: Optional[GroundDistance] = None,
        tol: lp_solver.SolverTolerances = lp_solver.DEFAULT_TOLERANCES
        ) -> ScemdModel:
    """Learn a dictionary by alternating code and dictionary updates.

    Runs at most ``config.T`` rounds and stops early once a round lowers the
    objective by less than ``config.rel_tol`` relative.  A final coding pass
    under the last dictionary fills ``model.codes``, so re-encoding the
    training data with the returned model reproduces them.
    """
    if len(xs) == 0:
        raise TooFewSamples("no training histograms")
    X = np.array([check_histogram(x, name=f"histogram {n}")
                  for n, x in enumerate(xs)])
    N, D = X.shape
    config.validate(N, D)
    gd = gd if gd is not None else index_ground_distance(D)
    if gd.size != D:
        raise DimensionMismatch("ground distance and histograms disagree")
    K = default_k(D) if config.K is None else config.K
    model = ScemdModel(initial_dictionary(X, config.M, config.seed),
                       float(config.gamma), gd, flow_pattern(gd, K))

    trace: List[float] = []
    prev_round = None
    for t in range(config.T):
        results = encode_batch(X, model, config.jobs, tol)
        trace.append(_half_step_value(results, model.gamma))
        V = np.array([r.code for r in results])
        slack_total = float(sum(r.slack.sum() for r in results))
        U, cost = update_dictionary(X, V, model, tol, config.max_vars)
        model.dictionary = U
        trace.append(cost + model.gamma * slack_total)
        model.n_iter = t + 1
        log.info("round %d: objective %.10g", t + 1, trace[-1])
        if prev_round is not None and \
                prev_round - trace[-1] < config.rel_tol * max(abs(prev_round), 1e-12):
            model.converged = True
            break
        prev_round = trace[-1]

    results = encode_batch(X, model, config.jobs, tol)
    trace.append(_half_step_value(results, model.gamma))
    model.codes = np.array([r.code for r in results])
    model.fit_trace = trace
    return model
