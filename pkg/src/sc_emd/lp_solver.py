"""Bounded-variable revised simplex for sparse linear programs.

Problems have the form::

    minimize    c @ z
    subject to  A_eq @ z == b_eq
                A_ub @ z <= b_ub
                lo <= z <= hi

where ``lo`` entries are finite or ``-inf`` and ``hi`` entries are finite or
``+inf``.  ``numpy.inf`` is the only accepted marker for a missing bound.

The solver is a two-phase primal simplex.  Nonbasic variables sit at one of
their bounds (free variables at zero), so box constraints never become rows.
The basis is held as a sparse LU factorization plus a product-form eta file
that is folded back into a fresh factorization every ``refactor_every``
pivots.  Pricing uses Dantzig's rule and falls back to Bland's rule after a
run of degenerate pivots, which guarantees termination.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import MalformedProblem

INF = np.inf

__all__ = [
    "INF",
    "Status",
    "SolverTolerances",
    "LpProblem",
    "LpSolution",
    "CertificateReport",
    "solve",
    "verify",
    "dump_problem",
    "load_problem",
]


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True)
class SolverTolerances:
    """Numerical settings for :func:`solve`.

    ``max_iter=None`` means ``50 * (n_vars + n_constraints)``.
    """

    feas_tol: float = 1e-9
    opt_tol: float = 1e-9
    pivot_tol: float = 1e-9
    max_iter: Optional[int] = None
    bland_after: int = 50
    refactor_every: int = 64


DEFAULT_TOLERANCES = SolverTolerances()


def _as_csr(mat, n_vars: int, name: str) -> sp.csr_matrix:
    if mat is None:
        return sp.csr_matrix((0, n_vars))
    mat = sp.csr_matrix(mat, dtype=float)
    if mat.shape[1] != n_vars:
        raise MalformedProblem(
            f"{name} has {mat.shape[1]} columns, expected {n_vars}")
    return mat


@dataclass
class LpProblem:
    """A linear program with sparse constraint rows and box bounds."""

    c: np.ndarray
    A_eq: sp.csr_matrix = None
    b_eq: np.ndarray = None
    A_ub: sp.csr_matrix = None
    b_ub: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_eq = _as_csr(self.A_eq, n, "A_eq")
        self.A_ub = _as_csr(self.A_ub, n, "A_ub")
        self.b_eq = (np.zeros(0) if self.b_eq is None
                     else np.asarray(self.b_eq, dtype=float).ravel())
        self.b_ub = (np.zeros(0) if self.b_ub is None
                     else np.asarray(self.b_ub, dtype=float).ravel())
        self.lo = np.broadcast_to(
            np.asarray(0.0 if self.lo is None else self.lo, dtype=float),
            (n,)).copy()
        self.hi = np.broadcast_to(
            np.asarray(INF if self.hi is None else self.hi, dtype=float),
            (n,)).copy()
        self._validate()

    def _validate(self):
        if self.A_eq.shape[0] != self.b_eq.size:
            raise MalformedProblem("A_eq and b_eq disagree on row count")
        if self.A_ub.shape[0] != self.b_ub.size:
            raise MalformedProblem("A_ub and b_ub disagree on row count")
        for name, arr in (("c", self.c), ("b_eq", self.b_eq),
                          ("b_ub", self.b_ub), ("A_eq", self.A_eq.data),
                          ("A_ub", self.A_ub.data)):
            if not np.all(np.isfinite(arr)):
                raise MalformedProblem(f"{name} contains NaN or Inf")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.hi)):
            raise MalformedProblem("bounds contain NaN")
        if np.any(self.lo == INF) or np.any(self.hi == -INF):
            raise MalformedProblem("lower bound +inf or upper bound -inf")
        if np.any(self.lo > self.hi):
            raise MalformedProblem("some lower bound exceeds its upper bound")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.b_eq.size

    @property
    def n_ub(self) -> int:
        return self.b_ub.size

    @classmethod
    def from_rows(cls, c, eq: Iterable = (), ub: Iterable = (), lo=0.0,
                  hi=INF) -> "LpProblem":
        """Build a problem from ``(indices, coefficients, rhs)`` rows."""
        n = len(c)
        mats = []
        for rows in (list(eq), list(ub)):
            data, cols, ptr, rhs = [], [], [0], []
            for idx, vals, b in rows:
                idx = np.asarray(idx, dtype=np.int64).ravel()
                vals = np.asarray(vals, dtype=float).ravel()
                if idx.size != vals.size:
                    raise MalformedProblem("row index/value length mismatch")
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise MalformedProblem(
                        f"row index out of range for {n} variables")
                cols.extend(idx.tolist())
                data.extend(vals.tolist())
                ptr.append(len(cols))
                rhs.append(float(b))
            mat = sp.csr_matrix((data, cols, ptr), shape=(len(rhs), n))
            mats.append((mat, np.asarray(rhs, dtype=float)))
        (A_eq, b_eq), (A_ub, b_ub) = mats
        return cls(c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub,
                   lo=lo, hi=hi)


@dataclass
class LpSolution:
    status: Status
    primal: np.ndarray
    objective_value: float
    dual_eq: np.ndarray
    dual_ub: np.ndarray
    reduced_costs: np.ndarray
    iterations: int = 0
    certificate: Optional[np.ndarray] = None
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


# nonbasic states
_BASIC, _AT_LO, _AT_HI, _FREE, _FIXED = 0, 1, 2, 3, 4


class _Simplex:
    """Working state of a single solve."""

    def __init__(self, problem: LpProblem, tol: SolverTolerances):
        self.tol = tol
        n, n_eq, n_ub = problem.n_vars, problem.n_eq, problem.n_ub
        m = n_eq + n_ub
        self.n, self.m, self.n_eq = n, m, n_eq

        A_struct = sp.vstack([problem.A_eq, problem.A_ub], format="csc")
        b = np.concatenate([problem.b_eq, problem.b_ub])
        lo_s, hi_s = problem.lo, problem.hi
        x_s = np.where(np.isfinite(lo_s), lo_s,
                       np.where(np.isfinite(hi_s), hi_s, 0.0))
        resid = b - A_struct @ x_s

        # slack for a <= row is basic when its starting value is feasible;
        # every other row gets an artificial
        slack_ok = np.zeros(m, dtype=bool)
        slack_ok[n_eq:] = resid[n_eq:] >= 0.0
        art_rows = np.flatnonzero(~slack_ok)
        n_art = art_rows.size
        art_sign = np.where(resid[art_rows] >= 0.0, 1.0, -1.0)

        slack = sp.csc_matrix(
            (np.ones(n_ub), (np.arange(n_eq, m), np.arange(n_ub))),
            shape=(m, n_ub))
        art = sp.csc_matrix((art_sign, (art_rows, np.arange(n_art))),
                            shape=(m, n_art))
        self.A = sp.hstack([A_struct, slack, art], format="csc")
        self.AT = self.A.T.tocsr()
        self.b = b
        self.n_total = n + n_ub + n_art
        self.art_start = n + n_ub

        self.lo = np.concatenate([lo_s, np.zeros(n_ub + n_art)])
        self.hi = np.concatenate([hi_s, np.full(n_ub + n_art, INF)])
        self.x = np.concatenate([x_s, np.zeros(n_ub + n_art)])

        basis = np.empty(m, dtype=np.int64)
        slack_rows = np.flatnonzero(slack_ok)
        basis[slack_rows] = n + (slack_rows - n_eq)
        basis[art_rows] = self.art_start + np.arange(n_art)
        self.basis = basis
        self.x[basis] = 0.0
        self.x[n + (slack_rows - n_eq)] = resid[slack_rows]
        self.x[self.art_start:] = np.abs(resid[art_rows])

        state = np.full(self.n_total, _AT_LO, dtype=np.int8)
        fin_lo, fin_hi = np.isfinite(self.lo), np.isfinite(self.hi)
        state[~fin_lo & fin_hi] = _AT_HI
        state[~fin_lo & ~fin_hi] = _FREE
        state[fin_lo & fin_hi & (self.lo == self.hi)] = _FIXED
        state[basis] = _BASIC
        self.state = state

        self.iterations = 0
        self.max_iter = (tol.max_iter if tol.max_iter is not None
                         else 50 * (n + m))
        self._factorize()

    # basis factorization ------------------------------------------------

    def _factorize(self):
        self.etas = []
        if self.m == 0:
            self.lu = None
            return
        B = self.A[:, self.basis]
        try:
            self.lu = splu(B.tocsc(), permc_spec="COLAMD")
        except RuntimeError as exc:
            raise _SingularBasis(str(exc)) from exc
        # recompute basic values from the nonbasic ones
        x_nb = self.x.copy()
        x_nb[self.basis] = 0.0
        rhs = self.b - self.A @ x_nb
        self.x[self.basis] = self.lu.solve(rhs)

    def _ftran(self, col: np.ndarray) -> np.ndarray:
        w = self.lu.solve(col)
        for r, alpha in self.etas:
            wr = w[r] / alpha[r]
            w -= wr * alpha
            w[r] = wr
        return w

    def _btran(self, cb: np.ndarray) -> np.ndarray:
        w = cb.astype(float, copy=True)
        for r, alpha in reversed(self.etas):
            w[r] = (w[r] - (w @ alpha - w[r] * alpha[r])) / alpha[r]
        return self.lu.solve(w, trans="T")

    def _column(self, j: int) -> np.ndarray:
        col = np.zeros(self.m)
        lo, hi = self.A.indptr[j], self.A.indptr[j + 1]
        col[self.A.indices[lo:hi]] = self.A.data[lo:hi]
        return col

    # main loop ------------------------------------------------------------

    def run(self, cost: np.ndarray) -> Status:
        tol = self.tol
        degenerate_run = 0
        bland = False
        while True:
            if self.iterations >= self.max_iter:
                return Status.ITERATION_LIMIT
            if len(self.etas) >= tol.refactor_every:
                self._factorize()
            y = self._btran(cost[self.basis]) if self.m else np.zeros(0)
            d = cost - self.AT @ y if self.m else cost.copy()
            st = self.state
            eligible = (((st == _AT_LO) & (d < -tol.opt_tol))
                        | ((st == _AT_HI) & (d > tol.opt_tol))
                        | ((st == _FREE) & (np.abs(d) > tol.opt_tol)))
            candidates = np.flatnonzero(eligible)
            if candidates.size == 0:
                self.y = y
                return Status.OPTIMAL
            if bland:
                q = int(candidates[0])
            else:
                # argmax returns the first maximizer: lowest index on ties
                q = int(candidates[np.argmax(np.abs(d[candidates]))])
            sigma = -1.0 if d[q] > 0 else 1.0

            alpha = self._ftran(self._column(q)) if self.m else np.zeros(0)
            delta = -sigma * alpha
            step, r, to_upper = self._ratio_test(delta, bland)
            flip = self.hi[q] - self.lo[q]
            if math.isinf(step) and math.isinf(flip):
                direction = np.zeros(self.n_total)
                direction[q] = sigma
                direction[self.basis] = delta
                self.ray = direction
                return Status.UNBOUNDED

            self.iterations += 1
            if flip <= step:
                # entering variable runs to its opposite bound
                self.x[self.basis] += flip * delta
                if sigma > 0:
                    self.x[q], st[q] = self.hi[q], _AT_HI
                else:
                    self.x[q], st[q] = self.lo[q], _AT_LO
                step = flip
            else:
                self.x[self.basis] += step * delta
                self.x[q] += sigma * step
                leaving = self.basis[r]
                if to_upper:
                    self.x[leaving], st[leaving] = self.hi[leaving], _AT_HI
                else:
                    self.x[leaving], st[leaving] = self.lo[leaving], _AT_LO
                self.basis[r] = q
                st[q] = _BASIC
                self.etas.append((r, alpha))

            if step <= 1e-12:
                degenerate_run += 1
                if degenerate_run >= tol.bland_after:
                    bland = True
            else:
                degenerate_run = 0
                bland = False

    def _ratio_test(self, delta: np.ndarray, bland: bool):
        if self.m == 0:
            return INF, -1, False
        ptol = self.tol.pivot_tol
        xb = self.x[self.basis]
        lob = self.lo[self.basis]
        hib = self.hi[self.basis]
        limits = np.full(self.m, INF)
        dec = (delta < -ptol) & np.isfinite(lob)
        inc = (delta > ptol) & np.isfinite(hib)
        limits[dec] = np.maximum(xb[dec] - lob[dec], 0.0) / -delta[dec]
        limits[inc] = np.maximum(hib[inc] - xb[inc], 0.0) / delta[inc]
        step = limits.min()
        if math.isinf(step):
            return INF, -1, False
        ties = np.flatnonzero(limits <= step + 1e-12)
        if bland:
            r = int(ties[np.argmin(self.basis[ties])])
        else:
            # prefer the largest pivot among ties for stability
            r = int(ties[np.argmax(np.abs(delta[ties]))])
        return float(limits[r]), r, bool(delta[r] > 0)

    def finish(self):
        """Refactorize and return fresh basic values and duals."""
        self._factorize()


class _SingularBasis(RuntimeError):
    pass


def _empty_solution(problem: LpProblem, status: Status, x: np.ndarray,
                    iterations: int, message: str = "",
                    certificate=None) -> LpSolution:
    return LpSolution(
        status=status,
        primal=x,
        objective_value=float(problem.c @ x),
        dual_eq=np.zeros(problem.n_eq),
        dual_ub=np.zeros(problem.n_ub),
        reduced_costs=np.zeros(problem.n_vars),
        iterations=iterations,
        certificate=certificate,
        message=message,
    )


def solve(problem: LpProblem,
          tol: SolverTolerances = DEFAULT_TOLERANCES) -> LpSolution:
    """Solve ``problem`` to optimality.

    Returns an :class:`LpSolution` whose ``status`` tells the outcome.  For
    an infeasible problem ``certificate`` holds the phase-one row duals (a
    Farkas direction); for an unbounded one it holds an improving ray in the
    structural variables.  Hitting the iteration limit yields status
    ``ITERATION_LIMIT`` with the last iterate as ``primal``.
    """
    if not isinstance(problem, LpProblem):
        raise MalformedProblem("expected an LpProblem")
    try:
        return _solve(problem, tol)
    except _SingularBasis:
        # a numerically singular basis is rare; retry with a stricter pivot
        # tolerance and more frequent refactorization
        strict = SolverTolerances(
            feas_tol=tol.feas_tol, opt_tol=tol.opt_tol,
            pivot_tol=max(tol.pivot_tol * 1e3, 1e-7), max_iter=tol.max_iter,
            bland_after=tol.bland_after, refactor_every=8)
        return _solve(problem, strict)


def _solve(problem: LpProblem, tol: SolverTolerances) -> LpSolution:
    n = problem.n_vars
    s = _Simplex(problem, tol)

    n_art = s.n_total - s.art_start
    if n_art:
        phase1 = np.zeros(s.n_total)
        phase1[s.art_start:] = 1.0
        status = s.run(phase1)
        s.finish()
        if status is Status.ITERATION_LIMIT:
            return _empty_solution(problem, status, s.x[:n].copy(),
                                   s.iterations, "limit hit in phase one")
        infeas = float(np.abs(s.x[s.art_start:]).max())
        if infeas > tol.feas_tol:
            y = s._btran(phase1[s.basis])
            return _empty_solution(problem, Status.INFEASIBLE,
                                   s.x[:n].copy(), s.iterations,
                                   f"phase one residual {infeas:.3e}",
                                   certificate=y)
        # artificials are pinned to zero for phase two
        s.hi[s.art_start:] = 0.0
        s.x[s.art_start:] = np.where(
            s.state[s.art_start:] == _BASIC, s.x[s.art_start:], 0.0)
        nb = s.state[s.art_start:] != _BASIC
        s.state[s.art_start:][nb] = _FIXED

    cost = np.zeros(s.n_total)
    cost[:n] = problem.c
    status = s.run(cost)
    if status is Status.UNBOUNDED:
        return _empty_solution(problem, status, s.x[:n].copy(), s.iterations,
                               certificate=s.ray[:n].copy())
    s.finish()
    x = s.x[:n].copy()
    # snap values that drifted by rounding onto their bounds
    x = np.clip(x, problem.lo, problem.hi)
    if status is Status.ITERATION_LIMIT:
        return _empty_solution(problem, status, x, s.iterations,
                               "limit hit in phase two")
    y = s._btran(cost[s.basis]) if s.m else np.zeros(0)
    A_struct = s.A[:, :n]
    reduced = problem.c - A_struct.T @ y
    return LpSolution(
        status=Status.OPTIMAL,
        primal=x,
        objective_value=float(problem.c @ x),
        dual_eq=y[:problem.n_eq].copy(),
        dual_ub=-y[problem.n_eq:].copy(),
        reduced_costs=reduced,
        iterations=s.iterations,
    )


# certification ------------------------------------------------------------


@dataclass
class CertificateReport:
    primal_residual: float
    dual_residual: float
    complementarity: float
    duality_gap: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.primal_residual, self.dual_residual,
                   self.complementarity, self.duality_gap) <= self.tol

    @property
    def verdict(self) -> str:
        return "Pass" if self.passed else "Fail"


def verify(problem: LpProblem, solution: LpSolution,
           tol: float = 1e-8) -> CertificateReport:
    """Check a primal/dual pair against the optimality conditions.

    Bound multipliers are recovered from the reduced costs, so only the row
    duals of ``solution`` are consulted.
    """
    z = np.asarray(solution.primal, dtype=float)
    y = np.asarray(solution.dual_eq, dtype=float)
    lam = np.asarray(solution.dual_ub, dtype=float)
    lo, hi = problem.lo, problem.hi

    parts = [np.zeros(1)]
    if problem.n_eq:
        parts.append(np.abs(problem.A_eq @ z - problem.b_eq))
    ub_slack = np.zeros(0)
    if problem.n_ub:
        ub_slack = problem.b_ub - problem.A_ub @ z
        parts.append(np.maximum(-ub_slack, 0.0))
    parts.append(np.maximum(lo - z, 0.0))
    parts.append(np.maximum(z - hi, 0.0))
    primal_res = float(max(p.max() for p in parts))

    red = problem.c - problem.A_eq.T @ y + problem.A_ub.T @ lam
    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    mu_lo = np.where(fin_lo, np.maximum(red, 0.0), 0.0)
    mu_hi = np.where(fin_hi, np.maximum(-red, 0.0), 0.0)
    dual_res = float(max(np.abs(red - mu_lo + mu_hi).max(initial=0.0),
                         np.maximum(-lam, 0.0).max(initial=0.0)))

    lo_gap = np.where(fin_lo, np.abs(z - np.where(fin_lo, lo, 0.0)), 0.0)
    hi_gap = np.where(fin_hi, np.abs(np.where(fin_hi, hi, 0.0) - z), 0.0)
    comp = float(max((np.abs(lam) * np.abs(ub_slack)).max(initial=0.0),
                     (mu_lo * lo_gap).max(initial=0.0),
                     (mu_hi * hi_gap).max(initial=0.0)))

    dual_obj = (problem.b_eq @ y - problem.b_ub @ lam
                + mu_lo[fin_lo] @ lo[fin_lo] - mu_hi[fin_hi] @ hi[fin_hi])
    gap = float(abs(problem.c @ z - dual_obj))
    return CertificateReport(primal_res, dual_res, comp, gap, tol)


# LP-DUMP v1 ---------------------------------------------------------------


def _pairs(idx: Sequence[int], vals: Sequence[float]) -> str:
    return " ".join(f"{int(i)}:{float(v)!r}" for i, v in zip(idx, vals))


def dump_problem(problem: LpProblem) -> str:
    """Serialize ``problem`` to the plain-text LP-DUMP v1 layout."""
    out = io.StringIO()
    out.write(f"LP-DUMP v1 n_vars={problem.n_vars} n_eq={problem.n_eq} "
              f"n_ub={problem.n_ub}\n")
    nz = np.flatnonzero(problem.c)
    out.write(f"obj {_pairs(nz, problem.c[nz])}".rstrip() + "\n")
    for kind, mat, rhs, op in (("eq", problem.A_eq, problem.b_eq, "="),
                               ("ub", problem.A_ub, problem.b_ub, "<=")):
        for r in range(mat.shape[0]):
            row = mat.getrow(r)
            body = _pairs(row.indices, row.data)
            out.write(f"{kind} {body} {op} {float(rhs[r])!r}\n")
    bounds = [f"{j}:{float(problem.lo[j])!r}:{float(problem.hi[j])!r}"
              for j in range(problem.n_vars)
              if not (problem.lo[j] == 0.0 and problem.hi[j] == INF)]
    out.write(("bounds " + " ".join(bounds)).rstrip() + "\n")
    return out.getvalue()


def load_problem(text: str) -> LpProblem:
    """Parse an LP-DUMP v1 document back into an :class:`LpProblem`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("LP-DUMP v1"):
        raise MalformedProblem("missing LP-DUMP v1 header")
    header = dict(tok.split("=") for tok in lines[0].split()[2:])
    n = int(header["n_vars"])
    c = np.zeros(n)
    lo, hi = np.zeros(n), np.full(n, INF)
    eq, ub = [], []
    for ln in lines[1:]:
        kind, *rest = ln.split()
        if kind == "obj":
            for tok in rest:
                i, v = tok.split(":")
                c[int(i)] = float(v)
        elif kind in ("eq", "ub"):
            rhs = float(rest[-1])
            toks = rest[:-2]
            idx = [int(t.split(":")[0]) for t in toks]
            vals = [float(t.split(":")[1]) for t in toks]
            (eq if kind == "eq" else ub).append((idx, vals, rhs))
        elif kind == "bounds":
            for tok in rest:
                j, a, b = tok.split(":")
                lo[int(j)], hi[int(j)] = float(a), float(b)
        else:
            raise MalformedProblem(f"unknown LP-DUMP line kind {kind!r}")
    if len(eq) != int(header["n_eq"]) or len(ub) != int(header["n_ub"]):
        raise MalformedProblem("LP-DUMP row counts disagree with header")
    return LpProblem.from_rows(c, eq=eq, ub=ub, lo=lo, hi=hi)
