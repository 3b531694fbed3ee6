"""Baselines and metrics for histogram representations.

* ``sc_l2_*``: sparse coding with a squared L2 loss, lasso codes by
  coordinate descent and dictionary columns kept on the probability simplex.
* ``ova_*``: one-vs-all ridge regression scorers.
* ``roc_curve`` / ``pr_curve`` / ``auc`` / ``accuracy``.
* ``retrieve``: rank a database of codes by distance to a query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from .emd_core import emd_balanced
from .errors import (DimensionMismatch, InputError, NoNegatives, NoPositives,
                     SingularSystem, TooFewSamples)
from .scemd import ScemdModel, initial_dictionary, reconstruct


# sparse coding with L2 loss ---------------------------------------------------


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_objective(U, x, v, lam) -> float:
    r = x - U @ v
    return 0.5 * float(r @ r) + lam * float(np.abs(v).sum())


def lasso_gap(U, x, v, lam) -> float:
    """Duality gap of ``0.5 * ||x - U v||^2 + lam * ||v||_1``."""
    r = x - U @ v
    corr = np.abs(U.T @ r).max(initial=0.0)
    scale = 1.0 if corr <= lam else lam / corr
    theta = scale * r
    primal = 0.5 * float(r @ r) + lam * float(np.abs(v).sum())
    dual = 0.5 * float(x @ x) - 0.5 * float((x - theta) @ (x - theta))
    return primal - dual


def lasso_cd(U, x, lam: float, v0=None, tol: float = 1e-8,
             max_sweeps: int = 100_000) -> np.ndarray:
    """Cyclic coordinate descent for the lasso.

    Stops when the duality gap drops to ``tol``; with ``lam == 0`` the gap is
    undefined and the stopping test is ``max |U^T r| <= tol``.
    """
    U = np.asarray(U, dtype=float)
    x = np.asarray(x, dtype=float)
    M = U.shape[1]
    v = np.zeros(M) if v0 is None else np.array(v0, dtype=float)
    sq = (U ** 2).sum(axis=0)
    r = x - U @ v
    for _ in range(max_sweeps):
        for m in range(M):
            if sq[m] == 0.0:
                v[m] = 0.0
                continue
            rho = U[:, m] @ r + sq[m] * v[m]
            new = soft_threshold(rho, lam) / sq[m]
            if new != v[m]:
                r -= U[:, m] * (new - v[m])
                v[m] = new
        if lam > 0:
            if lasso_gap(U, x, v, lam) <= tol:
                break
        elif np.abs(U.T @ r).max(initial=0.0) <= tol:
            break
    return v


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto ``{u >= 0, sum(u) = 1}``."""
    y = np.asarray(y, dtype=float)
    s = np.sort(y)[::-1]
    css = np.cumsum(s) - 1.0
    k = np.arange(1, y.size + 1)
    rho = np.flatnonzero(s - css / k > 0)[-1]
    return np.maximum(y - css[rho] / (rho + 1), 0.0)


class ScL2Result(NamedTuple):
    dictionary: np.ndarray
    codes: np.ndarray
    trace: List[float]


def sc_l2_objective(X, U, V, lam) -> float:
    R = X - V @ U.T
    return 0.5 * float((R ** 2).sum()) + lam * float(np.abs(V).sum())


def sc_l2_encode(xs, dictionary, lam: float, codes0=None,
                 tol: float = 1e-8) -> np.ndarray:
    X = np.atleast_2d(np.asarray(xs, dtype=float))
    U = np.asarray(dictionary, dtype=float)
    if X.shape[1] != U.shape[0]:
        raise DimensionMismatch("histograms and dictionary disagree")
    V = np.zeros((X.shape[0], U.shape[1])) if codes0 is None else codes0
    return np.array([lasso_cd(U, x, lam, v0, tol) for x, v0 in zip(X, V)])


def sc_l2_fit(xs, M: int, lam: float, iterations: int = 10, seed: int = 0,
              tol: float = 1e-8) -> ScL2Result:
    """Alternate lasso coding and simplex-projected column updates.

    Codes are warm-started from the previous round and each column update
    is an exact block minimization, so ``trace`` never increases.
    """
    X = np.asarray(xs, dtype=float)
    N, D = X.shape
    if M < 1 or iterations < 1:
        raise InputError("M and iterations must be >= 1")
    if M > N:
        raise TooFewSamples(f"need at least M={M} samples, got {N}")
    if lam < 0:
        raise InputError("lambda must be >= 0")
    U = initial_dictionary(X, M, seed)
    V = np.zeros((N, M))
    trace = []
    for _ in range(iterations):
        V = sc_l2_encode(X, U, lam, V, tol)
        trace.append(sc_l2_objective(X, U, V, lam))
        R = X - V @ U.T
        for m in range(M):
            w = V[:, m]
            norm = float(w @ w)
            if norm == 0.0:
                continue
            R += np.outer(w, U[:, m])
            U[:, m] = project_simplex(R.T @ w / norm)
            R -= np.outer(w, U[:, m])
        trace.append(sc_l2_objective(X, U, V, lam))
    return ScL2Result(U, V, trace)


# one-vs-all ridge ---------------------------------------------------------------


@dataclass
class OvaRidge:
    classes: np.ndarray
    weights: np.ndarray  # (p + 1) x C, last row is the intercept

    def scores(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] + 1 != self.weights.shape[0]:
            raise DimensionMismatch("feature length differs from training")
        return np.hstack([Z, np.ones((Z.shape[0], 1))]) @ self.weights


def ova_fit(Z, labels, ridge: float = 1e-3) -> OvaRidge:
    """One ridge regressor per class on +1/-1 targets, unpenalized intercept."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    labels = np.asarray(labels)
    if Z.shape[0] != labels.size:
        raise DimensionMismatch("one label per row required")
    classes = np.unique(labels)
    if classes.size < 2:
        raise InputError("need at least two classes")
    if ridge < 0:
        raise InputError("ridge must be >= 0")
    Zb = np.hstack([Z, np.ones((Z.shape[0], 1))])
    G = Zb.T @ Zb
    G[np.arange(Z.shape[1]), np.arange(Z.shape[1])] += ridge
    if np.linalg.cond(G) > 1e12:
        raise SingularSystem("normal equations are singular; raise ridge")
    Y = np.where(labels[:, None] == classes[None, :], 1.0, -1.0)
    return OvaRidge(classes, np.linalg.solve(G, Zb.T @ Y))


def ova_predict(model: OvaRidge, Z):
    """Return ``(scores, predicted_labels)``; ties go to the lower class."""
    S = model.scores(Z)
    top = S.max(axis=1, keepdims=True)
    tied = S >= top - 1e-12 * (1.0 + np.abs(top))
    return S, model.classes[np.argmax(tied, axis=1)]


# metrics -------------------------------------------------------------------------


@dataclass
class CurveData:
    x: np.ndarray
    y: np.ndarray
    auc: Optional[float] = None
    name: str = ""

    def points(self):
        return list(zip(self.x.tolist(), self.y.tolist()))


def accuracy(predictions, labels) -> float:
    p, t = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != t.shape:
        raise DimensionMismatch("need equally long, nonempty label vectors")
    return float(np.count_nonzero(p == t)) / p.size


def _ranked_counts(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.size == 0 or s.shape != y.shape:
        raise DimensionMismatch("need equally long, nonempty score vectors")
    y = y.astype(bool)
    if not y.any():
        raise NoPositives("no positive labels")
    if y.all():
        raise NoNegatives("no negative labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one point per distinct score, taken after the whole tie group
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return tp, fp, int(y.sum()), int((~y).sum())


def auc(curve: CurveData) -> float:
    """Trapezoidal area under a curve."""
    return float(np.trapezoid(curve.y, curve.x)) if hasattr(np, "trapezoid") \
        else float(np.trapz(curve.y, curve.x))


def roc_curve(scores, labels) -> CurveData:
    tp, fp, P, N = _ranked_counts(scores, labels)
    curve = CurveData(np.r_[0.0, fp / N], np.r_[0.0, tp / P], name="roc")
    curve.auc = auc(curve)
    return curve


def pr_curve(scores, labels) -> CurveData:
    tp, fp, P, _ = _ranked_counts(scores, labels)
    precision = tp / (tp + fp)
    curve = CurveData(np.r_[0.0, tp / P], np.r_[precision[0], precision],
                      name="pr")
    curve.auc = auc(curve)
    return curve


# retrieval -----------------------------------------------------------------------


@dataclass
class RankedList:
    ids: np.ndarray
    scores: np.ndarray
    query_id: object = None
    relevance: Optional[np.ndarray] = None


def _normalized_reconstruction(model: ScemdModel, code) -> np.ndarray:
    y = np.maximum(reconstruct(model, code), 0.0)
    total = y.sum()
    if total <= 0:
        raise InputError("code reconstructs to an empty histogram")
    return y / total


def retrieve(query_code, db_codes, distance: str = "l2",
             model: Optional[ScemdModel] = None, ids=None, query_id=None,
             relevance=None) -> RankedList:
    """Rank database codes by ascending distance to the query.

    ``distance="emd"`` compares the reconstructions ``U v`` (clipped at zero
    and renormalized) under the model's ground distance.  Scores are negated
    distances, so the list is ordered by descending similarity.
    """
    q = np.asarray(query_code, dtype=float)
    db = np.atleast_2d(np.asarray(db_codes, dtype=float))
    if db.shape[1] != q.size:
        raise DimensionMismatch("query and database codes differ in length")
    if distance == "l2":
        dist = np.sqrt(((db - q) ** 2).sum(axis=1))
    elif distance == "emd":
        if model is None:
            raise InputError("EMD retrieval needs a model")
        qh = _normalized_reconstruction(model, q)
        dist = np.array([emd_balanced(qh, _normalized_reconstruction(model, v),
                                      model.gd) for v in db])
    else:
        raise InputError(f"unknown distance {distance!r}")
    ids = np.arange(db.shape[0]) if ids is None else np.asarray(ids)
    order = np.argsort(dist, kind="stable")
    rel = None if relevance is None else np.asarray(relevance)[order]
    return RankedList(ids[order], -dist[order], query_id, rel)
