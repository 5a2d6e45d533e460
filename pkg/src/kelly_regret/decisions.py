"""Candidate portfolio decisions.

Three families are produced for each investing period:

* ``l1_path`` - minimizers of ``0.5 w' Snc w - w' mu + lam |w|_1`` along a
  grid of penalties, from a one-asset decision down to ``lam = 0``;
* ``enumerated_kelly`` - long-only Kelly portfolios on every fund subset
  allowed by an anchor/lower-bound rule;
* ``equal_weight`` - 1/q portfolios on every small subset, no optimization.

Every decision is normalized to be fully invested (weights sum to one).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _kernels
from .dlm import PredictiveMoments

logger = logging.getLogger(__name__)

METHODS = ("l1_path", "enumerated_kelly", "equal_weight", "dense_kelly", "single_asset", "dense_1n")
LONG_ONLY = ("enumerated_kelly", "equal_weight", "single_asset", "dense_1n")
SIGN_MODES = ("free", "nonnegative")

NORMALIZE_FLOOR = 1e-6
SUPPORT_TOL = 1e-12


class ConvergenceError(RuntimeError):
    pass


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class Decision:
    weights: np.ndarray
    id: str
    method: str
    lam: float | None = None
    support: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.method not in METHODS:
            raise ValueError(f"unknown decision method {self.method!r}")
        if abs(w.sum() - 1.0) >= 1e-10:
            raise ValueError(f"decision {self.id} weights sum to {w.sum()}, not 1")
        if self.method in LONG_ONLY and np.any(w < -1e-12):
            raise ValueError(f"long-only decision {self.id} has a negative weight")
        object.__setattr__(self, "support", tuple(np.flatnonzero(np.abs(w) > SUPPORT_TOL).tolist()))

    def tickers(self, universe) -> tuple[str, ...]:
        return tuple(universe[i] for i in self.support)


@dataclass(frozen=True)
class LambdaPath:
    lambdas: np.ndarray
    decisions: list[Decision]
    dropped: tuple[int, ...] = ()


@dataclass(frozen=True)
class EnumerationRules:
    """Subset rules for the anchored case study.

    A subset of size ``q`` holds the anchor at weight >= ``anchor_min`` and
    each other fund at weight >= ``other_total / (q - 1)``. With
    ``anchor=None`` every subset of a size in ``q_range`` is enumerated with
    plain long-only bounds.
    """

    anchor: str | None = "SPY"
    q_range: tuple[int, ...] = (2, 3, 4, 5)
    anchor_min: float = 0.25
    other_total: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "q_range", tuple(sorted(set(int(q) for q in self.q_range))))
        if not self.q_range or min(self.q_range) < 1:
            raise ValueError("q_range must hold positive subset sizes")
        if self.anchor is not None:
            if not 0.0 < self.anchor_min < 1.0:
                raise ValueError("anchor_min must lie in (0, 1)")
            if min(self.q_range) < 2:
                raise ValueError("anchored subsets have at least 2 funds")
            if self.anchor_min + self.other_total > 1.0 + 1e-12:
                raise ValueError("anchor and diversifier minimums exceed 100%")

    def other_min(self, q: int) -> float:
        return self.other_total / (q - 1)

    def lower_bounds(self, q: int) -> np.ndarray:
        """Bounds for a subset of size ``q``, anchor first."""
        if self.anchor is None:
            return np.zeros(q)
        return np.concatenate([[self.anchor_min], np.full(q - 1, self.other_min(q))])


def count_case_study(n_universe: int, rules: EnumerationRules) -> int:
    if rules.anchor is None:
        return sum(math.comb(n_universe, q) for q in rules.q_range)
    return sum(math.comb(n_universe - 1, q - 1) for q in rules.q_range)


def count_equal_weight(n_universe: int, max_q: int) -> int:
    return sum(math.comb(n_universe, q) for q in range(1, max_q + 1))


def normalize(raw) -> np.ndarray:
    """Scale to a fully invested portfolio."""
    raw = np.asarray(raw, dtype=float)
    s = raw.sum()
    if abs(s) < NORMALIZE_FLOOR:
        raise NormalizationError(f"weight sum {s:.3g} is below the normalization floor")
    w = raw / s
    # push the rounding residue onto the largest position
    k = int(np.argmax(np.abs(w)))
    w[k] += 1.0 - w.sum()
    return w


def _check_sign_mode(sign_mode):
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"sign_mode must be one of {SIGN_MODES}, got {sign_mode!r}")


def kkt_residual(Q, mu, w, lam, sign_mode="free") -> float:
    """Largest violation of the optimality conditions of the l1 problem."""
    g = Q @ w - mu
    nz = np.abs(w) > 0
    if sign_mode == "free":
        r_nz = np.abs(g[nz] + lam * np.sign(w[nz]))
        r_z = np.maximum(np.abs(g[~nz]) - lam, 0.0)
    else:
        r_nz = np.abs(g[nz] + lam)
        r_z = np.maximum(-(g[~nz] + lam), 0.0)
    return float(max(r_nz.max(initial=0.0), r_z.max(initial=0.0)))


def solve_l1(moments: PredictiveMoments, lam: float, sign_mode: str = "free", w0=None,
             max_sweeps: int = 10_000, tol: float = 1e-10, trace: bool = False):
    """Minimize ``0.5 w' Snc w - w' mu + lam |w|_1`` by coordinate descent.

    Returns the raw (unnormalized) weights, plus the per-sweep objective
    values when ``trace`` is set.
    """
    _check_sign_mode(sign_mode)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Q, mu = _l1_inputs(moments)
    w = np.zeros(mu.size) if w0 is None else np.array(w0, dtype=float)
    tr = np.empty(max_sweeps + 1 if trace else 0)
    sweeps = _kernels.cd_lasso(Q, mu, float(lam), w, sign_mode == "nonnegative", max_sweeps, tol, tr)
    if sweeps >= max_sweeps:
        _check_stalled(Q, mu, w, lam, sign_mode, max_sweeps)
    if trace:
        return w, tr[: sweeps + 1]
    return w


def _l1_inputs(moments):
    Q = np.ascontiguousarray(moments.sigma_nc, dtype=float)
    mu = np.ascontiguousarray(moments.mu, dtype=float)
    if np.any(np.diag(Q) <= 0):
        raise ValueError("non-central second moment is not positive definite")
    return Q, mu


def _check_stalled(Q, mu, w, lam, sign_mode, max_sweeps):
    res = kkt_residual(Q, mu, w, lam, sign_mode)
    if res > 1e-6:
        raise ConvergenceError(f"coordinate descent stalled, KKT residual {res:.3g}")
    logger.warning("coordinate descent hit %d sweeps (KKT residual %.3g)", max_sweeps, res)


def lambda_grid(moments: PredictiveMoments, n_points: int, sign_mode: str = "free") -> np.ndarray:
    """Log-spaced penalties from just under ``lam_max`` to ``1e-4 lam_max``, then 0."""
    _check_sign_mode(sign_mode)
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    mu = moments.mu
    lam_max = float(np.max(np.abs(mu)) if sign_mode == "free" else np.max(mu))
    if not lam_max > 0:
        raise ValueError("lambda_max is undefined: no asset has a usable expected return")
    return np.append(np.geomspace(0.999 * lam_max, 1e-4 * lam_max, n_points - 1), 0.0)


def lambda_path(moments: PredictiveMoments, n_points: int = 500, sign_mode: str = "free",
                max_sweeps: int = 10_000, tol: float = 1e-10) -> LambdaPath:
    """Warm-started solutions over :func:`lambda_grid`, each normalized.

    Grid points whose raw weights cannot be normalized are dropped and
    reported in ``dropped``.
    """
    lams = lambda_grid(moments, n_points, sign_mode)
    width = len(str(n_points - 1))
    Q, mu = _l1_inputs(moments)
    W, sweeps = _kernels.cd_path(Q, mu, lams, sign_mode == "nonnegative", max_sweeps, tol)
    decisions, dropped = [], []
    for k, lam in enumerate(lams):
        if sweeps[k] >= max_sweeps:
            _check_stalled(Q, mu, W[k], lam, sign_mode, max_sweeps)
        try:
            wn = normalize(W[k])
        except NormalizationError as exc:
            logger.warning("dropping path point %d (lambda=%.3g): %s", k, lam, exc)
            dropped.append(k)
            continue
        decisions.append(Decision(wn, f"lam{k:0{width}d}", "l1_path", lam=float(lam)))
    if not decisions:
        raise NormalizationError("every path point fell below the normalization floor")
    return LambdaPath(lams, decisions, tuple(dropped))


PG_TOL = 1e-8
PG_RELAXED_TOL = 1e-5
PG_MAX_ITER = 50_000


def _solve_subsets(moments, subsets, bounds):
    """Constrained Kelly weights for many subsets at once; returns (W, residuals)."""
    K = len(subsets)
    qmax = max(len(s) for s in subsets)
    idx = np.zeros((K, qmax), dtype=np.int64)
    lbs = np.zeros((K, qmax))
    sizes = np.zeros(K, dtype=np.int64)
    for k, (s, lb) in enumerate(zip(subsets, bounds)):
        idx[k, : len(s)] = s
        lbs[k, : len(s)] = lb
        sizes[k] = len(s)
    Wq, _, resid = _kernels.pg_simplex_batch(
        np.ascontiguousarray(moments.sigma_nc), np.ascontiguousarray(moments.mu),
        idx, sizes, lbs, PG_TOL, PG_MAX_ITER)
    W = np.zeros((K, moments.n_assets))
    for k, s in enumerate(subsets):
        W[k, list(s)] = Wq[k, : len(s)]
    return W, resid


def _check_bounds(subset, lower_bounds):
    if len(subset) == 0:
        raise ValueError("subset must be nonempty")
    if len(set(subset)) != len(subset):
        raise ValueError("subset has repeated assets")
    lb = np.asarray(lower_bounds, dtype=float).ravel()
    if lb.shape != (len(subset),):
        raise ValueError("need one lower bound per subset member")
    if np.any(lb < 0):
        raise ValueError("lower bounds must be non-negative")
    if lb.sum() > 1.0 + 1e-12:
        raise ValueError(f"infeasible lower bounds: they sum to {lb.sum():.6g} > 1")
    return lb


def solve_kelly_constrained(moments: PredictiveMoments, subset, lower_bounds=None,
                            id: str | None = None, method: str = "enumerated_kelly") -> Decision:
    """Long-only Kelly portfolio on ``subset`` with per-asset minimum weights."""
    subset = [int(i) for i in subset]
    lb = _check_bounds(subset, np.zeros(len(subset)) if lower_bounds is None else lower_bounds)
    W, resid = _solve_subsets(moments, [subset], [lb])
    if resid[0] > PG_RELAXED_TOL:
        raise ConvergenceError(f"projected gradient stalled, residual {resid[0]:.3g}")
    return Decision(_fix_sum(W[0], subset), id or "+".join(map(str, subset)), method)


def _fix_sum(w, subset):
    w = w.copy()
    k = subset[int(np.argmax(w[subset]))]
    w[k] += 1.0 - w.sum()
    return w


def enumerate_case_study(universe, rules: EnumerationRules, moments: PredictiveMoments) -> list[Decision]:
    """Constrained Kelly decisions for every subset the rules allow.

    Decisions are ordered by subset size, then lexicographically by universe
    position; ids join tickers with ``+`` (anchor first).
    """
    universe = list(universe)
    if moments.n_assets != len(universe):
        raise ValueError("moments and universe disagree on the asset count")
    subsets, bounds = [], []
    if rules.anchor is None:
        for q in rules.q_range:
            for s in combinations(range(len(universe)), q):
                subsets.append(list(s))
                bounds.append(rules.lower_bounds(q))
    else:
        if rules.anchor not in universe:
            raise ValueError(f"anchor {rules.anchor!r} is not in the universe")
        a = universe.index(rules.anchor)
        others = [i for i in range(len(universe)) if i != a]
        for q in rules.q_range:
            for s in combinations(others, q - 1):
                subsets.append([a, *s])
                bounds.append(rules.lower_bounds(q))
    if not subsets:
        return []
    W, resid = _solve_subsets(moments, subsets, bounds)
    out = []
    for k, (s, lb) in enumerate(zip(subsets, bounds)):
        ident = "+".join(universe[i] for i in s)
        w = W[k]
        if resid[k] > PG_RELAXED_TOL:
            logger.warning("subset %s did not converge (residual %.3g); using bound point", ident, resid[k])
            w = np.zeros(len(universe))
            w[s] = lb
            w[s[0]] += 1.0 - lb.sum()
        out.append(Decision(_fix_sum(w, s), ident, "enumerated_kelly"))
    return out


def enumerate_equal_weight(universe, max_q: int) -> list[Decision]:
    """1/q portfolios on every nonempty subset of at most ``max_q`` funds."""
    universe = list(universe)
    if max_q < 1:
        raise ValueError("max_q must be at least 1")
    if max_q > len(universe):
        raise ValueError("max_q exceeds the universe size")
    n = len(universe)
    out = []
    for q in range(1, max_q + 1):
        for s in combinations(range(n), q):
            w = np.zeros(n)
            w[list(s)] = 1.0 / q
            w[s[0]] += 1.0 - w.sum()
            out.append(Decision(w, "+".join(universe[i] for i in s), "equal_weight"))
    return out


def dense_kelly(moments: PredictiveMoments, sign_mode: str = "nonnegative") -> Decision:
    """Unpenalized Kelly portfolio on all assets.

    ``nonnegative`` solves the long-only problem; ``free`` normalizes the
    unconstrained solution of ``Snc w = mu``.
    """
    _check_sign_mode(sign_mode)
    n = moments.n_assets
    if sign_mode == "free":
        raw = np.linalg.solve(moments.sigma_nc, moments.mu)
        return Decision(normalize(raw), "dense_kelly", "dense_kelly", lam=0.0)
    return solve_kelly_constrained(moments, range(n), np.zeros(n), id="dense_kelly", method="dense_kelly")


def single_asset(universe, ticker: str) -> Decision:
    universe = list(universe)
    if ticker not in universe:
        raise ValueError(f"unknown ticker {ticker!r}")
    w = np.zeros(len(universe))
    w[universe.index(ticker)] = 1.0
    return Decision(w, ticker, "single_asset")


def dense_1n(universe) -> Decision:
    n = len(universe)
    w = np.full(n, 1.0 / n)
    w[0] += 1.0 - w.sum()
    return Decision(w, "dense_1n", "dense_1n")


def make_targets(moments: PredictiveMoments, universe, ticker: str | None = None,
                 sign_mode: str = "nonnegative") -> dict:
    """The dense Kelly, single-fund and 1/N targets."""
    universe = list(universe)
    if moments.n_assets != len(universe):
        raise ValueError("moments and universe disagree on the asset count")
    out = {"dense_kelly": dense_kelly(moments, sign_mode), "dense_1n": dense_1n(universe)}
    if ticker is not None:
        out["single_asset"] = single_asset(universe, ticker)
    return out
