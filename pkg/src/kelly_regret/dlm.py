"""Discount-factor dynamic linear models for asset and factor returns.

Two conjugate filters run side by side:

* a per-asset regression of the asset return on contemporaneous factor
  returns, with time-varying loadings and a discounted observation precision
  (normal / gamma posterior with hyperparameters ``m, C, n, d``);
* a matrix-normal / inverse-Wishart model for the factor mean and full factor
  covariance (hyperparameters ``m, C, S, n``).

The recurrences are the standard variance-discounting updates of West and
Harrison. With every discount equal to one they reduce to batch conjugate
regression, which is how the tests check them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_PRIOR_VARIANCE = 0.0025


class FilterError(ValueError):
    pass


def _is_spd(a: np.ndarray) -> bool:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-300):
        return False
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True)
class DiscountConfig:
    delta_beta: float = 0.9925
    delta_epsilon: float = 0.97
    delta_c: float = 0.9925
    delta_F: float = 0.97

    def __post_init__(self):
        for name in ("delta_beta", "delta_epsilon", "delta_c", "delta_F"):
            v = getattr(self, name)
            if not 0.8 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0.8, 1], got {v}")

    @classmethod
    def unit(cls) -> "DiscountConfig":
        """No discounting; the filters become static conjugate updates."""
        return cls(1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class AssetFilterState:
    """Posterior of one asset's factor loadings and observation precision.

    ``C`` is the scale of the Student-t posterior on the loadings, i.e. it
    already carries the point estimate ``S = d / n`` of the observation
    variance.
    """

    m: np.ndarray
    C: np.ndarray
    n: float
    d: float

    def __post_init__(self):
        m = np.array(self.m, dtype=float).ravel()
        C = np.array(self.C, dtype=float, ndmin=2)
        if C.shape != (m.size, m.size):
            raise FilterError(f"C has shape {C.shape}, expected {(m.size, m.size)}")
        if not _is_spd(C):
            raise FilterError("asset filter scale C must be symmetric positive definite")
        if not (self.n > 0 and self.d > 0):
            raise FilterError(f"n and d must be positive, got n={self.n}, d={self.d}")
        m.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "n", float(self.n))
        object.__setattr__(self, "d", float(self.d))

    @property
    def S(self) -> float:
        return self.d / self.n

    @property
    def p(self) -> int:
        return self.m.size


@dataclass(frozen=True)
class FactorFilterState:
    """Normal / inverse-Wishart posterior of the factor mean and covariance.

    ``C`` is a scalar: the factor mean has covariance ``C * Sigma_F``.
    """

    m: np.ndarray
    C: float
    S: np.ndarray
    n: float

    def __post_init__(self):
        m = np.array(self.m, dtype=float).ravel()
        S = np.array(self.S, dtype=float, ndmin=2)
        if S.shape != (m.size, m.size):
            raise FilterError(f"S has shape {S.shape}, expected {(m.size, m.size)}")
        if not _is_spd(S):
            raise FilterError("factor covariance estimate S must be symmetric positive definite")
        if not (self.C > 0 and self.n > 0):
            raise FilterError(f"C and n must be positive, got C={self.C}, n={self.n}")
        m.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "C", float(self.C))
        object.__setattr__(self, "n", float(self.n))

    @property
    def p(self) -> int:
        return self.m.size


def init_asset_filter(p: int, prior_m=None, prior_C=None, prior_n: float = 5.0,
                      prior_d: float | None = None) -> AssetFilterState:
    m = np.zeros(p) if prior_m is None else np.asarray(prior_m, dtype=float)
    C = 10.0 * np.eye(p) if prior_C is None else np.asarray(prior_C, dtype=float)
    d = prior_n * DEFAULT_PRIOR_VARIANCE if prior_d is None else prior_d
    if m.shape != (p,):
        raise FilterError(f"prior_m must have length {p}")
    return AssetFilterState(m, C, prior_n, d)


def init_factor_filter(p: int, prior_m=None, prior_C: float = 10.0, prior_S=None,
                       prior_n: float | None = None) -> FactorFilterState:
    m = np.zeros(p) if prior_m is None else np.asarray(prior_m, dtype=float)
    S = DEFAULT_PRIOR_VARIANCE * np.eye(p) if prior_S is None else np.asarray(prior_S, dtype=float)
    n = p + 2.0 if prior_n is None else prior_n
    if m.shape != (p,):
        raise FilterError(f"prior_m must have length {p}")
    return FactorFilterState(m, prior_C, S, n)


def default_asset_prior(r: np.ndarray, f: np.ndarray, window: int = 12) -> AssetFilterState:
    """Weakly informative prior, scale-matched to the first ``window`` months.

    ``m = 0, C = 10 I, n = 5`` and ``d`` such that ``S`` equals the residual
    variance of an OLS fit on the window (0.0025 when the fit is unavailable).
    """
    f = np.atleast_2d(np.asarray(f, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    p = f.shape[1]
    k = min(window, r.size)
    s0 = DEFAULT_PRIOR_VARIANCE
    if k > p:
        coef, *_ = np.linalg.lstsq(f[:k], r[:k], rcond=None)
        resid = r[:k] - f[:k] @ coef
        var = float(resid @ resid) / (k - p)
        if np.isfinite(var) and var > 0:
            s0 = var
    n0 = 5.0
    return init_asset_filter(p, prior_n=n0, prior_d=n0 * s0)


def default_factor_prior(f: np.ndarray, window: int = 12) -> FactorFilterState:
    """``m = 0, C = 10, n = p + 2``; ``S`` is the window's sample covariance if SPD."""
    f = np.atleast_2d(np.asarray(f, dtype=float))
    p = f.shape[1]
    k = min(window, f.shape[0])
    S = DEFAULT_PRIOR_VARIANCE * np.eye(p)
    if k > p:
        cov = np.atleast_2d(np.cov(f[:k], rowvar=False))
        if _is_spd(cov):
            S = cov
    return init_factor_filter(p, prior_S=S)


def update_asset_filter(state: AssetFilterState, r: float, f, cfg: DiscountConfig) -> AssetFilterState:
    """One observation of the discounted factor regression."""
    f = np.asarray(f, dtype=float).ravel()
    R = state.C / cfg.delta_beta
    S = state.S
    Rf = R @ f
    Q = float(f @ Rf) + S
    if not Q > 0:
        raise FilterError(f"non-positive forecast variance {Q}")
    e = float(r) - float(f @ state.m)
    A = Rf / Q
    n = cfg.delta_epsilon * state.n + 1.0
    d = cfg.delta_epsilon * state.d + S * e * e / Q
    S_new = d / n
    m = state.m + A * e
    C = (S_new / S) * (R - np.outer(A, A) * Q)
    C = 0.5 * (C + C.T)
    return AssetFilterState(m, C, n, d)


def update_factor_filter(state: FactorFilterState, f, cfg: DiscountConfig) -> FactorFilterState:
    """One observation of the discounted matrix-normal / inverse-Wishart model."""
    f = np.asarray(f, dtype=float).ravel()
    R = state.C / cfg.delta_c
    q = R + 1.0
    e = f - state.m
    A = R / q
    m = state.m + A * e
    n_disc = cfg.delta_F * state.n
    n = n_disc + 1.0
    S = (n_disc * state.S + np.outer(e, e) / q) / n
    S = 0.5 * (S + S.T)
    return FactorFilterState(m, R / q, S, n)


@dataclass(frozen=True)
class PredictiveMoments:
    """Plug-in next-month moments of asset returns.

    ``sigma_nc = sigma + mu mu'`` is the quadratic form of the approximate
    log-wealth loss and ``chol`` its lower Cholesky factor.
    """

    mu: np.ndarray
    sigma: np.ndarray
    sigma_nc: np.ndarray
    chol: np.ndarray
    psi: np.ndarray | None = None

    @property
    def n_assets(self) -> int:
        return self.mu.size

    @classmethod
    def from_moments(cls, mu, sigma, psi=None) -> "PredictiveMoments":
        mu = np.asarray(mu, dtype=float).ravel()
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise FilterError("sigma shape does not match mu")
        sigma_nc = sigma + np.outer(mu, mu)
        psi = None if psi is None else np.asarray(psi, dtype=float).ravel()
        return cls(mu, sigma, sigma_nc, robust_cholesky(sigma_nc), psi)

    @classmethod
    def from_noncentral(cls, mu, sigma_nc) -> "PredictiveMoments":
        """Build directly from the non-central second moment."""
        mu = np.asarray(mu, dtype=float).ravel()
        sigma_nc = np.atleast_2d(np.asarray(sigma_nc, dtype=float))
        if sigma_nc.shape != (mu.size, mu.size):
            raise FilterError("sigma_nc shape does not match mu")
        return cls(mu, sigma_nc - np.outer(mu, mu), sigma_nc, robust_cholesky(sigma_nc))


def robust_cholesky(a: np.ndarray, retries: int = 3) -> np.ndarray:
    """Cholesky factor, retrying with a small escalating diagonal jitter."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    jitter = 1e-10 * float(np.trace(a)) / n
    if not jitter > 0:
        raise FilterError("matrix is not positive definite")
    for _ in range(retries):
        try:
            L = np.linalg.cholesky(a + jitter * np.eye(n))
            logger.warning("cholesky needed diagonal jitter %.3g", jitter)
            return L
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FilterError("matrix is not positive definite after jitter")


def assemble_moments(asset_states, factor_state: FactorFilterState) -> PredictiveMoments:
    """Combine the filters into next-month mean and covariance of asset returns.

    Posterior point estimates are plugged in: loadings ``B`` (p x N) are the
    posterior means, the factor covariance is ``S_F`` and the idiosyncratic
    variances are the ``S_i``.
    """
    asset_states = list(asset_states)
    if not asset_states:
        raise FilterError("no asset states")
    p = factor_state.p
    if any(s.p != p for s in asset_states):
        raise FilterError("asset and factor filters disagree on the factor count")
    B = np.column_stack([s.m for s in asset_states])
    psi = np.array([s.S for s in asset_states])
    mu = B.T @ factor_state.m
    sigma = B.T @ factor_state.S @ B + np.diag(psi)
    sigma = 0.5 * (sigma + sigma.T)
    return PredictiveMoments.from_moments(mu, sigma, psi)


@dataclass(frozen=True)
class FilterBank:
    """Asset filters (in ticker order) plus the factor filter."""

    assets: tuple[AssetFilterState, ...]
    factor: FactorFilterState

    @classmethod
    def from_history(cls, returns: np.ndarray, factors: np.ndarray, window: int = 12) -> "FilterBank":
        """Default priors fitted on the first ``window`` rows."""
        returns = np.atleast_2d(returns)
        return cls(
            tuple(default_asset_prior(returns[:, i], factors, window) for i in range(returns.shape[1])),
            default_factor_prior(factors, window),
        )

    def update(self, r, f, cfg: DiscountConfig) -> "FilterBank":
        factor = update_factor_filter(self.factor, f, cfg)
        assets = tuple(update_asset_filter(s, ri, f, cfg) for s, ri in zip(self.assets, r))
        return FilterBank(assets, factor)

    def moments(self) -> PredictiveMoments:
        return assemble_moments(self.assets, self.factor)
