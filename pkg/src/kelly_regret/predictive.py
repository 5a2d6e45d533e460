"""Posterior-predictive simulation of next-month asset returns.

Each draw walks down the joint posterior: factor covariance, factor mean,
factor returns, then for every asset its observation variance, loadings and
return. Random streams come from one ``SeedSequence``: the first child drives
the factor block and child ``1 + i`` drives asset ``i`` (ticker order), so an
asset's draws do not depend on how many other assets are simulated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dlm import AssetFilterState, FactorFilterState

DEFAULT_DRAWS = 10_000


@dataclass(frozen=True)
class ParamDraws:
    """Per-draw mean and covariance of next-month asset returns.

    Stored in factor form, ``Sigma = beta' Sigma_F beta + diag(psi)``, unless
    an explicit ``sigma`` stack is given.
    """

    mu: np.ndarray                      # (M, N)
    sigma: np.ndarray | None = None     # (M, N, N)
    beta: np.ndarray | None = None      # (M, p, N)
    sigma_f: np.ndarray | None = None   # (M, p, p)
    psi: np.ndarray | None = None       # (M, N)

    def __post_init__(self):
        if self.sigma is None and (self.beta is None or self.sigma_f is None or self.psi is None):
            raise ValueError("need either sigma or the factor-form components")

    def portfolio_moments(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Per-draw portfolio mean ``w'mu`` and variance ``w'Sigma w``."""
        w = np.asarray(w, dtype=float)
        mean = self.mu @ w
        if self.sigma is not None:
            var = np.einsum("i,mij,j->m", w, self.sigma, w)
        else:
            bw = self.beta @ w                           # (M, p)
            var = np.einsum("mi,mij,mj->m", bw, self.sigma_f, bw) + self.psi @ (w * w)
        return mean, var

    def full_sigma(self) -> np.ndarray:
        if self.sigma is not None:
            return self.sigma
        s = np.einsum("mki,mkl,mlj->mij", self.beta, self.sigma_f, self.beta)
        idx = np.arange(self.mu.shape[1])
        s[:, idx, idx] += self.psi
        return s


@dataclass(frozen=True)
class ReturnSample:
    draws: np.ndarray           # (M, N) simulated asset returns
    factor_draws: np.ndarray    # (M, p)
    seed: int | None = None
    params: ParamDraws | None = None

    def __post_init__(self):
        if self.draws.ndim != 2 or self.draws.shape[0] < 1:
            raise ValueError("a sample needs at least one draw")

    @property
    def M(self) -> int:
        return self.draws.shape[0]

    @property
    def n_assets(self) -> int:
        return self.draws.shape[1]


def _streams(seed, n_assets: int):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(1 + n_assets)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def inverse_wishart_draws(df: float, scale, M: int, rng: np.random.Generator):
    """``M`` inverse-Wishart draws and their lower Cholesky factors.

    Uses the same Bartlett variates, in the same generator order, as
    ``scipy.stats.invwishart.rvs``, with the per-draw triangular algebra
    done in one batch.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    A = np.zeros((M, p, p))
    rows, cols = np.tril_indices(p, k=-1)
    A[:, rows, cols] = rng.normal(size=(M, p * (p - 1) // 2))
    diag = np.arange(p)
    A[:, diag, diag] = np.sqrt(rng.chisquare(df=df - p + 1 + diag, size=(M, p)))
    # Sigma = (C A^-1)(C A^-1)', and C A^-1 is lower triangular with a positive diagonal
    L = np.tril(np.linalg.cholesky(scale) @ np.linalg.inv(A))
    return L @ L.transpose(0, 2, 1), L


def sample_factor_block(state: FactorFilterState, M: int, rng: np.random.Generator):
    """Draw ``(Sigma_F, mu_F, R_F)``; inverse-Wishart with df n + p - 1 and scale n S."""
    p = state.p
    df = state.n + p - 1.0
    if df <= p - 1:
        raise ValueError(f"inverse-Wishart degrees of freedom {df} <= p - 1")
    sig, L = inverse_wishart_draws(df, state.n * state.S, M, rng)
    z = rng.standard_normal((2, M, p))
    mu_f = state.m + np.sqrt(state.C) * np.einsum("mij,mj->mi", L, z[0])
    r_f = mu_f + np.einsum("mij,mj->mi", L, z[1])
    return sig, mu_f, r_f


def sample_predictive(asset_states, factor_state: FactorFilterState, M: int = DEFAULT_DRAWS,
                      seed=0, keep_params: bool = False) -> ReturnSample:
    """Joint posterior-predictive draws of next-month asset returns.

    Per draw: ``Sigma_F ~ IW``, ``mu_F ~ N(m, C Sigma_F)``,
    ``R_F ~ N(mu_F, Sigma_F)``; per asset ``v = 1/phi`` with
    ``phi ~ Ga(n/2, d/2)``, ``beta | v ~ N(m, (v/S) C)`` and
    ``R = beta' R_F + N(0, v)``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    asset_states: list[AssetFilterState] = list(asset_states)
    p, n = factor_state.p, len(asset_states)
    rngs = _streams(seed, n)
    sig_f, mu_f, r_f = sample_factor_block(factor_state, M, rngs[0])

    # asset-major buffers keep each asset's writes contiguous
    draws = np.empty((n, M))
    betas = np.empty((n, M, p)) if keep_params else None
    psi = np.empty((n, M)) if keep_params else None
    for i, (s, rng) in enumerate(zip(asset_states, rngs[1:])):
        if s.p != p:
            raise ValueError("asset and factor filters disagree on the factor count")
        phi = rng.gamma(shape=s.n / 2.0, scale=2.0 / s.d, size=M)
        v = 1.0 / phi
        L = np.linalg.cholesky(s.C)
        z = rng.standard_normal((M, p))
        beta = z @ L.T
        beta *= np.sqrt(v / s.S)[:, None]
        beta += s.m
        eps = np.sqrt(v) * rng.standard_normal(M)
        draws[i] = np.einsum("mk,mk->m", beta, r_f) + eps
        if keep_params:
            betas[i] = beta
            psi[i] = v
    draws = np.ascontiguousarray(draws.T)

    params = None
    if keep_params:
        mu = np.einsum("imk,mk->mi", betas, mu_f)
        params = ParamDraws(mu=mu, beta=betas.transpose(1, 2, 0), sigma_f=sig_f, psi=psi.T)
    seed_out = seed if isinstance(seed, (int, np.integer)) else None
    return ReturnSample(draws, r_f, seed_out, params)


def mc_standard_error(values) -> float:
    """Standard error of a Monte Carlo mean: sample sd over sqrt(M)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2:
        raise ValueError("need at least 2 values for a standard error")
    return float(values.std(ddof=1) / np.sqrt(values.size))
