"""Loss, regret and satisfaction probabilities, and threshold selection.

Regret of a sparse decision against a target is the per-scenario difference
in next-month log-wealth loss, ``loss(sparse) - loss(target)``. Its
satisfaction probability is the share of scenarios where that difference is
not positive (weak inequality by default).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .decisions import Decision
from .predictive import ReturnSample

logger = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.10, 0.20, 0.40, 0.50, 0.60, 0.80, 0.90)
INVALID_FLAG_SHARE = 0.01
ANNUALIZE = np.sqrt(12.0)

TIE_RULES = ("closest_to_kappa", "max_pi")
TRANSITION_RULES = ("none", "one_fund_change")
INEQUALITIES = ("weak", "strict")


class RegretError(ValueError):
    pass


def _fees(fees, n):
    if fees is None:
        return None
    fees = np.asarray(fees, dtype=float).ravel()
    if fees.shape != (n,):
        raise RegretError(f"fee vector must have length {n}")
    if np.any(fees < 0):
        raise RegretError("fees must be non-negative")
    return fees


def loss_log_wealth(w, r, fees=None):
    """Negative log of gross portfolio return, ``-log(1 + w'(r - fees))``.

    ``r`` may be one return vector or an ``(M, N)`` stack of scenarios.
    """
    w = np.asarray(w, dtype=float)
    r = np.asarray(r, dtype=float)
    fees = _fees(fees, w.size)
    net = r if fees is None else r - fees
    gross = 1.0 + net @ w
    if np.any(gross <= 0):
        raise RegretError("portfolio return <= -100%: log-wealth loss undefined")
    return -np.log(gross)


@dataclass(frozen=True)
class Summary:
    draws: np.ndarray
    mean: float
    quantiles: dict

    @classmethod
    def of(cls, draws, levels=QUANTILE_LEVELS) -> "Summary":
        draws = np.asarray(draws, dtype=float)
        qs = np.quantile(draws, levels)
        return cls(draws, float(draws.mean()), {float(p): float(q) for p, q in zip(levels, qs)})


@dataclass(frozen=True)
class RegretDistribution(Summary):
    pi: float = 1.0
    n_invalid: int = 0

    @property
    def flagged(self) -> bool:
        total = self.draws.size + self.n_invalid
        return self.n_invalid > INVALID_FLAG_SHARE * total


def _satisfied(gs, gt, strict):
    # rho <= 0 exactly when the sparse gross return is at least the target's
    return gs > gt if strict else gs >= gt


def regret_distribution(w_sparse, w_target, sample: ReturnSample, fees=None,
                        strict: bool = False) -> RegretDistribution:
    """Scenario-wise regret of ``w_sparse`` against ``w_target``.

    Scenarios where either portfolio loses everything are excluded and
    counted in ``n_invalid``.
    """
    w_s = np.asarray(w_sparse, dtype=float)
    w_t = np.asarray(w_target, dtype=float)
    r = sample.draws
    fees = _fees(fees, r.shape[1])
    net = r if fees is None else r - fees
    gs = 1.0 + net @ w_s
    gt = gs if np.array_equal(w_s, w_t) else 1.0 + net @ w_t
    valid = (gs > 0) & (gt > 0)
    n_invalid = int((~valid).sum())
    if n_invalid == r.shape[0]:
        raise RegretError("every scenario wipes out one of the portfolios")
    rho = np.log(gt[valid]) - np.log(gs[valid])
    if n_invalid > INVALID_FLAG_SHARE * r.shape[0]:
        logger.warning("%d of %d scenarios are outside the log domain", n_invalid, r.shape[0])
    base = Summary.of(rho)
    pi = float(np.mean(_satisfied(gs[valid], gt[valid], strict)))
    return RegretDistribution(base.draws, base.mean, base.quantiles, pi=pi, n_invalid=n_invalid)


@dataclass(frozen=True)
class CrossSection:
    """Regret summaries of many candidates against one target on shared draws.

    ``mean`` is None unless summaries were requested.
    """

    pi: np.ndarray
    mean: np.ndarray | None
    quantiles: dict          # level -> array over candidates
    n_invalid: np.ndarray


def _weights_matrix(decisions) -> np.ndarray:
    return np.column_stack([np.asarray(getattr(d, "weights", d), dtype=float) for d in decisions])


def cross_section(decisions, target, sample: ReturnSample, fees=None, strict: bool = False,
                  levels=(), summaries: bool = False, chunk: int = 64) -> CrossSection:
    """Satisfaction probability (and optionally regret summaries) per candidate.

    All candidates are evaluated on the same scenarios. Candidates whose
    weights equal the target's exactly get zero regret in every scenario.
    Regret means are computed when ``summaries`` is set or ``levels`` is
    nonempty; otherwise only gross returns are compared.
    """
    r = sample.draws
    fees = _fees(fees, r.shape[1])
    net = r if fees is None else r - fees
    wt = np.asarray(getattr(target, "weights", target), dtype=float)
    W = _weights_matrix(decisions)
    K, M = W.shape[1], r.shape[0]
    summaries = summaries or bool(levels)
    gt = 1.0 + net @ wt
    gt_ok = gt > 0
    lt = -np.log(np.where(gt_ok, gt, 1.0)) if summaries else None
    pis = np.empty(K)
    means = np.empty(K) if summaries else None
    n_inv = np.empty(K, dtype=np.int64)
    qs = {float(p): np.empty(K) for p in levels}
    same = np.all(W == wt[:, None], axis=0)
    # narrow chunks keep the scenario-by-candidate block in cache
    for start in range(0, K, chunk):
        stop = min(start + chunk, K)
        G = net @ W[:, start:stop]
        sat, counts = _kernels.count_satisfied(G, gt, same[start:stop], strict)
        if np.any(counts == 0):
            raise RegretError("a candidate has no valid scenarios")
        n_inv[start:stop] = M - counts
        pis[start:stop] = sat / counts
        if not summaries:
            continue
        g = 1.0 + G
        g[:, same[start:stop]] = gt[:, None]
        valid = (g > 0) & gt_ok[:, None]
        rho = -np.log(np.where(valid, g, 1.0)) - lt[:, None]
        rho[:, same[start:stop]] = 0.0
        if counts.min() == M:
            means[start:stop] = rho.mean(axis=0)
            qv = np.quantile(rho, list(qs), axis=0) if levels else ()
        else:
            rho[~valid] = np.nan
            means[start:stop] = np.nanmean(rho, axis=0)
            qv = np.nanquantile(rho, list(qs), axis=0) if levels else ()
        for j, p in enumerate(qs):
            qs[p][start:stop] = qv[j]
    return CrossSection(pis, means, qs, n_inv)


def satisfaction_probabilities(decisions, target, sample: ReturnSample, fees=None,
                               strict: bool = False) -> np.ndarray:
    """One satisfaction probability per decision, on common random numbers."""
    return cross_section(decisions, target, sample, fees, strict).pi


def sharpe_ratio_draws(w, sample: ReturnSample) -> np.ndarray:
    if sample.params is None:
        raise RegretError("sample was drawn without parameter draws (keep_params)")
    mean, var = sample.params.portfolio_moments(w)
    if np.any(var <= 0):
        raise RegretError("portfolio variance is not positive in some draw")
    return mean / np.sqrt(var)


def sharpe_diff_distribution(w_sparse, w_target, sample: ReturnSample,
                             annualize: bool = False) -> Summary:
    """Predictive Sharpe ratio of the target minus that of the sparse decision.

    Monthly by default; ``annualize`` scales every draw by sqrt(12).
    """
    w_s = np.asarray(w_sparse, dtype=float)
    w_t = np.asarray(w_target, dtype=float)
    sr_s = sharpe_ratio_draws(w_s, sample)
    sr_t = sr_s if np.array_equal(w_s, w_t) else sharpe_ratio_draws(w_t, sample)
    diff = sr_t - sr_s
    if annualize:
        diff = diff * ANNUALIZE
    return Summary.of(diff)


@dataclass(frozen=True)
class SelectionPolicy:
    kappa: float = 0.45
    tie_rule: str = "closest_to_kappa"
    transition_rule: str = "one_fund_change"
    fees: tuple[float, ...] | None = None
    inequality: str = "weak"

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.tie_rule not in TIE_RULES:
            raise ValueError(f"tie_rule must be one of {TIE_RULES}")
        if self.transition_rule not in TRANSITION_RULES:
            raise ValueError(f"transition_rule must be one of {TRANSITION_RULES}")
        if self.inequality not in INEQUALITIES:
            raise ValueError(f"inequality must be one of {INEQUALITIES}")
        if self.fees is not None:
            fees = tuple(float(x) for x in self.fees)
            if any(x < 0 for x in fees):
                raise ValueError("fees must be non-negative")
            object.__setattr__(self, "fees", fees)

    @property
    def strict(self) -> bool:
        return self.inequality == "strict"


@dataclass(frozen=True)
class Selection:
    decision: Decision
    pi: float
    index: int | None          # position in the candidate list; None when holding
    fallback: str | None = None  # "below_kappa" or "hold_previous"


def one_fund_change(prev_support, support) -> bool:
    """At most one fund added and at most one removed."""
    prev, cur = set(prev_support), set(support)
    return len(cur - prev) <= 1 and len(prev - cur) <= 1


def select(candidates, pis, policy: SelectionPolicy, previous: Decision | None = None,
           previous_pi: float | None = None) -> Selection:
    """Pick a candidate whose satisfaction probability clears ``kappa``.

    Among admissible candidates (``pi >= kappa`` and, if required, within one
    fund change of ``previous``) the tie rule decides; remaining ties go to
    the smaller support, then the smaller id. If nothing is admissible the
    feasible candidate with the largest ``pi`` is taken; if the transition
    rule leaves no candidate at all, ``previous`` is held.
    """
    candidates = list(candidates)
    pis = np.asarray(pis, dtype=float)
    if not candidates or pis.shape != (len(candidates),):
        raise ValueError("need a nonempty candidate list with one pi each")
    feasible = list(range(len(candidates)))
    if policy.transition_rule == "one_fund_change" and previous is not None:
        feasible = [i for i in feasible if one_fund_change(previous.support, candidates[i].support)]
        if not feasible:
            logger.warning("no candidate is within one fund change; holding previous decision")
            pi = float("nan") if previous_pi is None else float(previous_pi)
            return Selection(previous, pi, None, "hold_previous")
    admissible = [i for i in feasible if pis[i] >= policy.kappa]

    def cascade(i):
        return (len(candidates[i].support), candidates[i].id)

    if admissible:
        if policy.tie_rule == "closest_to_kappa":
            best = min(admissible, key=lambda i: (pis[i] - policy.kappa, *cascade(i)))
        else:
            best = min(admissible, key=lambda i: (-pis[i], *cascade(i)))
        return Selection(candidates[best], float(pis[best]), best)
    best = min(feasible, key=lambda i: (-pis[i], *cascade(i)))
    logger.warning("no candidate reaches kappa=%.3f; best pi is %.4f", policy.kappa, pis[best])
    return Selection(candidates[best], float(pis[best]), best, "below_kappa")
