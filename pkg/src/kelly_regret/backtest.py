"""Walk-forward regret-based selection and its output files."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .decisions import (
    Decision,
    EnumerationRules,
    dense_1n,
    dense_kelly,
    enumerate_case_study,
    enumerate_equal_weight,
    lambda_path,
    single_asset,
)
from .dlm import DiscountConfig, FilterBank
from .market_data import AlignedDataset, month_range
from .predictive import DEFAULT_DRAWS, sample_predictive
from .regret import (
    SelectionPolicy,
    cross_section,
    regret_distribution,
    select,
    sharpe_diff_distribution,
)

logger = logging.getLogger(__name__)

DECISION_METHODS = ("l1_path", "enumerated_kelly", "equal_weight")
TARGET_KINDS = ("dense_kelly", "single_asset", "dense_1n")
BAND_LEVELS = (0.20, 0.40, 0.60, 0.80)
HISTOGRAM_BINS = 20


@dataclass(frozen=True)
class BacktestConfig:
    train_periods: int = 120
    discounts: DiscountConfig = field(default_factory=DiscountConfig)
    decision_method: str = "l1_path"
    target_kind: str = "dense_kelly"
    target_ticker: str | None = None
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    mc_draws: int = DEFAULT_DRAWS
    n_lambda: int = 500
    seed: int = 0
    sign_mode: str | None = None          # None: free for l1_path, nonnegative otherwise
    anchor: str | None = None             # None: SPY if present, else the first ticker
    q_range: tuple[int, ...] = (2, 3, 4, 5)
    max_q: int = 4
    prior_window: int = 12
    keep_params: bool = True
    cross_section_dates: tuple[str, ...] | None = None   # None: first out-of-sample month

    def __post_init__(self):
        if self.train_periods < 2:
            raise ValueError("train_periods must be at least 2")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be at least 1")
        if self.decision_method not in DECISION_METHODS:
            raise ValueError(f"decision_method must be one of {DECISION_METHODS}")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}")
        if self.target_kind == "single_asset" and not self.target_ticker:
            raise ValueError("a single_asset target needs target_ticker")
        if self.sign_mode not in (None, "free", "nonnegative"):
            raise ValueError("sign_mode must be free or nonnegative")
        if self.n_lambda < 2:
            raise ValueError("n_lambda must be at least 2")
        if self.prior_window < 1:
            raise ValueError("prior_window must be positive")

    @property
    def resolved_sign_mode(self) -> str:
        if self.sign_mode is not None:
            return self.sign_mode
        return "free" if self.decision_method == "l1_path" else "nonnegative"

    def resolved_anchor(self, universe) -> str:
        if self.anchor is not None:
            return self.anchor
        return "SPY" if "SPY" in universe else universe[0]


@dataclass(frozen=True)
class Band:
    mean: float
    quantiles: dict

    @classmethod
    def of(cls, summary) -> "Band":
        return cls(summary.mean, {p: summary.quantiles[p] for p in BAND_LEVELS})


@dataclass(frozen=True)
class CrossSectionRecord:
    date: str
    ids: tuple[str, ...]
    pi: np.ndarray
    mean: np.ndarray
    q40: np.ndarray
    q60: np.ndarray


@dataclass(frozen=True)
class PeriodRecord:
    date: str
    index: int
    seed: int
    decision: Decision
    target: Decision
    pi: float
    fallback: str | None
    n_candidates: int
    regret: Band
    n_invalid: int
    invalid_flag: bool
    sharpe_diff: Band | None
    sharpe_diff_monthly_mean: float | None
    realized: float | None = None
    target_realized: float | None = None


@dataclass(frozen=True)
class OosStats:
    mean_pct: float
    sd_pct: float
    sharpe: float

    def as_dict(self) -> dict:
        return {"mean_pct": self.mean_pct, "sd_pct": self.sd_pct, "sharpe": self.sharpe}


def oos_stats(returns, periods_per_year: int = 12) -> OosStats:
    """Annualized mean (%), standard deviation (%) and their ratio.

    No risk-free leg is subtracted; the sd uses the n - 1 divisor.
    """
    x = np.asarray(returns, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 returns")
    sd = float(x.std(ddof=1))
    # rounding in the mean leaves a tiny sd for a constant series
    if not sd > 0 or np.all(x == x[0]):
        raise ValueError("returns have zero variance")
    mean_pct = periods_per_year * float(x.mean()) * 100.0
    sd_pct = np.sqrt(periods_per_year) * sd * 100.0
    return OosStats(mean_pct, float(sd_pct), float(mean_pct / sd_pct))


@dataclass(frozen=True)
class BacktestResult:
    tickers: tuple[str, ...]
    records: list[PeriodRecord]
    next_record: PeriodRecord | None
    cross_sections: dict
    config: BacktestConfig

    @property
    def dates(self) -> list[str]:
        return [r.date for r in self.records]

    def selected_returns(self) -> np.ndarray:
        return np.array([r.realized for r in self.records])

    def target_returns(self) -> np.ndarray:
        return np.array([r.target_realized for r in self.records])

    def weights(self) -> np.ndarray:
        return np.array([r.decision.weights for r in self.records]).reshape(len(self.records), len(self.tickers))

    def stats(self) -> dict:
        out = {}
        for name, series in (("selected", self.selected_returns()), ("target", self.target_returns())):
            try:
                out[name] = oos_stats(series)
            except ValueError as exc:
                logger.warning("no out-of-sample stats for %s: %s", name, exc)
                out[name] = None
        return out


def period_seed(seed: int, index: int) -> int:
    """Seed for one investing period, independent of how many periods run."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class _Planner:
    """Builds candidates and targets for one configuration and universe."""

    def __init__(self, cfg: BacktestConfig, tickers):
        self.cfg = cfg
        self.tickers = list(tickers)
        self.sign_mode = cfg.resolved_sign_mode
        self._fixed = None
        if cfg.decision_method == "equal_weight":
            self._fixed = enumerate_equal_weight(self.tickers, cfg.max_q)
        elif cfg.decision_method == "enumerated_kelly":
            anchor = cfg.resolved_anchor(self.tickers)
            if anchor not in self.tickers:
                raise ValueError(f"anchor {anchor!r} is not in the universe")
            self.rules = EnumerationRules(anchor=anchor, q_range=cfg.q_range)
        if cfg.target_kind == "single_asset" and cfg.target_ticker not in self.tickers:
            raise ValueError(f"target ticker {cfg.target_ticker!r} is not in the universe")

    def candidates_and_target(self, moments):
        cfg = self.cfg
        path_target = None
        if cfg.decision_method == "l1_path":
            path = lambda_path(moments, cfg.n_lambda, self.sign_mode)
            candidates = path.decisions
            last = candidates[-1]
            if last.lam == 0.0:
                path_target = Decision(last.weights, "dense_kelly", "dense_kelly", lam=0.0)
        elif cfg.decision_method == "enumerated_kelly":
            candidates = enumerate_case_study(self.tickers, self.rules, moments)
        else:
            candidates = self._fixed
        if cfg.target_kind == "dense_kelly":
            target = path_target or dense_kelly(moments, self.sign_mode)
        elif cfg.target_kind == "dense_1n":
            target = dense_1n(self.tickers)
        else:
            target = single_asset(self.tickers, cfg.target_ticker)
        return candidates, target


def _evaluate(t, date, bank: FilterBank, planner: _Planner, previous, want_cross_section):
    cfg = planner.cfg
    policy = cfg.policy
    moments = bank.moments()
    candidates, target = planner.candidates_and_target(moments)
    seed = period_seed(cfg.seed, t)
    sample = sample_predictive(bank.assets, bank.factor, cfg.mc_draws, seed, keep_params=cfg.keep_params)
    levels = (0.40, 0.60) if want_cross_section else ()
    xs = cross_section(candidates, target, sample, policy.fees, policy.strict, levels=levels)
    xs_record = None
    if want_cross_section:
        xs_record = CrossSectionRecord(date, tuple(c.id for c in candidates), xs.pi, xs.mean,
                                       xs.quantiles[0.40], xs.quantiles[0.60])
    previous_pi = None
    if previous is not None:
        previous_pi = regret_distribution(previous.weights, target.weights, sample,
                                          policy.fees, policy.strict).pi
    sel = select(candidates, xs.pi, policy, previous, previous_pi)
    regret = regret_distribution(sel.decision.weights, target.weights, sample, policy.fees, policy.strict)
    sharpe = sharpe_monthly = None
    if cfg.keep_params:
        sd = sharpe_diff_distribution(sel.decision.weights, target.weights, sample, annualize=True)
        sharpe = Band.of(sd)
        sharpe_monthly = sd.mean / np.sqrt(12.0)
    record = PeriodRecord(
        date=date, index=t, seed=seed, decision=sel.decision, target=target, pi=sel.pi,
        fallback=sel.fallback, n_candidates=len(candidates), regret=Band.of(regret),
        n_invalid=regret.n_invalid, invalid_flag=regret.flagged, sharpe_diff=sharpe,
        sharpe_diff_monthly_mean=sharpe_monthly,
    )
    return record, xs_record


def _initial_bank(dataset: AlignedDataset, cfg: BacktestConfig) -> FilterBank:
    window = min(cfg.prior_window, cfg.train_periods)
    return FilterBank.from_history(dataset.returns.values[:window], dataset.factors.values[:window], window)


def run(dataset: AlignedDataset, cfg: BacktestConfig) -> BacktestResult:
    """Walk forward month by month after the training window.

    The decision for month ``t`` uses filters updated through ``t - 1`` and
    is scored on month ``t``'s realized returns. A final decision for the
    month after the data ends is kept in ``next_record``.
    """
    T = len(dataset)
    if T < cfg.train_periods:
        raise ValueError(f"dataset has {T} months, fewer than train_periods={cfg.train_periods}")
    R, F = dataset.returns.values, dataset.factors.values
    planner = _Planner(cfg, dataset.tickers)
    xs_dates = set(cfg.cross_section_dates or dataset.dates[cfg.train_periods:cfg.train_periods + 1])
    bank = _initial_bank(dataset, cfg)
    records, sections, previous = [], {}, None
    for t in range(T):
        if t >= cfg.train_periods:
            date = dataset.dates[t]
            rec, xs = _evaluate(t, date, bank, planner, previous, date in xs_dates)
            rec = _with_realized(rec, R[t])
            records.append(rec)
            if xs is not None:
                sections[date] = xs
            previous = rec.decision
            logger.info("%s: %s (pi=%.4f)", date, rec.decision.id, rec.pi)
        bank = bank.update(R[t], F[t], cfg.discounts)
    next_date = month_range(dataset.dates[-1], 2)[1]
    next_record, _ = _evaluate(T, next_date, bank, planner, previous, False)
    return BacktestResult(tuple(dataset.tickers), records, next_record, sections, cfg)


def _with_realized(rec: PeriodRecord, r) -> PeriodRecord:
    return replace(rec, realized=float(rec.decision.weights @ r),
                   target_realized=float(rec.target.weights @ r))


def cross_section_at(dataset: AlignedDataset, cfg: BacktestConfig, date: str) -> CrossSectionRecord:
    """Candidate cross-section for one out-of-sample month, without selection."""
    dates = list(dataset.dates)
    oos = dates[cfg.train_periods:]
    if date not in oos:
        if not oos:
            raise ValueError("dataset has no out-of-sample months")
        raise ValueError(f"date {date} is outside the out-of-sample range {oos[0]}..{oos[-1]}")
    t = dates.index(date)
    planner = _Planner(cfg, dataset.tickers)
    bank = _initial_bank(dataset, cfg)
    R, F = dataset.returns.values, dataset.factors.values
    for k in range(t):
        bank = bank.update(R[k], F[k], cfg.discounts)
    moments = bank.moments()
    candidates, target = planner.candidates_and_target(moments)
    sample = sample_predictive(bank.assets, bank.factor, cfg.mc_draws, period_seed(cfg.seed, t))
    xs = cross_section(candidates, target, sample, cfg.policy.fees, cfg.policy.strict, levels=(0.40, 0.60))
    return CrossSectionRecord(date, tuple(c.id for c in candidates), xs.pi, xs.mean,
                              xs.quantiles[0.40], xs.quantiles[0.60])


# ---------------------------------------------------------------- output files

def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_cross_section(xs: CrossSectionRecord, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    order = sorted(range(len(xs.ids)), key=lambda i: xs.ids[i])
    rows = [[xs.ids[i], _fmt(xs.pi[i]), _fmt(xs.mean[i]), _fmt(xs.q40[i]), _fmt(xs.q60[i])] for i in order]
    a = _write_csv(out_dir / f"cross_section_{xs.date}.csv",
                   ["decision_id", "pi", "regret_mean", "q40", "q60"], rows)
    counts, edges = np.histogram(xs.pi, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    b = _write_csv(out_dir / f"pi_histogram_{xs.date}.csv", ["bin_lo", "bin_hi", "count"],
                   [[_fmt(lo), _fmt(hi), int(c)] for lo, hi, c in zip(edges[:-1], edges[1:], counts)])
    return [a, b]


def _band_row(date, band: Band | None):
    if band is None:
        return [date, "", "", "", "", ""]
    return [date, _fmt(band.mean), *(_fmt(band.quantiles[p]) for p in BAND_LEVELS)]


def emit_plot_data(result: BacktestResult, out_dir, annual_weights: bool = False) -> list[Path]:
    """Write the evolution, cross-section, weights and statistics files.

    Regret is ``loss(selected) - loss(target)``; the Sharpe difference is
    ``SR(target) - SR(selected)`` on an annualized scale.
    """
    if not result.records:
        raise ValueError("backtest result has no periods")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    recs = result.records
    files = [
        _write_csv(out_dir / "regret_evolution.csv", ["date", "mean", "q20", "q40", "q60", "q80"],
                   [_band_row(r.date, r.regret) for r in recs]),
        _write_csv(out_dir / "sharpe_diff_evolution.csv",
                   ["date", "mean", "q20", "q40", "q60", "q80", "mean_monthly"],
                   [_band_row(r.date, r.sharpe_diff) + [_fmt(r.sharpe_diff_monthly_mean)] for r in recs]),
    ]
    weight_recs = recs
    if annual_weights:
        seen, weight_recs = set(), []
        for r in recs:
            if r.date[:4] not in seen:
                seen.add(r.date[:4])
                weight_recs.append(r)
    files.append(_write_csv(out_dir / "weights.csv", ["date", *result.tickers],
                            [[r.date, *(_fmt(x) for x in r.decision.weights)] for r in weight_recs]))
    files.append(_write_csv(
        out_dir / "selection.csv",
        ["date", "decision_id", "pi", "fallback", "n_candidates", "n_invalid", "realized", "target_realized"],
        [[r.date, r.decision.id, _fmt(r.pi), r.fallback or "", r.n_candidates, r.n_invalid,
          _fmt(r.realized), _fmt(r.target_realized)] for r in recs]))
    for xs in result.cross_sections.values():
        files.extend(write_cross_section(xs, out_dir))
    stats = {k: (v.as_dict() if v is not None else None) for k, v in result.stats().items()}
    path = out_dir / "stats.json"
    path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(path)
    return files
