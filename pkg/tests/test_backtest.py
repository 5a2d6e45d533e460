import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kelly_regret.backtest import (
    BacktestConfig,
    cross_section_at,
    emit_plot_data,
    oos_stats,
    period_seed,
    run,
)
from kelly_regret.regret import SelectionPolicy, one_fund_change
from conftest import make_dataset
from oracles import series_with_moments

TICKERS25 = ["SPY"] + [f"F{i:02d}" for i in range(24)]


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _cfg(**kw):
    base = dict(train_periods=24, mc_draws=500, n_lambda=40)
    base.update(kw)
    return BacktestConfig(**base)


# ---------------------------------------------------------------- oos_stats

def test_oos_stats_table_rows():
    for mean, sd in ((6.02, 14.98), (6.47, 14.41), (8.15, 16.71)):
        s = oos_stats(series_with_moments(mean, sd))
        assert s.mean_pct == pytest.approx(mean, abs=1e-10)
        assert s.sd_pct == pytest.approx(sd, abs=1e-10)


def test_oos_stats_alternating():
    x = np.tile([0.01, -0.01], 50)
    s = oos_stats(x)
    assert s.mean_pct == 0.0 and round(s.sharpe, 2) == 0.0
    assert s.sd_pct == pytest.approx(np.sqrt(12) * np.std(x, ddof=1) * 100, rel=1e-15)


def test_oos_stats_errors():
    with pytest.raises(ValueError, match="variance"):
        oos_stats(np.full(10, 0.01))
    with pytest.raises(ValueError):
        oos_stats([0.01])


@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(1e-3, 1e3))
def test_oos_stats_scaling(seed, alpha):
    x = np.random.default_rng(seed).normal(0.005, 0.04, 60)
    a, b = oos_stats(x), oos_stats(alpha * x)
    assert b.mean_pct == pytest.approx(alpha * a.mean_pct, rel=1e-10, abs=1e-12)
    assert b.sd_pct == pytest.approx(alpha * a.sd_pct, rel=1e-10)
    assert b.sharpe == pytest.approx(a.sharpe, rel=1e-10, abs=1e-12)


# ---------------------------------------------------------------- config / seeds

def test_config_validation():
    for bad in (dict(train_periods=1), dict(mc_draws=0), dict(decision_method="x"),
                dict(target_kind="x"), dict(target_kind="single_asset"), dict(sign_mode="x"),
                dict(n_lambda=1)):
        with pytest.raises(ValueError):
            BacktestConfig(**bad)


def test_period_seed_independent_of_run_length():
    assert period_seed(5, 10) == period_seed(5, 10)
    assert len({period_seed(5, t) for t in range(100)}) == 100
    assert period_seed(5, 10) != period_seed(6, 10)


# ---------------------------------------------------------------- run

def test_enumerated_run_invariants():
    ds = make_dataset(n_assets=6, n_periods=36, seed=1)
    kappa = 0.45
    res = run(ds, _cfg(decision_method="enumerated_kelly", q_range=(2, 3),
                       policy=SelectionPolicy(kappa=kappa)))
    assert len(res.records) == 12
    assert res.dates == list(ds.dates[24:])
    for rec in res.records:
        assert rec.pi >= kappa or rec.fallback is not None
        assert rec.n_candidates == 5 + 10
    for a, b in zip(res.records, res.records[1:]):
        if b.fallback != "hold_previous":
            assert one_fund_change(a.decision.support, b.decision.support)


def test_realized_returns_recomputed():
    ds = make_dataset(n_periods=32, seed=2)
    res = run(ds, _cfg())
    W = res.weights()
    R = ds.returns.values[24:]
    np.testing.assert_allclose(res.selected_returns(), np.einsum("ti,ti->t", W, R), rtol=0, atol=1e-15)
    T = np.array([r.target.weights for r in res.records])
    np.testing.assert_allclose(res.target_returns(), np.einsum("ti,ti->t", T, R), rtol=0, atol=1e-15)


def test_equal_weight_25_assets_candidate_count():
    ds = make_dataset(n_assets=25, n_factors=3, n_periods=26, seed=3, tickers=TICKERS25)
    res = run(ds, _cfg(decision_method="equal_weight", target_kind="dense_1n", max_q=4,
                       mc_draws=50, keep_params=False))
    assert [r.n_candidates for r in res.records] == [15_275, 15_275]
    assert res.next_record.n_candidates == 15_275


def test_run_needs_training_data():
    ds = make_dataset(n_periods=20)
    with pytest.raises(ValueError, match="train_periods"):
        run(ds, _cfg())
    res = run(ds, _cfg(train_periods=20))
    assert res.records == [] and res.next_record.date == "2001-09"
    with pytest.raises(ValueError, match="no periods"):
        emit_plot_data(res, "unused")


def test_unknown_tickers_rejected():
    ds = make_dataset(n_periods=30)
    with pytest.raises(ValueError, match="anchor"):
        run(ds, _cfg(decision_method="enumerated_kelly", anchor="QQQ"))
    with pytest.raises(ValueError, match="target ticker"):
        run(ds, _cfg(target_kind="single_asset", target_ticker="QQQ"))


def test_truncation_reproduces_decisions():
    ds = make_dataset(n_periods=34, seed=4)
    cfg = _cfg(decision_method="enumerated_kelly", q_range=(2, 3))
    full = run(ds, cfg)
    for t in range(cfg.train_periods, len(ds)):
        part = run(ds.head(t), cfg).next_record
        want = full.records[t - cfg.train_periods]
        assert part.date == want.date
        assert part.decision.id == want.decision.id
        assert part.decision.weights.tobytes() == want.decision.weights.tobytes()
        assert part.pi == want.pi


def test_two_runs_byte_identical(tmp_path):
    ds = make_dataset(n_periods=30, seed=5)
    cfg = _cfg(cross_section_dates=("2002-03", "2002-05"))
    a = emit_plot_data(run(ds, cfg), tmp_path / "a")
    b = emit_plot_data(run(ds, cfg), tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


# ---------------------------------------------------------------- output files

def test_emitted_files(tmp_path):
    ds = make_dataset(n_periods=27, seed=6)
    res = run(ds, _cfg())
    files = {p.name for p in emit_plot_data(res, tmp_path)}
    assert files == {"regret_evolution.csv", "sharpe_diff_evolution.csv", "weights.csv", "selection.csv",
                     "cross_section_2002-01.csv", "pi_histogram_2002-01.csv", "stats.json"}
    reg = _rows(tmp_path / "regret_evolution.csv")
    assert reg[0] == ["date", "mean", "q20", "q40", "q60", "q80"] and len(reg) == 4
    for row in reg[1:] + _rows(tmp_path / "sharpe_diff_evolution.csv")[1:]:
        q = [float(x) for x in row[2:6]]
        assert q == sorted(q)
    w = _rows(tmp_path / "weights.csv")
    assert w[0] == ["date", *ds.tickers] and len(w) == 4
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert set(stats) == {"selected", "target"}
    assert set(stats["selected"]) == {"mean_pct", "sd_pct", "sharpe"}
    hist = _rows(tmp_path / "pi_histogram_2002-01.csv")
    assert sum(int(r[2]) for r in hist[1:]) == res.cross_sections["2002-01"].pi.size


def test_self_target_bands_are_zero(tmp_path):
    ds = make_dataset(n_periods=28, seed=7, tickers=["SPY", "A", "B", "C", "D", "E"])
    cfg = _cfg(decision_method="equal_weight", max_q=1, target_kind="single_asset", target_ticker="SPY",
               policy=SelectionPolicy(kappa=0.999, transition_rule="none"))
    res = run(ds, cfg)
    emit_plot_data(res, tmp_path)
    for row in _rows(tmp_path / "regret_evolution.csv")[1:]:
        assert [float(x) for x in row[1:]] == [0.0] * 5
    for row in _rows(tmp_path / "sharpe_diff_evolution.csv")[1:]:
        assert [float(x) for x in row[1:]] == [0.0] * 6


def test_annual_weights_keep_first_month_of_each_year(tmp_path):
    ds = make_dataset(n_periods=40, seed=8)
    res = run(ds, _cfg(keep_params=False))
    emit_plot_data(res, tmp_path, annual_weights=True)
    dates = [r[0] for r in _rows(tmp_path / "weights.csv")[1:]]
    assert dates == ["2002-01", "2003-01"]
    # without parameter draws the Sharpe columns are left empty
    assert _rows(tmp_path / "sharpe_diff_evolution.csv")[1][1:] == [""] * 6


def test_cross_section_with_300_path_decisions(tmp_path):
    ds = make_dataset(n_periods=26, seed=9)
    cfg = _cfg(n_lambda=300)
    xs = cross_section_at(ds, cfg, "2002-01")
    assert len(xs.ids) == 300
    from kelly_regret.backtest import write_cross_section
    path, _ = write_cross_section(xs, tmp_path)
    rows = _rows(path)[1:]
    assert len(rows) == 300
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)
    full = run(ds, cfg)
    np.testing.assert_array_equal(full.cross_sections["2002-01"].pi, xs.pi)
    with pytest.raises(ValueError, match="2002-01..2002-02"):
        cross_section_at(ds, cfg, "2000-06")
