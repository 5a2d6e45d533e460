"""Regret-based selection of sparse dynamic portfolios.

Dynamic linear models give a posterior predictive for next-month returns;
candidate sparse portfolios are scored by how often they do no worse than a
dense target in log-wealth, and the one closest to a satisfaction threshold
is held for the month.
"""
from .backtest import BacktestConfig, BacktestResult, cross_section_at, emit_plot_data, oos_stats, run
from .decisions import (
    Decision,
    EnumerationRules,
    dense_kelly,
    enumerate_case_study,
    enumerate_equal_weight,
    lambda_path,
    solve_kelly_constrained,
    solve_l1,
)
from .dlm import DiscountConfig, FilterBank, PredictiveMoments
from .market_data import AlignedDataset, SyntheticSpec, align, load_factors, load_returns, synthesize
from .predictive import ReturnSample, sample_predictive
from .regret import SelectionPolicy, cross_section, regret_distribution, select, sharpe_diff_distribution

__version__ = "0.1.0"

__all__ = [
    "AlignedDataset", "BacktestConfig", "BacktestResult", "Decision", "DiscountConfig",
    "EnumerationRules", "FilterBank", "PredictiveMoments", "ReturnSample", "SelectionPolicy",
    "SyntheticSpec", "align", "cross_section", "cross_section_at", "dense_kelly",
    "emit_plot_data", "enumerate_case_study", "enumerate_equal_weight", "lambda_path",
    "load_factors", "load_returns", "oos_stats", "regret_distribution", "run",
    "sample_predictive", "select", "sharpe_diff_distribution", "solve_kelly_constrained",
    "solve_l1", "synthesize",
]
