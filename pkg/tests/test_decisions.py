import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kelly_regret import _kernels
from kelly_regret.decisions import (
    ConvergenceError,
    Decision,
    EnumerationRules,
    NormalizationError,
    count_case_study,
    count_equal_weight,
    dense_1n,
    dense_kelly,
    enumerate_case_study,
    enumerate_equal_weight,
    kkt_residual,
    lambda_grid,
    lambda_path,
    make_targets,
    normalize,
    single_asset,
    solve_kelly_constrained,
    solve_l1,
)
from kelly_regret.dlm import PredictiveMoments
from oracles import grid_constrained_3, grid_l1_2d, grid_simplex_2, kelly_objective, soft_threshold_breakpoint


def random_moments(n, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n + 3)) * scale
    sigma = a @ a.T / (n + 3) + 1e-4 * np.eye(n)
    mu = rng.normal(0.006, 0.01, n)
    return PredictiveMoments.from_moments(mu, sigma)


# ---------------------------------------------------------------- Decision / normalize

def test_decision_invariants():
    d = Decision(np.array([0.5, 0.0, 0.5]), "x", "equal_weight")
    assert d.support == (0, 2)
    assert d.tickers(["A", "B", "C"]) == ("A", "C")
    with pytest.raises(ValueError, match="sum"):
        Decision(np.array([0.5, 0.4]), "x", "l1_path")
    with pytest.raises(ValueError, match="negative"):
        Decision(np.array([1.5, -0.5]), "x", "enumerated_kelly")
    Decision(np.array([1.5, -0.5]), "x", "l1_path")
    with pytest.raises(ValueError):
        Decision(np.array([1.0]), "x", "nonsense")


def test_normalize():
    np.testing.assert_array_equal(normalize([0.2, 0.2]), [0.5, 0.5])
    np.testing.assert_array_equal(normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    with pytest.raises(NormalizationError):
        normalize([1e-9, -1e-9])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12))
def test_normalize_sums_to_one(raw):
    raw = np.array(raw)
    if abs(raw.sum()) < 1e-3:
        return
    assert abs(normalize(raw).sum() - 1.0) < 1e-12


# ---------------------------------------------------------------- l1 solver

def test_lambda_zero_is_linear_solve():
    mom = random_moments(8, 1)
    w = solve_l1(mom, 0.0)
    direct = np.linalg.solve(mom.sigma_nc, mom.mu)
    assert np.abs(w - direct).max() < 1e-8


def test_full_shrinkage_gives_zero():
    mom = random_moments(5, 2)
    lam_max = np.abs(mom.mu).max()
    np.testing.assert_array_equal(solve_l1(mom, lam_max), 0.0)
    np.testing.assert_array_equal(solve_l1(mom, 2 * lam_max), 0.0)


def test_two_asset_grid_oracle():
    mom = PredictiveMoments.from_noncentral([0.012, -0.006], [[0.05, 0.012], [0.012, 0.03]])
    lam = np.abs(mom.mu).max() / 2
    w = solve_l1(mom, lam)
    w_grid, _ = grid_l1_2d(mom.sigma_nc, mom.mu, lam)
    assert np.abs(w - w_grid).max() <= 2e-4


def test_soft_threshold_breakpoint():
    mu, q = np.array([0.01, 0.005]), np.array([0.04, 0.04])
    mom = PredictiveMoments.from_noncentral(mu, np.diag(q))
    bp = soft_threshold_breakpoint(mu, q)[1]
    below = solve_l1(mom, bp * 0.99)
    above = solve_l1(mom, bp * 1.01)
    assert set(np.flatnonzero(below)) == {0, 1}
    assert set(np.flatnonzero(above)) == {0}
    # closed form on a diagonal problem
    np.testing.assert_allclose(below, (mu - bp * 0.99) / q, rtol=1e-12)
    path = lambda_path(mom, 200)
    sizes = [len(d.support) for d in path.decisions]
    lams = [d.lam for d in path.decisions]
    for size, lam in zip(sizes, lams):
        assert size == (1 if lam >= bp else 2)


def test_nonnegative_mode_clips():
    mom = PredictiveMoments.from_noncentral([0.01, -0.004, 0.006], np.diag([0.04, 0.03, 0.05]))
    w = solve_l1(mom, 0.001, "nonnegative")
    assert w[1] == 0.0 and np.all(w >= 0)
    assert kkt_residual(mom.sigma_nc, mom.mu, w, 0.001, "nonnegative") <= 1e-8


def test_objective_trace_non_increasing():
    mom = random_moments(10, 3)
    for lam in (0.0, 1e-4, 1e-3):
        _, trace = solve_l1(mom, lam, trace=True)
        assert len(trace) >= 2
        assert np.all(np.diff(trace) <= 1e-15 * np.abs(trace[:-1]).max())


def test_cap_without_convergence_raises():
    mom = random_moments(6, 4)
    with pytest.raises(ConvergenceError):
        solve_l1(mom, 0.0, max_sweeps=1, tol=0.0)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), frac=st.floats(0.0, 1.2),
       mode=st.sampled_from(["free", "nonnegative"]))
def test_kkt_on_random_fixtures(seed, n, frac, mode):
    mom = random_moments(n, seed)
    lam = frac * np.abs(mom.mu).max()
    w = solve_l1(mom, lam, mode)
    assert kkt_residual(mom.sigma_nc, mom.mu, w, lam, mode) <= 1e-8


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), frac=st.floats(0.0, 1.0))
def test_kernel_objective_monotone(seed, n, frac):
    mom = random_moments(n, seed)
    lam = frac * np.abs(mom.mu).max()
    tr = np.empty(10_001)
    w = np.zeros(n)
    k = _kernels.cd_lasso(mom.sigma_nc, mom.mu, lam, w, False, 10_000, 1e-10, tr)
    vals = tr[: k + 1]
    assert np.all(np.diff(vals) <= 1e-14 * max(1.0, np.abs(vals).max()))


# ---------------------------------------------------------------- path

def test_path_shape_and_endpoints():
    mom = random_moments(12, 5)
    path = lambda_path(mom, 500)
    assert len(path.lambdas) == 500 and len(path.decisions) == 500
    assert np.all(np.diff(path.lambdas) < 0) and path.lambdas[-1] == 0.0
    assert len(path.decisions[0].support) == 1
    last = path.decisions[-1]
    dense = dense_kelly(mom, "free")
    np.testing.assert_allclose(last.weights, dense.weights, rtol=0, atol=1e-8)
    assert all(len(d.support) <= len(last.support) for d in path.decisions)
    assert path.decisions[0].id == "lam000" and last.id == "lam499"


def test_path_single_asset():
    mom = PredictiveMoments.from_noncentral([0.01], [[0.04]])
    for d in lambda_path(mom, 20).decisions:
        np.testing.assert_array_equal(d.weights, [1.0])


def test_path_grid_geometry():
    mom = PredictiveMoments.from_noncentral([0.01, -0.02], np.eye(2) * 0.04)
    g = lambda_grid(mom, 5, "free")
    np.testing.assert_allclose(g[:4], np.geomspace(0.999 * 0.02, 1e-4 * 0.02, 4))
    assert lambda_grid(mom, 5, "nonnegative")[0] == pytest.approx(0.999 * 0.01)
    with pytest.raises(ValueError):
        lambda_grid(PredictiveMoments.from_noncentral([0.0, 0.0], np.eye(2)), 5)


def test_path_matches_individual_warm_started_solves():
    mom = random_moments(6, 8)
    path = lambda_path(mom, 30)
    w = np.zeros(6)
    for lam, d in zip(path.lambdas, path.decisions):
        w = solve_l1(mom, lam, w0=w)
        np.testing.assert_array_equal(d.weights, normalize(w))


def test_path_drops_unnormalizable_points():
    # a long-short pair whose raw weights cancel out exactly along the path
    mom = PredictiveMoments.from_noncentral([0.01, -0.01], np.eye(2) * 0.04)
    with pytest.raises(NormalizationError):
        lambda_path(mom, 10)


# ---------------------------------------------------------------- constrained Kelly

def test_symmetric_problem_gives_equal_weights():
    mom = PredictiveMoments.from_noncentral(np.full(4, 0.01), np.eye(4))
    d = solve_kelly_constrained(mom, range(4), np.zeros(4))
    np.testing.assert_allclose(d.weights, 0.25, atol=1e-10)


def test_five_fund_bounds():
    mom = random_moments(7, 9)
    rules = EnumerationRules(anchor="A", q_range=(5,))
    lb = rules.lower_bounds(5)
    assert lb[0] == 0.25 and lb[1] == pytest.approx(0.0625)
    d = solve_kelly_constrained(mom, [0, 2, 3, 5, 6], lb)
    assert d.weights[0] >= 0.25 - 1e-10
    assert np.all(d.weights[[2, 3, 5, 6]] >= 0.0625 - 1e-10)
    assert abs(d.weights.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_three_asset_grid_oracle(seed):
    mom = random_moments(3, seed + 20)
    lb = EnumerationRules(anchor="A", q_range=(3,)).lower_bounds(3)
    d = solve_kelly_constrained(mom, [0, 1, 2], lb)
    _, best = grid_constrained_3(mom.sigma_nc, mom.mu, lb)
    assert kelly_objective(mom.sigma_nc, mom.mu, d.weights) <= best + 1e-4
    assert np.all(d.weights >= lb - 1e-10) and abs(d.weights.sum() - 1) < 1e-10


def test_infeasible_bounds():
    mom = random_moments(3, 0)
    with pytest.raises(ValueError, match="infeasible"):
        solve_kelly_constrained(mom, [0, 1], [0.7, 0.4])
    with pytest.raises(ValueError):
        EnumerationRules(anchor="A", anchor_min=0.8, other_total=0.3)


def test_projection_onto_simplex():
    v = np.array([0.9, 0.5, -0.3, 0.1])
    p = _kernels.project_simplex(v, 1.0)
    assert abs(p.sum() - 1) < 1e-15 and np.all(p >= 0)
    # optimality: the projection is the brute-force nearest point on a fine grid of the 2-face
    np.testing.assert_allclose(p, [0.7, 0.3, 0.0, 0.0], atol=1e-15)


# ---------------------------------------------------------------- enumeration

TICKERS25 = ["SPY"] + [f"F{i:02d}" for i in range(24)]


def test_reference_counts():
    assert count_case_study(25, EnumerationRules("SPY")) == 12_950
    assert count_case_study(25, EnumerationRules(None, q_range=(1, 2, 3, 4))) == 15_275
    assert count_equal_weight(25, 4) == 15_275
    assert len(enumerate_equal_weight(TICKERS25, 4)) == 15_275


def test_small_enumeration():
    mom = random_moments(3, 1)
    out = enumerate_case_study(["A", "B", "C"], EnumerationRules("A", q_range=(2,)), mom)
    assert [d.id for d in out] == ["A+B", "A+C"]
    with pytest.raises(ValueError, match="anchor"):
        enumerate_case_study(["X", "B", "C"], EnumerationRules("A", q_range=(2,)), mom)


@given(n=st.integers(3, 12), seed=st.integers(0, 1000))
def test_enumeration_count_formula(n, seed):
    tickers = [f"T{i}" for i in range(n)]
    rules = EnumerationRules(tickers[seed % n], q_range=(2, 3, 4, 5))
    mom = random_moments(n, seed)
    out = enumerate_case_study(tickers, rules, mom)
    assert len(out) == sum(math.comb(n - 1, q - 1) for q in (2, 3, 4, 5)) == count_case_study(n, rules)
    a = tickers.index(rules.anchor)
    for d in out:
        q = len(d.id.split("+"))
        assert d.weights[a] >= rules.anchor_min - 1e-10
        others = [tickers.index(t) for t in d.id.split("+")[1:]]
        assert np.all(d.weights[others] >= rules.other_min(q) - 1e-10)
        assert abs(d.weights.sum() - 1.0) < 1e-12


def test_equal_weight_enumeration():
    out = enumerate_equal_weight(TICKERS25[:5], 3)
    triple = next(d for d in out if len(d.support) == 3)
    np.testing.assert_allclose(triple.weights[list(triple.support)], 1 / 3, rtol=1e-15)
    assert round(100 * triple.weights[triple.support[1]]) == 33
    singles = enumerate_equal_weight(TICKERS25, 1)
    assert len(singles) == 25 and all(d.weights.max() == 1.0 for d in singles)
    with pytest.raises(ValueError):
        enumerate_equal_weight(TICKERS25, 0)


# ---------------------------------------------------------------- targets

def test_targets():
    mom = random_moments(25, 3)
    t = make_targets(mom, TICKERS25, "SPY")
    np.testing.assert_allclose(t["dense_1n"].weights, 0.04, rtol=1e-14)
    np.testing.assert_array_equal(t["single_asset"].weights, np.eye(25)[0])
    assert np.all(t["dense_kelly"].weights >= -1e-12)
    with pytest.raises(ValueError, match="unknown ticker"):
        single_asset(TICKERS25, "QQQ")
    assert dense_1n(["A", "B"]).weights.sum() == 1.0


def test_dense_kelly_two_asset_grid():
    mom = PredictiveMoments.from_noncentral([0.01, 0.006], [[0.05, 0.01], [0.01, 0.03]])
    d = dense_kelly(mom)
    w, _ = grid_simplex_2(mom.sigma_nc, mom.mu)
    assert np.abs(d.weights - w).max() < 1e-4
