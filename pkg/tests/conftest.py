import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from kelly_regret.market_data import SyntheticSpec, align, synthesize  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    n = marker.args[0]
    ok = rep.passed if rep.when == "call" else False
    prev = _criteria.get(n, (True, 0.0, []))
    _criteria[n] = (prev[0] and ok, prev[1] + rep.duration, prev[2] + [item.name])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, secs, names = _criteria[n]
        terminalreporter.write_line(
            f"criterion {n}: {'PASS' if ok else 'FAIL'} ({secs:.1f}s; {', '.join(names)})")


def make_dataset(n_assets=6, n_factors=3, n_periods=40, seed=0, tickers=None):
    spec = SyntheticSpec.random(n_assets, n_factors, n_periods, seed=seed, tickers=tickers)
    return align(*synthesize(spec))


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
