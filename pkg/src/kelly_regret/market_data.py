"""Monthly return panels: CSV loading, date alignment and synthetic generation.

CSV layout (both returns and factors)::

    date,SPY,IVV,...
    1992-02,0.0123,-0.0040,...

Dates are ``YYYY-MM`` month identifiers and values are simple returns as
decimal fractions.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_FACTOR_NAMES = ("MKT", "SMB", "HML", "RMW", "CMA")

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


class DataError(ValueError):
    """Raised when a panel file or panel contents violate the schema."""


def _check_month(value: str, where: str) -> str:
    m = _MONTH_RE.match(value)
    if m is None or not 1 <= int(m.group(2)) <= 12:
        raise DataError(f"{where}: bad date {value!r}, expected YYYY-MM")
    return value


def month_range(start: str, n: int) -> list[str]:
    """``n`` consecutive month identifiers beginning at ``start``."""
    _check_month(start, "month_range")
    year, month = int(start[:4]), int(start[5:])
    out = []
    for k in range(n):
        y, mo = divmod(month - 1 + k, 12)
        out.append(f"{year + y:04d}-{mo + 1:02d}")
    return out


@dataclass(frozen=True)
class _Panel:
    dates: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", values)
        values.setflags(write=False)
        if values.ndim != 2 or values.shape != (len(self.dates), len(self.columns)):
            raise DataError(
                f"values shape {values.shape} does not match "
                f"{len(self.dates)} dates x {len(self.columns)} columns"
            )
        if len(set(self.columns)) != len(self.columns):
            raise DataError("duplicate column names")
        for d in self.dates:
            _check_month(d, "panel")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError("panel contains missing or non-finite cells")

    def __len__(self) -> int:
        return len(self.dates)

    def take(self, rows) -> "_Panel":
        rows = list(rows)
        return type(self)([self.dates[i] for i in rows], self.columns, self.values[rows])

    def head(self, n: int) -> "_Panel":
        return self.take(range(min(n, len(self))))


@dataclass(frozen=True)
class ReturnPanel(_Panel):
    """T x N simple asset returns; every value must exceed -1."""

    def __post_init__(self):
        super().__post_init__()
        if len(self.columns) < 2:
            raise DataError("a return panel needs at least 2 assets")
        bad = np.argwhere(self.values <= -1.0)
        if bad.size:
            i, j = bad[0]
            raise DataError(
                f"return {self.values[i, j]} <= -1 at date {self.dates[i]}, "
                f"ticker {self.columns[j]}"
            )

    @property
    def tickers(self) -> tuple[str, ...]:
        return self.columns


@dataclass(frozen=True)
class FactorPanel(_Panel):
    """T x p factor returns."""

    def __post_init__(self):
        super().__post_init__()
        if len(self.columns) < 1:
            raise DataError("a factor panel needs at least 1 factor")

    @property
    def names(self) -> tuple[str, ...]:
        return self.columns


@dataclass(frozen=True)
class AlignedDataset:
    returns: ReturnPanel
    factors: FactorPanel

    def __post_init__(self):
        if self.returns.dates != self.factors.dates:
            raise DataError("returns and factors are not aligned")
        if len(self.returns) < 2:
            raise DataError("aligned dataset needs at least 2 months")

    @property
    def dates(self) -> tuple[str, ...]:
        return self.returns.dates

    @property
    def tickers(self) -> tuple[str, ...]:
        return self.returns.tickers

    def __len__(self) -> int:
        return len(self.returns)

    def head(self, n: int) -> "AlignedDataset":
        return AlignedDataset(self.returns.head(n), self.factors.head(n))


def _read_panel(path, kind):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    text = path.read_text(encoding="utf-8-sig")
    reader = csv.reader(io.StringIO(text, newline=None))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "date" or any(not h for h in header[1:]):
        raise DataError(f"{path}: malformed header {rows[0]!r}")
    if len(set(header[1:])) != len(header) - 1:
        raise DataError(f"{path}: duplicate column in header")
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}, row {lineno}: expected {len(header)} fields, got {len(row)}")
        date = _check_month(row[0].strip(), f"{path}, row {lineno}")
        vals = []
        for name, cell in zip(header[1:], row[1:]):
            try:
                x = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}, row {lineno}, column {name}: non-numeric cell {cell!r}"
                ) from None
            if not math.isfinite(x):
                raise DataError(f"{path}, row {lineno}, column {name}: missing value")
            if kind is ReturnPanel and x <= -1.0:
                raise DataError(
                    f"{path}, row {lineno}, ticker {name}: return {x} <= -1"
                )
            vals.append(x)
        dates.append(date)
        values.append(vals)
    if len(set(dates)) != len(dates):
        dup = next(d for d in dates if dates.count(d) > 1)
        raise DataError(f"{path}: duplicate date {dup}")
    if not dates:
        raise DataError(f"{path}: no data rows")
    order = sorted(range(len(dates)), key=dates.__getitem__)
    return kind(
        [dates[i] for i in order],
        header[1:],
        np.array([values[i] for i in order], dtype=float).reshape(len(dates), len(header) - 1),
    )


def load_returns(path) -> ReturnPanel:
    """Read a returns CSV; rows are sorted ascending by date."""
    return _read_panel(path, ReturnPanel)


def load_factors(path) -> FactorPanel:
    return _read_panel(path, FactorPanel)


def write_panel(panel: _Panel, path) -> None:
    # repr() round-trips doubles exactly
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.columns])
        for d, row in zip(panel.dates, panel.values):
            w.writerow([d, *(repr(float(x)) for x in row)])


def align(returns: ReturnPanel, factors: FactorPanel) -> AlignedDataset:
    """Restrict both panels to their common months, keeping date order."""
    common = set(returns.dates) & set(factors.dates)
    if not common:
        raise DataError("returns and factors share no dates")
    ri = [i for i, d in enumerate(returns.dates) if d in common]
    fi = [i for i, d in enumerate(factors.dates) if d in common]
    return AlignedDataset(returns.take(ri), factors.take(fi))


def _is_spd(a: np.ndarray) -> bool:
    if not np.allclose(a, a.T, rtol=0, atol=1e-14 * max(1.0, np.abs(a).max())):
        return False
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground truth for a synthetic panel drawn from a static factor model.

    ``betas`` is N x p, so asset returns are ``betas @ f + e`` with
    ``f ~ N(factor_mean, factor_cov)`` and ``e_i ~ N(0, idio_var[i])``.
    """

    betas: np.ndarray
    factor_mean: np.ndarray
    factor_cov: np.ndarray
    idio_var: np.ndarray
    n_periods: int
    seed: int = 0
    start: str = "2000-01"
    tickers: tuple[str, ...] | None = None
    factor_names: tuple[str, ...] | None = None

    def __post_init__(self):
        betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        mean = np.asarray(self.factor_mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.factor_cov, dtype=float))
        idio = np.asarray(self.idio_var, dtype=float).ravel()
        n, p = betas.shape
        if mean.shape != (p,) or cov.shape != (p, p) or idio.shape != (n,):
            raise ValueError("inconsistent synthetic spec dimensions")
        if self.n_periods < 1:
            raise ValueError("n_periods must be positive")
        if not _is_spd(cov):
            raise ValueError("factor_cov must be symmetric positive definite")
        if np.any(idio < 0):
            raise ValueError("idio_var must be non-negative")
        for name, v in (("betas", betas), ("factor_mean", mean), ("idio_var", idio)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "factor_mean", mean)
        object.__setattr__(self, "factor_cov", cov)
        object.__setattr__(self, "idio_var", idio)
        _check_month(self.start, "synthetic spec")
        tickers = self.tickers or tuple(f"A{i + 1:02d}" for i in range(n))
        if self.factor_names:
            names = self.factor_names
        elif p == len(DEFAULT_FACTOR_NAMES):
            names = DEFAULT_FACTOR_NAMES
        else:
            names = tuple(f"F{k + 1}" for k in range(p))
        if len(tickers) != n or len(names) != p:
            raise ValueError("tickers/factor_names length mismatch")
        object.__setattr__(self, "tickers", tuple(tickers))
        object.__setattr__(self, "factor_names", tuple(names))

    @property
    def n_assets(self) -> int:
        return self.betas.shape[0]

    @property
    def n_factors(self) -> int:
        return self.betas.shape[1]

    @classmethod
    def random(cls, n_assets: int, n_factors: int, n_periods: int, seed: int = 0,
               **kwargs) -> "SyntheticSpec":
        """Plausible monthly-scale parameters drawn from ``seed``.

        Loadings on the first factor are near one (a market factor), the rest
        are small; factor volatility is 1-4.5% a month, idiosyncratic
        volatility 1-4%.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        p = n_factors
        betas = rng.normal(0.0, 0.3, size=(n_assets, p))
        betas[:, 0] = rng.uniform(0.7, 1.3, size=n_assets)
        vol = np.concatenate([[0.045], rng.uniform(0.01, 0.03, size=p - 1)])
        a = rng.normal(size=(p, p + 3))
        corr = np.corrcoef(a)
        cov = corr * np.outer(vol, vol)
        mean = np.concatenate([[0.007], rng.normal(0.002, 0.002, size=p - 1)])
        idio = rng.uniform(0.01, 0.04, size=n_assets) ** 2
        return cls(betas, mean, cov, idio, n_periods, seed=seed, **kwargs)

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        """Build from a JSON mapping; absent matrices are filled by :meth:`random`."""
        raw = dict(raw)
        known = {"n_assets", "n_factors", "n_periods", "seed", "start", "betas",
                 "factor_mean", "factor_cov", "idio_var", "tickers", "factor_names"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "n_periods" not in raw:
            raise ValueError("synthetic spec is missing n_periods")
        n_periods = int(raw["n_periods"])
        if n_periods < 1:
            raise ValueError("n_periods must be positive")
        seed = int(raw.get("seed", 0))
        extra = {k: raw[k] for k in ("start",) if k in raw}
        for k in ("tickers", "factor_names"):
            if k in raw:
                extra[k] = tuple(raw[k])
        if "betas" in raw:
            return cls(np.asarray(raw["betas"], float), raw["factor_mean"], raw["factor_cov"],
                       raw["idio_var"], n_periods, seed=seed, **extra)
        base = cls.random(int(raw["n_assets"]), int(raw.get("n_factors", 5)), n_periods, seed)
        return cls(base.betas, raw.get("factor_mean", base.factor_mean),
                   raw.get("factor_cov", base.factor_cov), raw.get("idio_var", base.idio_var),
                   n_periods, seed=seed, **extra)


def synthesize(spec: SyntheticSpec) -> tuple[ReturnPanel, FactorPanel]:
    """Draw i.i.d. factor months and factor-model asset returns, deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    t, p, n = spec.n_periods, spec.n_factors, spec.n_assets
    chol = np.linalg.cholesky(spec.factor_cov)
    f = spec.factor_mean + rng.standard_normal((t, p)) @ chol.T
    noise = rng.standard_normal((t, n)) * np.sqrt(spec.idio_var)
    r = f @ spec.betas.T + noise
    if np.any(r <= -1.0):
        raise ValueError("synthetic returns fell to -100%; variances are too large")
    dates = month_range(spec.start, t)
    return ReturnPanel(dates, spec.tickers, r), FactorPanel(dates, spec.factor_names, f)
