"""Command-line entry point: ``kelly-regret {backtest,simulate,cross-section}``.

Configuration is a flat JSON object whose keys are the :class:`RunConfig`
fields. Values resolve as command-line flag, then config file, then default.
Relative paths in a config file are taken relative to that file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .backtest import BacktestConfig, cross_section_at, emit_plot_data, run, write_cross_section
from .dlm import DiscountConfig
from .market_data import SyntheticSpec, align, load_factors, load_returns, synthesize, write_panel
from .regret import SelectionPolicy

PROG = "kelly-regret"
LOG_ENV = "KELLY_REGRET_LOG"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

METHOD_FLAGS = {"l1": "l1_path", "enum": "enumerated_kelly", "ew": "equal_weight"}
SIGN_FLAGS = {"free": "free", "nonneg": "nonnegative"}


class CliError(Exception):
    pass


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    returns: Path | None = None
    factors: Path | None = None
    out: Path = Path("out")
    train_periods: int = Field(120, ge=2)
    delta_beta: float = Field(0.9925, gt=0.8, le=1.0)
    delta_epsilon: float = Field(0.97, gt=0.8, le=1.0)
    delta_c: float = Field(0.9925, gt=0.8, le=1.0)
    delta_F: float = Field(0.97, gt=0.8, le=1.0)
    decision_method: Literal["l1_path", "enumerated_kelly", "equal_weight"] = "l1_path"
    target_kind: Literal["dense_kelly", "single_asset", "dense_1n"] = "dense_kelly"
    target_ticker: str | None = None
    kappa: float = Field(0.45, gt=0.0, lt=1.0)
    tie_rule: Literal["closest_to_kappa", "max_pi"] = "closest_to_kappa"
    transition_rule: Literal["none", "one_fund_change"] = "one_fund_change"
    inequality_mode: Literal["weak", "strict"] = "weak"
    fees: list[float] | None = None
    mc_draws: int = Field(10_000, ge=1)
    n_lambda: int = Field(500, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)
    sign_mode: Literal["free", "nonnegative"] | None = None
    anchor: str | None = None
    q_range: list[int] = [2, 3, 4, 5]
    max_q: int = Field(4, ge=1)
    prior_window: int = Field(12, ge=1)
    keep_params: bool = True
    cross_section_dates: list[str] | None = None
    annual_weights: bool = False
    threads: int | None = Field(None, ge=1)

    @field_validator("returns", "factors")
    @classmethod
    def _exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"file not found: {v}")
        return v

    @field_validator("fees")
    @classmethod
    def _fees(cls, v):
        if v is not None and any(x < 0 for x in v):
            raise ValueError("fees must be non-negative")
        return v

    def backtest_config(self) -> BacktestConfig:
        discounts = DiscountConfig(self.delta_beta, self.delta_epsilon, self.delta_c, self.delta_F)
        policy = SelectionPolicy(self.kappa, self.tie_rule, self.transition_rule,
                                 None if self.fees is None else tuple(self.fees), self.inequality_mode)
        return BacktestConfig(
            train_periods=self.train_periods, discounts=discounts, decision_method=self.decision_method,
            target_kind=self.target_kind, target_ticker=self.target_ticker, policy=policy,
            mc_draws=self.mc_draws, n_lambda=self.n_lambda, seed=self.seed, sign_mode=self.sign_mode,
            anchor=self.anchor, q_range=tuple(self.q_range), max_q=self.max_q,
            prior_window=self.prior_window, keep_params=self.keep_params,
            cross_section_dates=None if self.cross_section_dates is None else tuple(self.cross_section_dates),
        )


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(x) for x in err["loc"]) or "config"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        elif "input" in err and not isinstance(err["input"], (dict, list)):
            msg = f"{msg} (got {err['input']!r})"
        parts.append(f"{key}: {msg}")
    return "invalid config: " + "; ".join(parts)


def _read_json(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: expected a JSON object")
    return raw


def _flag_overrides(args) -> dict:
    out = {}
    for key in ("out", "seed", "kappa", "threads", "returns", "factors"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "method", None):
        out["decision_method"] = METHOD_FLAGS[args.method]
    if getattr(args, "sign", None):
        out["sign_mode"] = SIGN_FLAGS[args.sign]
    if getattr(args, "ineq", None):
        out["inequality_mode"] = args.ineq
    if getattr(args, "annual_weights", False):
        out["annual_weights"] = True
    target = getattr(args, "target", None)
    if target:
        if target == "dense":
            out["target_kind"] = "dense_kelly"
        elif target == "ew-dense":
            out["target_kind"] = "dense_1n"
        elif target.startswith("ticker:") and len(target) > len("ticker:"):
            out["target_kind"] = "single_asset"
            out["target_ticker"] = target[len("ticker:"):]
        else:
            raise CliError(f"target: expected dense, ticker:<T> or ew-dense (got {target!r})")
    return out


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Merge defaults, an optional config file and flag overrides, in that order."""
    merged = {}
    if path is not None:
        merged = _read_json(path)
        base = Path(path).resolve().parent
        for key in ("returns", "factors", "out"):
            if isinstance(merged.get(key), str) and not Path(merged[key]).is_absolute():
                merged[key] = str(base / merged[key])
    merged.update(overrides or {})
    try:
        return RunConfig(**merged)
    except ValidationError as exc:
        raise CliError(_format_validation(exc)) from None


def _dataset(cfg: RunConfig):
    if cfg.returns is None or cfg.factors is None:
        missing = "returns" if cfg.returns is None else "factors"
        raise CliError(f"{missing}: no data file given (config key or --{missing})")
    return align(load_returns(cfg.returns), load_factors(cfg.factors))


def _backtest_config(cfg: RunConfig) -> BacktestConfig:
    try:
        return cfg.backtest_config()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from None


def cmd_backtest(args) -> int:
    cfg = load_run_config(args.config, _flag_overrides(args))
    bt = _backtest_config(cfg)
    result = run(_dataset(cfg), bt)
    emit_plot_data(result, cfg.out, annual_weights=cfg.annual_weights)
    return 0


def cmd_simulate(args) -> int:
    raw = _read_json(args.spec)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(raw)
        returns, factors = synthesize(spec)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_panel(returns, out / "returns.csv")
    write_panel(factors, out / "factors.csv")
    return 0


def cmd_cross_section(args) -> int:
    cfg = load_run_config(args.config, _flag_overrides(args))
    bt = _backtest_config(cfg)
    dataset = _dataset(cfg)
    date = args.date
    if date is None:
        if len(dataset) <= bt.train_periods:
            raise CliError("dataset has no out-of-sample months")
        date = dataset.dates[bt.train_periods]
    try:
        xs = cross_section_at(dataset, bt, date)
    except ValueError as exc:
        raise CliError(f"date: {exc}") from None
    write_cross_section(xs, cfg.out)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_run_flags(p):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--returns", help="monthly returns CSV")
    p.add_argument("--factors", help="monthly factor CSV")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--kappa", type=float, help="satisfaction threshold in (0, 1)")
    p.add_argument("--method", choices=sorted(METHOD_FLAGS), help="candidate family")
    p.add_argument("--target", help="dense | ticker:<T> | ew-dense")
    p.add_argument("--sign", choices=sorted(SIGN_FLAGS), help="weight sign mode")
    p.add_argument("--ineq", choices=("weak", "strict"), help="satisfaction inequality")
    p.add_argument("--threads", type=int, help="worker cap")
    p.add_argument("--annual-weights", action="store_true", help="one weights row per year")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Regret-based selection of sparse dynamic portfolios.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    bt = sub.add_parser("backtest", help="walk-forward selection and output files")
    _add_run_flags(bt)
    bt.set_defaults(func=cmd_backtest)
    sim = sub.add_parser("simulate", help="write a synthetic returns/factors panel")
    sim.add_argument("spec", help="JSON synthetic spec")
    sim.add_argument("--out", default=".", help="output directory")
    sim.add_argument("--seed", type=int, help="override the spec seed")
    sim.set_defaults(func=cmd_simulate)
    xs = sub.add_parser("cross-section", help="candidate cross-section for one month")
    _add_run_flags(xs)
    xs.add_argument("--date", help="YYYY-MM; default the first out-of-sample month")
    xs.set_defaults(func=cmd_cross_section)
    return parser


def _setup_logging():
    name = os.environ.get(LOG_ENV, "error").strip().lower() or "error"
    if name not in LOG_LEVELS:
        raise CliError(f"{LOG_ENV}: expected one of {', '.join(LOG_LEVELS)} (got {name!r})")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
