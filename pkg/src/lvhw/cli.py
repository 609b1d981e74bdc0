"""Batch command line front end.

Runs calibrate and price pipelines in process and writes CSV reports. A run
is described by an INI file with the sections [market], [hull_white],
[policy], [simulation], [calibration], [bshw], [sz] and [barrier]; any key
can be overridden with ``--set section.key=value`` and the common ones have
their own flags. Relative file names inside the INI are resolved against the
INI's directory. Without ``--config`` the packaged synthetic desk dataset is
used.

Precedence, lowest first: built-in defaults, the INI file, ``--desk``,
explicit flags.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
import traceback
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .closed_form import SZParams, bshw_law, critical_rate, gao_closed_form, szhw_law
from .errors import (ArbitrageError, CalibrationError, ConfigurationError, CoverageError,
                     InputDataError, LvhwError, OutOfRangeError, SparseDataError)
from .hw_rates import HWParams
from .local_vol import CalibrationGrid, LocalVolSurface, calibrate_mc
from .market_data import (ImpliedVolSurface, MortalityTable, YieldCurve, read_curve_csv,
                          read_mortality_csv, read_smile_csv)
from .mc_engine import THREADS_ENV, PathBatch, SimConfig, simulate_qs, simulate_qt, simulate_sz
from .products import (BarrierSpec, PolicySpec, ResultRow, atm_rate, barrier_from_batch,
                       down_in_from_batch, gao_from_batch, gmib_from_batch, write_results_csv)

log = logging.getLogger("lvhw")

MODELS = ("bshw", "szhw", "lvhw1", "lvhw2", "lvhw3", "lvhw")
PRODUCTS = ("gao", "gmib", "gao_do", "gao_di")
LV_SLOPES = {"lvhw1": 0.0, "lvhw2": 0.01, "lvhw3": -0.003}
G_GRID = (0.07, 0.08, 0.09, 0.10, 0.11, 0.12, 0.13)
DESK_PRESET = (20_000, 500)
FULL_SIZE = (100_000, 5_000)

EXIT_OK = 0
EXIT_INTERNAL = 10
EXIT_CODES = (
    (EXIT_OK, "success"),
    (LvhwError.exit_code, "unclassified package error"),
    (2, "command line usage error"),
    (InputDataError.exit_code, "unreadable or malformed input (config, curve, mortality, smile, surface)"),
    (OutOfRangeError.exit_code, "query outside a curve, table or inversion range"),
    (ConfigurationError.exit_code, "inconsistent run or simulation settings"),
    (CoverageError.exit_code, "local volatility surface or curve does not cover the horizon"),
    (ArbitrageError.exit_code, "smile implies a non-positive density at a calibration node"),
    (CalibrationError.exit_code, "local volatility bootstrap failed (slice and strike reported)"),
    (SparseDataError.exit_code, "too few paths for a conditional estimate"),
    (EXIT_INTERNAL, "unexpected internal error"),
)

DEFAULTS: dict[str, dict[str, str]] = {
    "market": {
        "curve": "curve_flat4.csv",
        "mortality": "mortality_gompertz.csv",
        "smile": "smile_us.csv",
        "reference_maturity": "10",
        "q": "0",
        "smile_tail": "smooth",
    },
    "hull_white": {"alpha": "0.05", "sigma_r": "0.01", "rho_sr": "0.1464"},
    "policy": {"age": "55", "T": "10", "g": "0.0888", "r_g": "0", "S0": "100"},
    "simulation": {"n_paths": str(FULL_SIZE[0]), "n_steps": str(FULL_SIZE[1]),
                   "seed": "20240101", "measure": "QT"},
    "calibration": {"maturity_step": "0.5", "n_strikes": "421", "strike_lo": "0.4",
                    "strike_hi": "2.5", "rate_convention": "printed", "digital": "market",
                    "control_variate": "yes"},
    "bshw": {"sigma": ""},
    "sz": {"kappa": "0.21", "psi": "0.17", "tau": "0.157", "nu0": "0.179",
           "rho_snu": "-0.94", "rho_rnu": "0"},
    "barrier": {"levels": "", "annuity_rates": "0.08"},
}


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def _data_dir() -> Path:
    return Path(str(resources.files("lvhw") / "data"))


def default_config_path() -> Path:
    return _data_dir() / "desk.ini"


@dataclass
class RunContext:
    """Everything a pricing run needs, resolved from the INI file and flags."""

    curve: YieldCurve
    table: MortalityTable
    smile: ImpliedVolSurface
    params: HWParams
    policy: PolicySpec
    sim: SimConfig
    grid: CalibrationGrid
    rate_convention: str
    digital: str
    control_variate: bool
    sigma_bshw: float
    sz: SZParams
    barriers: tuple[float, ...]
    slope_override: float | None = None
    surfaces: dict[str, LocalVolSurface] = field(default_factory=dict)


def _read_ini(path: Path | None, overrides: Sequence[str]) -> tuple[configparser.ConfigParser, Path]:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case (T, S0)
    cp.read_dict(DEFAULTS)
    path = default_config_path() if path is None else Path(path)
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise InputDataError(f"{path}: {exc.strerror or exc}") from None
    except configparser.Error as exc:
        raise InputDataError(f"{path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())
    for section in cp.sections():
        known = DEFAULTS.get(section)
        if known is None:
            raise ConfigurationError(f"unknown configuration section [{section}]")
        unknown = sorted(set(cp[section]) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cp, path.parent


def _get(cp, section, key, conv=float):
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError:
        raise InputDataError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None


def _floats(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(float(v) for v in raw.replace(";", ",").split(","))
    except ValueError:
        raise InputDataError(f"cannot parse number list {raw!r}") from None


def _resolve(base: Path, name: str) -> Path:
    p = Path(name).expanduser()
    if p.is_absolute():
        return p
    if (base / p).exists():
        return base / p
    return _data_dir() / p


def build_context(args: argparse.Namespace) -> RunContext:
    overrides = list(args.set or [])
    for flag, key in (("seed", "simulation.seed"), ("n_paths", "simulation.n_paths"),
                      ("n_steps", "simulation.n_steps"), ("measure", "simulation.measure"),
                      ("smile", "market.smile"), ("curve", "market.curve"),
                      ("mortality", "market.mortality"), ("sigma_r", "hull_white.sigma_r"),
                      ("r_g", "policy.r_g")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "desk", False):
        desk = [f"simulation.n_paths={DESK_PRESET[0]}", f"simulation.n_steps={DESK_PRESET[1]}"]
        explicit = {o.split("=", 1)[0] for o in overrides}
        overrides = [d for d in desk if d.split("=", 1)[0] not in explicit] + overrides
    cp, base = _read_ini(args.config, overrides)

    curve = read_curve_csv(_resolve(base, cp.get("market", "curve")))
    table = read_mortality_csv(_resolve(base, cp.get("market", "mortality")))
    smile = read_smile_csv(_resolve(base, cp.get("market", "smile")),
                           reference_maturity=_get(cp, "market", "reference_maturity"),
                           tail=cp.get("market", "smile_tail"))
    q = _get(cp, "market", "q")
    params = HWParams(_get(cp, "hull_white", "alpha"), _get(cp, "hull_white", "sigma_r"),
                      _get(cp, "hull_white", "rho_sr"))
    T = _get(cp, "policy", "T")
    if T != int(T):
        raise InputDataError("[policy] T must be a whole number of years")
    policy = PolicySpec(_get(cp, "policy", "age", int), int(T), _get(cp, "policy", "g"),
                        _get(cp, "policy", "r_g"), _get(cp, "policy", "S0"), q)
    sim = SimConfig(_get(cp, "simulation", "n_paths", int), _get(cp, "simulation", "n_steps", int),
                    _get(cp, "simulation", "seed", int), cp.get("simulation", "measure").upper(),
                    float(policy.T))
    grid = CalibrationGrid.default(policy.S0, float(policy.T),
                                   _get(cp, "calibration", "maturity_step"),
                                   _get(cp, "calibration", "n_strikes", int),
                                   _get(cp, "calibration", "strike_lo"),
                                   _get(cp, "calibration", "strike_hi"))
    raw_sigma = cp.get("bshw", "sigma").strip()
    sigma_bshw = float(smile.vol(policy.S0, smile.reference_maturity)) if not raw_sigma else float(raw_sigma)
    sz = SZParams(*(_get(cp, "sz", k) for k in ("kappa", "psi", "tau", "nu0", "rho_snu", "rho_rnu")))
    try:
        control_variate = cp.getboolean("calibration", "control_variate")
    except ValueError as exc:
        raise InputDataError(f"[calibration] control_variate: {exc}") from None
    levels = _floats(cp.get("barrier", "levels"))
    if not levels:
        levels = tuple(critical_rate(params, curve, table, policy.age, policy.T, rate)
                       for rate in _floats(cp.get("barrier", "annuity_rates")))
    return RunContext(curve, table, smile, params, policy, sim, grid,
                      cp.get("calibration", "rate_convention"), cp.get("calibration", "digital"),
                      control_variate, sigma_bshw, sz, levels, getattr(args, "slope", None))


# --------------------------------------------------------------------------
# Pipelines
# --------------------------------------------------------------------------


def model_slope(ctx: RunContext, model: str) -> float:
    if ctx.slope_override is not None:
        return ctx.slope_override
    if model == "lvhw":
        raise ConfigurationError("model 'lvhw' needs an explicit --slope")
    return LV_SLOPES[model]


def calibrate_model(ctx: RunContext, model: str) -> LocalVolSurface:
    if model in ctx.surfaces:
        return ctx.surfaces[model]
    slope = model_slope(ctx, model)
    log.info("calibrating %s (maturity slope %g) with %d paths x %d steps",
             model, slope, ctx.sim.n_paths, ctx.sim.n_steps)
    lv = calibrate_mc(ctx.params, ctx.smile.with_slope(slope), ctx.curve, ctx.policy.q,
                      ctx.policy.S0, ctx.sim.replace(measure="QT", barriers=()), ctx.grid,
                      ctx.rate_convention, ctx.digital, ctx.control_variate)
    ctx.surfaces[model] = lv
    return lv


def _simulate(ctx: RunContext, model: str, measure: str, barriers: tuple[float, ...] = ()) -> PathBatch:
    cfg = ctx.sim.replace(measure=measure, barriers=barriers)
    p = ctx.policy
    if model == "szhw":
        return simulate_sz(ctx.params, ctx.sz, ctx.curve, p.q, p.S0, cfg)
    lv = (LocalVolSurface.constant(ctx.sigma_bshw) if model == "bshw" else calibrate_model(ctx, model))
    sim = simulate_qs if measure == "QS" else simulate_qt
    return sim(ctx.params, lv, ctx.curve, p.q, p.S0, cfg)


def _closed_form_gao(ctx: RunContext, model: str, g: float) -> float:
    p = ctx.policy
    if model == "bshw":
        law = bshw_law(ctx.params, ctx.sigma_bshw, p.T)
    else:
        law = szhw_law(ctx.params, ctx.sz, p.T)
    return gao_closed_form(law, ctx.params, ctx.curve, ctx.table, p.age, p.T, g, p.S0, p.q)


def price_rows(ctx: RunContext, model: str, product: str, gs: Sequence[float],
               r_gs: Sequence[float] = (), barriers: Sequence[float] = (),
               method: str = "auto") -> list[ResultRow]:
    """Rows for one model and product over a g grid, all from one path batch."""
    p = ctx.policy
    rows: list[ResultRow] = []
    closed = product == "gao" and model in ("bshw", "szhw") and method in ("auto", "closed")
    if method == "closed" and not closed:
        raise ConfigurationError(f"no closed form for {product} under {model}")
    if closed:
        for g in gs:
            rows.append(ResultRow(product, model, g, None, None,
                                  _closed_form_gao(ctx, model, g), 0.0, 0, None))
        return rows
    if product == "gao":
        batch = _simulate(ctx, model, ctx.sim.measure)
        for g in gs:
            res = gao_from_batch(batch, p.with_g(g), ctx.params, ctx.curve, ctx.table)
            rows.append(ResultRow(product, model, g, None, None, res.value, res.std_error,
                                  res.n_paths, res.seed))
    elif product == "gmib":
        batch = _simulate(ctx, model, "QT")
        for g in gs:
            for r_g in (r_gs or (p.r_g,)):
                res = gmib_from_batch(batch, p.with_g(g), ctx.params, ctx.curve, ctx.table, r_g)
                rows.append(ResultRow(product, model, g, r_g, None, res.value, res.std_error,
                                      res.n_paths, res.seed))
    elif product in ("gao_do", "gao_di"):
        levels = tuple(barriers or ctx.barriers)
        if not levels:
            raise ConfigurationError("barrier products need at least one barrier level")
        batch = _simulate(ctx, model, "QS", levels)
        for g in gs:
            for B in levels:
                spec = BarrierSpec(B, "out" if product == "gao_do" else "in")
                if product == "gao_do":
                    res = barrier_from_batch(batch, p.with_g(g), spec, ctx.params, ctx.curve, ctx.table)[0]
                else:
                    res = down_in_from_batch(batch, p.with_g(g), spec, ctx.params, ctx.curve, ctx.table)
                rows.append(ResultRow(product, model, g, None, B, res.value, res.std_error,
                                      res.n_paths, res.seed))
    else:
        raise ConfigurationError(f"unknown product {product!r}")
    return rows


def parse_g_range(text: str, step: float = 0.01) -> tuple[float, ...]:
    """``0.07..0.13`` (inclusive, with ``step``) or a comma list."""
    text = text.strip()
    if ".." in text:
        lo_s, hi_s = text.split("..", 1)
        try:
            lo, hi = float(lo_s), float(hi_s)
        except ValueError:
            raise InputDataError(f"cannot parse g range {text!r}") from None
        if not (0 < lo <= hi) or not step > 0:
            raise InputDataError(f"invalid g range {text!r}")
        n = int(math.floor((hi - lo) / step + 1e-9))
        return tuple(round(lo + k * step, 12) for k in range(n + 1))
    vals = _floats(text)
    if not vals:
        raise InputDataError("empty g list")
    return vals


def sweep_grid(ctx: RunContext, gs: Sequence[float], include_atm: bool = True) -> tuple[float, ...]:
    grid = set(float(g) for g in gs)
    if include_atm:
        grid.add(round(atm_rate(ctx.policy, ctx.curve, ctx.table), 10))
    return tuple(sorted(grid))


def _surface_path(out: Path, model: str) -> Path:
    return out.with_name(f"{out.stem}_{model}_surface.csv")


def _write_surfaces(ctx: RunContext, out: Path, explicit: Path | None = None) -> None:
    for model, lv in ctx.surfaces.items():
        path = explicit if (explicit is not None and len(ctx.surfaces) == 1) else _surface_path(out, model)
        lv.to_csv(path)
        log.info("wrote %s surface to %s", model, path)


def _load_surface(ctx: RunContext, model: str, path: str | None) -> None:
    if path is None:
        return
    if model not in LV_SLOPES and model != "lvhw":
        raise ConfigurationError("--surface only applies to local volatility models")
    ctx.surfaces[model] = LocalVolSurface.from_csv(path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_calibrate(args, ctx: RunContext) -> int:
    if args.model not in LV_SLOPES and args.model != "lvhw":
        raise ConfigurationError(f"calibrate needs a local volatility model, got {args.model!r}")
    lv = calibrate_model(ctx, args.model)
    lv.to_csv(args.out)
    return EXIT_OK


def cmd_price(args, ctx: RunContext) -> int:
    _load_surface(ctx, args.model, args.surface)
    g = ctx.policy.g if args.g is None else args.g
    barriers = _floats(args.barrier) if args.barrier else ()
    rows = price_rows(ctx, args.model, args.product, (g,), (), barriers, args.method)
    write_results_csv(rows, args.out)
    if args.surface is None:
        _write_surfaces(ctx, Path(args.out), args.surface_out)
    return EXIT_OK


def cmd_sweep(args, ctx: RunContext) -> int:
    _load_surface(ctx, args.model, args.surface)
    gs = sweep_grid(ctx, parse_g_range(args.g, args.g_step), not args.no_atm)
    r_gs = _floats(args.r_g_list) if args.r_g_list else ()
    barriers = _floats(args.barrier) if args.barrier else ()
    rows = price_rows(ctx, args.model, args.product, gs, r_gs, barriers, args.method)
    write_results_csv(rows, args.out)
    if args.surface is None:
        _write_surfaces(ctx, Path(args.out), args.surface_out)
    return EXIT_OK


def cmd_report(args, ctx: RunContext) -> int:
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    for m in models:
        if m not in MODELS:
            raise ConfigurationError(f"unknown model {m!r}")
    gs = sweep_grid(ctx, parse_g_range(args.g, args.g_step), not args.no_atm)
    r_gs = _floats(args.r_g_list) if args.r_g_list else ()
    barriers = _floats(args.barrier) if args.barrier else ()
    rows: list[ResultRow] = []
    for m in models:
        rows.extend(price_rows(ctx, m, args.product, gs, r_gs, barriers, args.method))
    write_results_csv(rows, args.out)
    _write_surfaces(ctx, Path(args.out))
    return EXIT_OK


def _epilog() -> str:
    lines = ["exit codes:"]
    lines += [f"  {code:>2}  {text}" for code, text in EXIT_CODES]
    lines += ["", f"environment:\n  {THREADS_ENV}  number of simulation threads (default 1); results do not"
              " depend on it"]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="lvhw", description=__doc__, epilog=_epilog(),
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (INI); default: packaged desk.ini")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration entry (repeatable)")
    common.add_argument("--desk", action="store_true",
                        help=f"desk preset: {DESK_PRESET[0]} paths x {DESK_PRESET[1]} steps")
    common.add_argument("--n-paths", type=int)
    common.add_argument("--n-steps", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--measure", choices=("QT", "QS"), help="GAO pricing measure")
    common.add_argument("--smile", help="smile CSV (strike,vol)")
    common.add_argument("--curve", help="discount curve CSV (maturity_years,discount_factor)")
    common.add_argument("--mortality", help="mortality CSV (age,p)")
    common.add_argument("--sigma-r", type=float, help="Hull-White rate volatility")
    common.add_argument("--slope", type=float, help="implied vol maturity slope (overrides the model's)")
    common.add_argument("--threads", type=int, help=f"sets {THREADS_ENV}")
    common.add_argument("-o", "--out", required=True, help="output CSV")

    pricing = argparse.ArgumentParser(add_help=False)
    pricing.add_argument("--product", choices=PRODUCTS, default="gao")
    pricing.add_argument("--barrier", help="comma list of barrier levels B < 0 on x")
    pricing.add_argument("--method", choices=("auto", "closed", "mc"), default="auto",
                         help="closed form (GAO under bshw/szhw) or Monte Carlo")

    p = sub.add_parser("calibrate", parents=[common], formatter_class=fmt,
                       help="bootstrap a local volatility surface to CSV")
    p.add_argument("--model", choices=("lvhw1", "lvhw2", "lvhw3", "lvhw"), default="lvhw1")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("price", parents=[common, pricing], formatter_class=fmt,
                       help="price one product at one guaranteed rate")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--g", type=float, help="guaranteed annuity rate (default from [policy])")
    p.add_argument("--r-g", type=float, help="GMIB roll-up rate")
    p.add_argument("--surface", help="use this local volatility CSV instead of calibrating")
    p.add_argument("--surface-out", type=Path, help="where to write the calibrated surface")
    p.set_defaults(func=cmd_price)

    for name, helptext in (("sweep", "price one model over a g grid plus the at-the-money rate"),
                           ("report", "price several models over a g grid into one table")):
        p = sub.add_parser(name, parents=[common, pricing], formatter_class=fmt, help=helptext)
        if name == "sweep":
            p.add_argument("--model", choices=MODELS, required=True)
            p.add_argument("--surface", help="use this local volatility CSV instead of calibrating")
            p.add_argument("--surface-out", type=Path)
            p.set_defaults(func=cmd_sweep)
        else:
            p.add_argument("--models", default="bshw,szhw,lvhw1,lvhw2,lvhw3")
            p.set_defaults(func=cmd_report)
        p.add_argument("--g", default="0.07..0.13", help="range lo..hi or comma list")
        p.add_argument("--g-step", type=float, default=0.01)
        p.add_argument("--no-atm", action="store_true", help="do not add the at-the-money rate")
        p.add_argument("--r-g-list", help="comma list of GMIB roll-up rates")
    return parser


def _origin(exc: BaseException) -> str:
    module = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("lvhw."):
            module = name.split(".", 1)[1].lstrip("_")
    return module


def _diagnostic(exc: BaseException) -> str:
    parts = [f"lvhw: error in {_origin(exc)}: {exc}"]
    for attr in ("slice_index", "T", "K", "radicand"):
        v = getattr(exc, attr, None)
        if v is not None:
            parts.append(f"{attr}={v:g}" if isinstance(v, float) else f"{attr}={v}")
    return " ".join(parts)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        os.environ[THREADS_ENV] = str(args.threads)
    try:
        ctx = build_context(args)
        return args.func(args, ctx)
    except LvhwError as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        print(f"lvhw: internal error: {exc!r}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
