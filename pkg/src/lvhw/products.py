"""Monte Carlo pricers for guaranteed annuity options and the GMIB rider.

Every pricer has two entry points: ``*_mc`` simulates its own paths, while
``*_from_batch`` prices on a supplied :class:`PathBatch`. The second lets
several products share paths, so path-wise orderings and parities hold
exactly on the estimates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import log_ndtr, ndtr

from .closed_form import SZParams
from .errors import ConfigurationError, InputDataError
from .hw_rates import HWParams, annuity_coefficients
from .local_vol import LocalVolSurface
from .market_data import MortalityTable, YieldCurve
from .mc_engine import PathBatch, PricingResult, SimConfig, estimate, simulate_qs, simulate_qt, simulate_sz

__all__ = [
    "PolicySpec",
    "BarrierSpec",
    "gao_mc",
    "gao_from_batch",
    "gao_intrinsic",
    "atm_rate",
    "down_in_from_batch",
    "gao_payoff_paths",
    "gmib_payoff_paths",
    "gmib_rider_mc",
    "gmib_from_batch",
    "gao_down_out_mc",
    "gao_down_in_mc",
    "barrier_from_batch",
    "survival_prob_step",
    "ResultRow",
    "write_results_csv",
    "RESULT_COLUMNS",
]


@dataclass(frozen=True)
class PolicySpec:
    age: int = 55
    T: int = 10
    g: float = 0.0888
    r_g: float = 0.0
    S0: float = 100.0
    q: float = 0.0

    def __post_init__(self):
        if not (self.g >= 0 and math.isfinite(self.g)):
            raise InputDataError("guaranteed annuity rate g must be non-negative")
        if int(self.T) != self.T or self.T <= 0:
            raise InputDataError("maturity T must be a positive whole number of years")
        if not self.S0 > 0:
            raise InputDataError("S0 must be positive")

    def with_g(self, g: float) -> "PolicySpec":
        return PolicySpec(self.age, self.T, g, self.r_g, self.S0, self.q)


@dataclass(frozen=True)
class BarrierSpec:
    B: float
    knock: str = "out"
    direction: str = "down"

    def __post_init__(self):
        if not self.B < 0:
            raise InputDataError("barrier on x must be negative since x(0) = 0")
        if self.knock not in ("out", "in"):
            raise InputDataError("knock must be 'out' or 'in'")
        if self.direction != "down":
            raise InputDataError("only down barriers are supported")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _annuity_paths(params, curve, table, policy: PolicySpec, x_T: np.ndarray) -> np.ndarray:
    c, b = annuity_coefficients(params, curve, table, policy.age, policy.T)
    keep = c > 0
    return np.exp(-np.multiply.outer(x_T, b[keep])) @ c[keep]


def _check_batch(batch: PathBatch, policy: PolicySpec, measure: str | None = None) -> None:
    if abs(batch.horizon - policy.T) > 1e-9:
        raise ConfigurationError(f"paths end at {batch.horizon}, policy matures at {policy.T}")
    if measure is not None and batch.config.measure != measure:
        raise ConfigurationError(f"this pricer needs {measure} paths, got {batch.config.measure}")


def _simulate(params, lv, curve, policy: PolicySpec, cfg: SimConfig, sz: SZParams | None):
    cfg = cfg.replace(horizon=float(policy.T), target_T=None)
    if sz is not None:
        return simulate_sz(params, sz, curve, policy.q, policy.S0, cfg)
    if cfg.measure == "QS":
        return simulate_qs(params, lv, curve, policy.q, policy.S0, cfg)
    return simulate_qt(params, lv, curve, policy.q, policy.S0, cfg)


# --------------------------------------------------------------------------
# GAO
# --------------------------------------------------------------------------


def gao_payoff_paths(batch: PathBatch, policy: PolicySpec, params: HWParams, curve: YieldCurve,
                     table: MortalityTable) -> np.ndarray:
    """Per-path discounted GAO payoff, scaled so that its mean is the price."""
    _check_batch(batch, policy)
    if policy.g == 0:
        return np.zeros(batch.n_paths)  # prefactor g -> 0 while the strike 1/g -> infinity
    ann = _annuity_paths(params, curve, table, policy, batch.x_T)
    surv = table.survival(policy.age, policy.T)
    inner = np.maximum(ann - 1.0 / policy.g, 0.0)
    if batch.config.measure == "QT":
        return surv * policy.g * curve.discount(policy.T) * batch.S_T * inner
    return surv * policy.g * policy.S0 * math.exp(-policy.q * policy.T) * inner


def gao_from_batch(batch: PathBatch, policy: PolicySpec, params: HWParams, curve: YieldCurve,
                   table: MortalityTable, keep_samples: bool = False) -> PricingResult:
    y = gao_payoff_paths(batch, policy, params, curve, table)
    return estimate(y, batch.config.seed, keep_samples)


def gao_mc(policy: PolicySpec, params: HWParams, lv: LocalVolSurface | None, curve: YieldCurve,
           table: MortalityTable, cfg: SimConfig, sz: SZParams | None = None) -> PricingResult:
    """GAO total value, under the forward or equity measure per ``cfg.measure``."""
    batch = _simulate(params, lv, curve, policy, cfg, sz)
    return gao_from_batch(batch, policy, params, curve, table)


def _forward_annuity(policy: PolicySpec, curve: YieldCurve, table: MortalityTable) -> float:
    # with sigma_r = 0 and x(T) = 0 the bonds are forward discount factors and alpha drops out
    c, _ = annuity_coefficients(HWParams(1.0, 0.0, 0.0), curve, table, policy.age, policy.T)
    return float(c.sum())


def gao_intrinsic(policy: PolicySpec, curve: YieldCurve, table: MortalityTable) -> float:
    """Payoff evaluated on the forward curve: zero at the at-the-money rate."""
    if policy.g == 0:
        return 0.0
    forward_annuity = _forward_annuity(policy, curve, table)
    surv = table.survival(policy.age, policy.T)
    return surv * policy.g * policy.S0 * math.exp(-policy.q * policy.T) * max(
        forward_annuity - 1.0 / policy.g, 0.0)


def atm_rate(policy: PolicySpec, curve: YieldCurve, table: MortalityTable) -> float:
    """Annuity rate g at which the forward-curve payoff is exactly at the money."""
    return 1.0 / _forward_annuity(policy, curve, table)


# --------------------------------------------------------------------------
# GMIB rider
# --------------------------------------------------------------------------


def gmib_payoff_paths(batch: PathBatch, policy: PolicySpec, params: HWParams, curve: YieldCurve,
                      table: MortalityTable, r_g: float | None = None) -> np.ndarray:
    _check_batch(batch, policy, "QT")
    years = np.rint(batch.anniversary_times).astype(int)
    if batch.S_anniv.shape[1] != policy.T or not np.array_equal(years, np.arange(1, policy.T + 1)):
        raise ConfigurationError("GMIB needs a step grid containing every anniversary 1..T")
    r_g = policy.r_g if r_g is None else r_g
    ann = _annuity_paths(params, curve, table, policy, batch.x_T)
    g = policy.g
    roll_up = policy.S0 * (1.0 + r_g) ** policy.T * g * ann
    ratchet = batch.S_anniv.max(axis=1) * g * ann
    V = np.maximum(np.maximum(roll_up, ratchet), batch.S_T)
    return table.survival(policy.age, policy.T) * curve.discount(policy.T) * V


def gmib_from_batch(batch: PathBatch, policy: PolicySpec, params: HWParams, curve: YieldCurve,
                    table: MortalityTable, r_g: float | None = None) -> PricingResult:
    y = gmib_payoff_paths(batch, policy, params, curve, table, r_g)
    return estimate(y, batch.config.seed)


def gmib_rider_mc(policy: PolicySpec, params: HWParams, lv: LocalVolSurface | None, curve: YieldCurve,
                  table: MortalityTable, cfg: SimConfig, sz: SZParams | None = None) -> PricingResult:
    """GMIB rider value P(0,T) E^{Q_T}[V(T)] _T p_x."""
    batch = _simulate(params, lv, curve, policy, cfg.replace(measure="QT", barriers=()), sz)
    return gmib_from_batch(batch, policy, params, curve, table)


# --------------------------------------------------------------------------
# Barrier GAOs
# --------------------------------------------------------------------------


def survival_prob_step(params: HWParams, sigma_equity_local, x_now, B, dt: float):
    """Probability that x stays above B over one step of length dt.

    The increment of x over the step is treated as Brownian motion with
    drift, with mean mu = rho sigma_r sigma_S (1 - e^{-alpha dt}) / alpha and
    variance s^2 = sigma_r^2 (1 - e^{-2 alpha dt}) / (2 alpha), measured from
    the current state, so the barrier enters as b = B - x_now < 0:

        N((-b + mu)/s) - exp(2 b mu / s^2) N((b + mu)/s).

    Returns 0 when x_now <= B.
    """
    if not dt > 0:
        raise InputDataError("dt must be positive")
    a, sr = params.alpha, params.sigma_r
    sig = np.asarray(sigma_equity_local, dtype=float)
    b = np.asarray(B, dtype=float) - np.asarray(x_now, dtype=float)
    b, sig = np.broadcast_arrays(b, sig)
    mu = params.rho_sr * sr * sig / a * (-math.expm1(-a * dt))
    sd = math.sqrt(sr * sr / (2 * a) * (-math.expm1(-2 * a * dt)))
    out = np.zeros(b.shape)
    live = b < 0
    if sd == 0.0:
        out[live] = (mu[live] > b[live]).astype(float)
    else:
        bl, ml = b[live], mu[live]
        first = ndtr((-bl + ml) / sd)
        second = np.exp(2 * bl * ml / sd**2 + log_ndtr((bl + ml) / sd))
        out[live] = np.clip(first - second, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def barrier_from_batch(batch: PathBatch, policy: PolicySpec, barrier: BarrierSpec, params: HWParams,
                       curve: YieldCurve, table: MortalityTable) -> tuple[PricingResult, PricingResult]:
    """(down-and-out, pure GAO) on the same equity-measure paths."""
    _check_batch(batch, policy, "QS")
    y = gao_payoff_paths(batch, policy, params, curve, table)
    w = batch.weight(barrier.B)
    return estimate(y * w, batch.config.seed), estimate(y, batch.config.seed)


def gao_down_out_mc(policy: PolicySpec, barrier: BarrierSpec, params: HWParams, lv: LocalVolSurface | None,
                    curve: YieldCurve, table: MortalityTable, cfg: SimConfig,
                    sz: SZParams | None = None) -> PricingResult:
    cfg = cfg.replace(measure="QS", barriers=(barrier.B,))
    batch = _simulate(params, lv, curve, policy, cfg, sz)
    return barrier_from_batch(batch, policy, barrier, params, curve, table)[0]


def down_in_from_batch(batch: PathBatch, policy: PolicySpec, barrier: BarrierSpec, params: HWParams,
                       curve: YieldCurve, table: MortalityTable) -> PricingResult:
    """Pure GAO minus down-and-out on one batch; the standard error is that of y (1 - w)."""
    do, pure = barrier_from_batch(batch, policy, barrier, params, curve, table)
    y = gao_payoff_paths(batch, policy, params, curve, table)
    se = estimate(y * (1.0 - batch.weight(barrier.B))).std_error
    return PricingResult(pure.value - do.value, se, pure.n_paths, pure.seed)


def gao_down_in_mc(policy: PolicySpec, barrier: BarrierSpec, params: HWParams, lv: LocalVolSurface | None,
                   curve: YieldCurve, table: MortalityTable, cfg: SimConfig,
                   sz: SZParams | None = None) -> PricingResult:
    cfg = cfg.replace(measure="QS", barriers=(barrier.B,))
    batch = _simulate(params, lv, curve, policy, cfg, sz)
    return down_in_from_batch(batch, policy, barrier, params, curve, table)


# --------------------------------------------------------------------------
# Result rows
# --------------------------------------------------------------------------

RESULT_COLUMNS = ("product", "model", "g", "r_g", "barrier", "value", "std_error", "n_paths", "seed")


@dataclass(frozen=True)
class ResultRow:
    product: str
    model: str
    g: float
    r_g: float | None
    barrier: float | None
    value: float
    std_error: float
    n_paths: int
    seed: int | None

    def cells(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.10g}"
            return str(v)
        return [fmt(getattr(self, c)) for c in RESULT_COLUMNS]


def write_results_csv(rows: Iterable[ResultRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in rows:
            w.writerow(row.cells())
