"""Hull-White one-factor analytics with constant mean reversion and volatility.

The short rate is split as r(t) = x(t) + xbar(t), where x is a zero-mean
Ornstein-Uhlenbeck process started at 0 and xbar absorbs the fit to the
initial discount curve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputDataError, OutOfRangeError
from .market_data import MortalityTable, YieldCurve

__all__ = [
    "HWParams",
    "RateState",
    "theta",
    "xbar",
    "b_factor",
    "v_factor",
    "bond_reconstitution",
    "annuity_coefficients",
    "annuity_factor",
    "bond_variance_integrals",
]


@dataclass(frozen=True)
class HWParams:
    alpha: float
    sigma_r: float
    rho_sr: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputDataError("mean reversion alpha must be positive")
        if not self.sigma_r >= 0:
            raise InputDataError("sigma_r must be non-negative")
        if not -1.0 <= self.rho_sr <= 1.0:
            raise InputDataError("rho_sr must lie in [-1, 1]")


@dataclass(frozen=True)
class RateState:
    x: float = 0.0
    t: float = 0.0


def _maybe_float(v, *like):
    return float(v) if all(np.ndim(a) == 0 for a in like) else v


def b_factor(params: HWParams, t, T):
    """b(t,T) = (1 - exp(-alpha (T - t))) / alpha."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    tau = T - t
    if np.any(tau < -1e-14):
        raise OutOfRangeError("b_factor requires t <= T")
    tau = np.maximum(tau, 0.0)
    out = -np.expm1(-params.alpha * tau) / params.alpha
    return _maybe_float(out, t, T)


_SERIES_CUTOFF = 0.1
_N_TERMS = 16


def _int_one_minus_exp(y):
    """int_0^y (1 - e^{-u}) du, accurate for small y."""
    y = np.asarray(y, dtype=float)
    closed = y + np.expm1(-y)
    series = np.zeros_like(y)
    term = -y  # builds (-1)^{k+1} y^{k+1} / (k+1)!
    for k in range(1, _N_TERMS):
        term = -term * y / (k + 1)
        series = series + term
    return np.where(y < _SERIES_CUTOFF, series, closed)


def _int_one_minus_exp_sq(y):
    """int_0^y (1 - e^{-u})^2 du, accurate for small y."""
    y = np.asarray(y, dtype=float)
    closed = y + 2.0 * np.expm1(-y) - 0.5 * np.expm1(-2.0 * y)
    series = np.zeros_like(y)
    fact = 1.0
    for k in range(1, _N_TERMS + 2):
        fact *= k
        coef = (-2.0 * (-1.0) ** k + (-2.0) ** k) / fact
        series = series + coef * y ** (k + 1) / (k + 1)
    return np.where(y < _SERIES_CUTOFF, series, closed)


def v_factor(params: HWParams, t1, t2):
    """Integrated variance of ln P over [t1, t2].

    Equals sigma_r^2/alpha^2 [d + (2/alpha) e^{-alpha d} - e^{-2 alpha d}/(2 alpha) - 3/(2 alpha)]
    with d = t2 - t1, evaluated without cancellation for small alpha d.
    """
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    d = t2 - t1
    if np.any(d < -1e-14):
        raise OutOfRangeError("v_factor requires t1 <= t2")
    d = np.maximum(d, 0.0)
    a = params.alpha
    out = params.sigma_r**2 / a**3 * _int_one_minus_exp_sq(a * d)
    return _maybe_float(out, t1, t2)


def theta(params: HWParams, curve: YieldCurve, t):
    """Drift function fitting the initial term structure."""
    f, dfdT = curve.inst_forward(t)
    a, s = params.alpha, params.sigma_r
    out = np.asarray(dfdT) + a * np.asarray(f) + s**2 / (2 * a) * (1.0 - np.exp(-2 * a * np.asarray(t, dtype=float)))
    return _maybe_float(out, t)


def xbar(params: HWParams, curve: YieldCurve, t):
    """Deterministic part of the short rate."""
    f, _ = curve.inst_forward(t)
    a, s = params.alpha, params.sigma_r
    out = np.asarray(f) + s**2 / (2 * a**2) * (-np.expm1(-a * np.asarray(t, dtype=float)))**2
    return _maybe_float(out, t)


def _bond_log_a(params: HWParams, curve: YieldCurve, T: float, n) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    T = float(T)
    if np.any(n < 0):
        raise OutOfRangeError("bond tenor must be non-negative")
    logp = np.log(curve.discount(T + n)) - np.log(curve.discount(T))
    corr = v_factor(params, 0.0, T + n) - v_factor(params, 0.0, T) - v_factor(params, T, T + n)
    return logp - 0.5 * np.asarray(corr)


def bond_reconstitution(params: HWParams, curve: YieldCurve, T: float, n, x_T):
    """P(T, T+n) given x(T)."""
    logA = _bond_log_a(params, curve, T, n)
    b = b_factor(params, T, T + np.asarray(n, dtype=float))
    out = np.exp(logA - np.asarray(b) * np.asarray(x_T, dtype=float))
    return _maybe_float(out, n, x_T)


def annuity_coefficients(params: HWParams, curve: YieldCurve, table: MortalityTable,
                         x: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Weights c_n = _n p_{x+T} A(T,T+n) and exponents b_n = b(T,T+n).

    The annuity factor is then sum_n c_n exp(-b_n x(T)).
    """
    age = int(x) + int(round(T))
    if abs(T - round(T)) > 1e-12:
        raise OutOfRangeError("retirement horizon T must be an integer number of years")
    if age > table.omega:
        raise OutOfRangeError(f"retirement age {age} exceeds the table's largest age {table.omega}")
    surv = table.survival_curve(age)
    n = np.arange(surv.size, dtype=float)
    logA = _bond_log_a(params, curve, T, n)
    b = np.asarray(b_factor(params, float(T), float(T) + n))
    return surv * np.exp(logA), b


def annuity_factor(params: HWParams, curve: YieldCurve, table: MortalityTable,
                   x: int, T: int, x_T):
    """Survival-weighted annuity-due factor at retirement, given x(T)."""
    c, b = annuity_coefficients(params, curve, table, x, T)
    xt = np.asarray(x_T, dtype=float)
    out = np.exp(-np.multiply.outer(xt, b)) @ c
    return _maybe_float(out, x_T)


def bond_variance_integrals(params: HWParams, T: float) -> tuple[float, float]:
    """Integrals of b(t,T) and b(t,T)^2 over t in [0, T]."""
    a = params.alpha
    ib = _int_one_minus_exp(a * T) / a**2
    ib2 = _int_one_minus_exp_sq(a * T) / a**3
    return float(ib), float(ib2)
