"""Analytic prices: Black-Scholes utilities and GAO closed forms.

The GAO formulas decompose the annuity payoff into a portfolio of bond
options under the equity measure, where x(T) is Gaussian with the moments
returned by :func:`bshw_law` or :func:`szhw_law`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.stats import norm

from .errors import InputDataError, OutOfRangeError
from .hw_rates import HWParams, annuity_coefficients, bond_variance_integrals
from .market_data import MortalityTable, YieldCurve

__all__ = [
    "BSQuote",
    "GaussianRateLaw",
    "SZParams",
    "SZMomentParts",
    "bs_call",
    "bs_implied_vol",
    "bshw_call",
    "bshw_law",
    "szhw_law",
    "sz_moment_parts",
    "critical_rate",
    "gao_closed_form",
]


@dataclass(frozen=True)
class BSQuote:
    price: float
    vega: float
    d_plus: float
    d_minus: float


def bs_call(S0, K, T, r, q, vol, discount=None) -> BSQuote:
    """Black-Scholes call with flat rate r, or an explicit discount factor.

    ``vega`` is dC/dvol = exp(-qT) S0 n(d+) sqrt(T).
    """
    if discount is None:
        discount = np.exp(-r * T)
    S0, K, T, vol = (np.asarray(a, dtype=float) for a in (S0, K, T, vol))
    fwd_df = S0 * np.exp(-q * T)
    sd = vol * np.sqrt(T)
    with np.errstate(divide="ignore"):
        d_plus = (np.log(fwd_df / (K * discount)) + 0.5 * sd**2) / sd
    d_minus = d_plus - sd
    price = fwd_df * ndtr(d_plus) - K * discount * ndtr(d_minus)
    vega = fwd_df * norm.pdf(d_plus) * np.sqrt(T)
    if np.ndim(price) == 0:
        return BSQuote(float(price), float(vega), float(d_plus), float(d_minus))
    return BSQuote(price, vega, d_plus, d_minus)


def bs_implied_vol(price: float, S0: float, K: float, T: float, r: float = 0.0,
                   q: float = 0.0, discount: float | None = None,
                   lo: float = 1e-6, hi: float = 5.0) -> float:
    """Invert :func:`bs_call` for the volatility by bracketed root finding."""
    if discount is None:
        discount = math.exp(-r * T)
    fwd_df = S0 * math.exp(-q * T)
    lower = max(fwd_df - K * discount, 0.0)
    upper = fwd_df
    p_lo = bs_call(S0, K, T, r, q, lo, discount).price
    p_hi = bs_call(S0, K, T, r, q, hi, discount).price
    if not (price > max(lower, p_lo) and price < min(upper, p_hi)):
        raise OutOfRangeError(
            f"call price {price!r} outside invertible range ({max(lower, p_lo)!r}, {min(upper, p_hi)!r})"
            f" for K={K}, T={T}")

    def f(v):
        return bs_call(S0, K, T, r, q, v, discount).price - price

    return float(brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200))


def bshw_call(params: HWParams, curve: YieldCurve, S0: float, K, T: float, sigma_s: float,
              q: float = 0.0):
    """European call under constant equity vol with Hull-White rates.

    Under the T-forward measure the forward S(t)exp(-q(T-t))/P(t,T) is
    lognormal with total variance
    sigma_s^2 T + 2 rho sigma_s sigma_r int b + sigma_r^2 int b^2.
    """
    ib, ib2 = bond_variance_integrals(params, T)
    var = sigma_s**2 * T + 2 * params.rho_sr * sigma_s * params.sigma_r * ib + params.sigma_r**2 * ib2
    P = curve.discount(T)
    return bs_call(S0, K, T, 0.0, q, math.sqrt(var / T), discount=P).price


def bshw_rate_digital(params: HWParams, curve: YieldCurve, S0: float, K, T: float, sigma_s: float,
                      q: float = 0.0):
    """E^{Q_T}[(r(T) - f(0,T)) 1{S(T) > K}] under constant equity vol.

    ln S(T) and r(T) are jointly Gaussian under the forward measure, with
    E[r(T)] = f(0,T) and Cov(r(T), ln S(T)) = rho sigma_s sigma_r b(0,T)
    + sigma_r^2 b(0,T)^2 / 2.
    """
    a, sr = params.alpha, params.sigma_r
    b = -math.expm1(-a * T) / a
    ib, ib2 = bond_variance_integrals(params, T)
    var = sigma_s**2 * T + 2 * params.rho_sr * sigma_s * sr * ib + sr**2 * ib2
    cov = params.rho_sr * sigma_s * sr * b + 0.5 * (sr * b) ** 2
    sd = math.sqrt(var)
    m = math.log(S0 * math.exp(-q * T) / curve.discount(T)) - 0.5 * var
    z = (np.log(np.asarray(K, dtype=float)) - m) / sd
    out = cov / sd * norm.pdf(z)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Laws of x(T) under the equity measure
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianRateLaw:
    mu_x: float
    sigma_x: float

    def __post_init__(self):
        if not self.sigma_x >= 0:
            raise InputDataError("sigma_x must be non-negative")


@dataclass(frozen=True)
class SZParams:
    """Schobel-Zhu volatility: d nu = kappa (psi - nu) dt + tau dW_nu."""

    kappa: float
    psi: float
    tau: float
    nu0: float
    rho_snu: float = 0.0
    rho_rnu: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise InputDataError("kappa must be positive")
        if not self.tau >= 0:
            raise InputDataError("tau must be non-negative")
        for name in ("rho_snu", "rho_rnu"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise InputDataError(f"{name} must lie in [-1, 1]")


@dataclass(frozen=True)
class SZMomentParts:
    sigma1: float
    sigma2: float
    rho12: float
    psi_tilde: float
    kappa_tilde: float


def bshw_law(params: HWParams, sigma_s: float, T: float) -> GaussianRateLaw:
    a = params.alpha
    mu = params.rho_sr * params.sigma_r * sigma_s / a * (-math.expm1(-a * T))
    var = params.sigma_r**2 / (2 * a) * (-math.expm1(-2 * a * T))
    return GaussianRateLaw(mu, math.sqrt(max(var, 0.0)))


_SINGULAR_TOL = 1e-8


def _decay_ratio(a: float, k: float, T: float) -> float:
    """(exp(-k T) - exp(-a T)) / (a - k), with its limit T exp(-a T) at a = k."""
    if abs(a - k) < _SINGULAR_TOL:
        return T * math.exp(-a * T)
    return (math.exp(-k * T) - math.exp(-a * T)) / (a - k)


def sz_moment_parts(params: HWParams, sz: SZParams, T: float,
                    sigma2_form: str = "corrected") -> SZMomentParts:
    """Components of the variance of x(T) under the equity measure.

    ``sigma2_form="corrected"`` integrates the volatility-driven term
    exactly; ``"printed"`` uses exp(-2(a+k)T) in place of exp(-(a+k)T) in
    the last term of the sigma2 bracket, which is not the variance of any
    process and can make the bracket negative (an error is raised then).
    """
    a, sr = params.alpha, params.sigma_r
    kt = sz.kappa - sz.rho_snu * sz.tau
    if not kt > 0:
        raise InputDataError("kappa - rho_snu * tau must be positive")
    psit = sz.psi * sz.kappa / kt
    sigma1 = sr * math.sqrt(-math.expm1(-2 * a * T) / (2 * a))
    c = params.rho_sr * sr * sz.tau
    if c == 0.0 or T == 0.0:
        return SZMomentParts(sigma1, 0.0, 0.0, psit, kt)
    if abs(a - kt) < _SINGULAR_TOL:
        # limit a -> k of the bracket divided by (a - k)^2
        i2 = _int_v2_exp(2 * a, T)
        sigma2 = abs(c) * math.sqrt(max(i2, 0.0))
        i1 = _int_v_exp(2 * a, T)
        cross = sz.rho_rnu * c * sr * i1
    else:
        if sigma2_form == "corrected":
            tail = 2 * math.exp(-(a + kt) * T) / (a + kt)
        elif sigma2_form == "printed":
            tail = 2 * math.exp(-2 * (a + kt) * T) / (a + kt)
        else:
            raise InputDataError(f"unknown sigma2 form {sigma2_form!r}")
        bracket = (1 / (2 * kt) + 1 / (2 * a) - 2 / (a + kt)
                   - math.exp(-2 * kt * T) / (2 * kt) - math.exp(-2 * a * T) / (2 * a) + tail)
        if bracket < 0:
            raise OutOfRangeError(f"sigma2 bracket is negative ({bracket:.3e}) for the {sigma2_form} form")
        sigma2 = abs(c / (a - kt)) * math.sqrt(bracket)
        cross = sz.rho_rnu * c * sr / (a - kt) * (
            -math.expm1(-(a + kt) * T) / (a + kt) - (-math.expm1(-2 * a * T)) / (2 * a))
    if sigma1 == 0.0 or sigma2 == 0.0:
        rho12 = 0.0
    else:
        rho12 = cross / (sigma1 * sigma2)
    return SZMomentParts(sigma1, sigma2, rho12, psit, kt)


def _int_v_exp(c: float, T: float) -> float:
    """int_0^T v exp(-c v) dv."""
    return (1 - math.exp(-c * T) * (1 + c * T)) / c**2


def _int_v2_exp(c: float, T: float) -> float:
    """int_0^T v^2 exp(-c v) dv."""
    return (2 - math.exp(-c * T) * (c * c * T * T + 2 * c * T + 2)) / c**3


def szhw_law(params: HWParams, sz: SZParams, T: float,
             sigma2_form: str = "corrected") -> GaussianRateLaw:
    """Mean and standard deviation of x(T) under the equity measure."""
    parts = sz_moment_parts(params, sz, T, sigma2_form)
    a, kt, psit = params.alpha, parts.kappa_tilde, parts.psi_tilde
    mu = params.rho_sr * params.sigma_r * (
        psit / a * (-math.expm1(-a * T)) + (sz.nu0 - psit) * _decay_ratio(a, kt, T))
    var = parts.sigma1**2 + parts.sigma2**2 + 2 * parts.rho12 * parts.sigma1 * parts.sigma2
    return GaussianRateLaw(mu, math.sqrt(max(var, 0.0)))


# --------------------------------------------------------------------------
# GAO
# --------------------------------------------------------------------------


def critical_rate(params: HWParams, curve: YieldCurve, table: MortalityTable,
                  x: int, T: int, g: float) -> float:
    """Rate state x* at which the annuity factor equals 1/g."""
    if not g > 0:
        raise InputDataError("guaranteed annuity rate must be positive")
    c, b = annuity_coefficients(params, curve, table, x, T)
    target = 1.0 / g
    if np.all(b[c > 0] == 0):
        raise OutOfRangeError("annuity factor does not depend on the rate state: no critical rate")

    def f(z):
        return float(np.exp(-b * z) @ c) - target

    lo, hi = -1.0, 1.0
    for _ in range(60):
        if f(lo) > 0 > f(hi):
            break
        if f(lo) <= 0:
            lo *= 2
        if f(hi) >= 0:
            hi *= 2
    else:
        raise OutOfRangeError("critical rate bracket expansion failed")
    return float(brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def gao_closed_form(law: GaussianRateLaw, params: HWParams, curve: YieldCurve,
                    table: MortalityTable, x: int, T: int, g: float, S0: float,
                    q: float = 0.0) -> float:
    """GAO value as a sum of Gaussian bond-option terms.

    ``q`` enters only through the exp(-qT) equity-measure prefactor.
    """
    c, b = annuity_coefficients(params, curve, table, x, T)
    surv = table.survival(x, T)
    xs = critical_rate(params, curve, table, x, T, g)
    keep = c > 0
    c, b = c[keep], b[keep]
    # c already contains _n p_{x+T} * A_n; split A_n back out for the strikes
    K_n = np.exp(-b * xs)                  # bond strike divided by A_n
    M = -b * law.mu_x                      # ln F_n - ln A_n before convexity
    V = (b * law.sigma_x) ** 2
    F = np.exp(M + 0.5 * V)
    sd = np.sqrt(V)
    pos = sd > 0
    legs = np.where(F > K_n, F - K_n, 0.0)
    if np.any(pos):
        d1 = (np.log(F[pos] / K_n[pos]) + 0.5 * V[pos]) / sd[pos]
        d2 = d1 - sd[pos]
        legs[pos] = F[pos] * ndtr(d1) - K_n[pos] * ndtr(d2)
    return float(surv * g * S0 * math.exp(-q * T) * (c @ legs))
