"""Local volatility surfaces consistent with a quoted implied volatility smile.

Three constructions are provided:

* the deterministic-rate Dupire surface, written in implied-vol form;
* the stochastic-rate surface, which needs the forward-measure expectation
  E[r(T) 1{S(T) > K}] and is bootstrapped slice by slice with Monte Carlo;
* the Schobel-Zhu mimicking volatility sqrt(E[nu(t)^2 | S(t) = K]), either
  in closed form (spot-vol independence) or by kernel regression on paths.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from .closed_form import SZParams, bshw_rate_digital
from .errors import ArbitrageError, CalibrationError, InputDataError, SparseDataError
from .hw_rates import HWParams, xbar
from .market_data import ImpliedVolSurface, YieldCurve
from .mc_engine import SimConfig, simulate_qt

__all__ = [
    "LocalVolSurface",
    "CalibrationGrid",
    "dupire_deterministic",
    "dupire_surface",
    "lv_from_expectation",
    "market_digital",
    "call_curvature",
    "calibrate_mc",
    "lv_difference_adjustment",
    "mimic_sz_closed_form",
    "mimic_sz_conditional",
    "silverman_bandwidth",
]

log = logging.getLogger(__name__)

RATE_CONVENTIONS = ("printed", "curve")
DIGITAL_ESTIMATORS = ("market", "simulated")


# --------------------------------------------------------------------------
# Surface container
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalVolSurface:
    """Node values sigma(T_i, K_j), bilinear inside the grid and flat outside."""

    maturities: np.ndarray
    strikes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        T = np.array(self.maturities, dtype=float).ravel()
        K = np.array(self.strikes, dtype=float).ravel()
        v = np.array(self.values, dtype=float).reshape(T.size, K.size)
        if T.size == 0 or K.size == 0:
            raise InputDataError("local volatility grid is empty")
        if np.any(np.diff(T) <= 0) or np.any(np.diff(K) <= 0):
            raise InputDataError("local volatility grid axes must be strictly increasing")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InputDataError("local volatility values must be non-negative and finite")
        for a in (T, K, v):
            a.setflags(write=False)
        object.__setattr__(self, "maturities", T)
        object.__setattr__(self, "strikes", K)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, sigma: float, horizon: float = math.inf) -> "LocalVolSurface":
        return cls([horizon], [1.0], [[sigma]])

    def rows(self, times) -> np.ndarray:
        """Strike slices interpolated linearly in time, flat outside the grid."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        T = self.maturities
        if T.size == 1:
            return np.repeat(self.values, t.size, axis=0)
        tc = np.clip(t, T[0], T[-1])
        i = np.clip(np.searchsorted(T, tc, side="right") - 1, 0, T.size - 2)
        w = ((tc - T[i]) / (T[i + 1] - T[i]))[:, None]
        return (1 - w) * self.values[i] + w * self.values[i + 1]

    def __call__(self, t, S):
        t = np.asarray(t, dtype=float)
        S = np.asarray(S, dtype=float)
        tb, Sb = np.broadcast_arrays(t, S)
        rows = self.rows(tb.ravel())
        K = self.strikes
        s = np.clip(Sb.ravel(), K[0], K[-1])
        if K.size == 1:
            out = rows[:, 0]
        else:
            j = np.clip(np.searchsorted(K, s, side="right") - 1, 0, K.size - 2)
            w = (s - K[j]) / (K[j + 1] - K[j])
            idx = np.arange(s.size)
            out = (1 - w) * rows[idx, j] + w * rows[idx, j + 1]
        out = out.reshape(tb.shape)
        return float(out) if out.ndim == 0 else out

    def head(self, n_slices: int) -> "LocalVolSurface":
        return LocalVolSurface(self.maturities[:n_slices], self.strikes, self.values[:n_slices])

    def to_csv(self, path: str | Path) -> None:
        """Header row of strikes, first column maturities, body sigma values."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["maturity"] + [repr(float(k)) for k in self.strikes])
            for T, row in zip(self.maturities, self.values):
                w.writerow([repr(float(T))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LocalVolSurface":
        try:
            with Path(path).open(newline="") as fh:
                rows = [r for r in csv.reader(fh) if r]
            K = [float(k) for k in rows[0][1:]]
            T = [float(r[0]) for r in rows[1:]]
            v = [[float(x) for x in r[1:]] for r in rows[1:]]
        except (OSError, ValueError, IndexError) as exc:
            raise InputDataError(f"{path}: cannot read local volatility surface ({exc})") from None
        return cls(T, K, v)


@dataclass(frozen=True)
class CalibrationGrid:
    maturities: np.ndarray
    strikes: np.ndarray

    @classmethod
    def default(cls, S0: float = 100.0, horizon: float = 10.0, maturity_step: float = 0.5,
                n_strikes: int = 421, lo: float = 0.4, hi: float = 2.5) -> "CalibrationGrid":
        n = int(round(horizon / maturity_step))
        return cls(maturity_step * np.arange(1, n + 1), S0 * np.linspace(lo, hi, n_strikes))


# --------------------------------------------------------------------------
# Implied-vol form of the local volatility
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Terms:
    sigma: np.ndarray
    dK: np.ndarray
    dKK: np.ndarray
    dT: np.ndarray
    d_plus: np.ndarray
    d_minus: np.ndarray
    vega: np.ndarray
    denominator: np.ndarray   # 0.5 K^2 d2C/dK2


def _terms(surface: ImpliedVolSurface, S0: float, K, T: float, r_disc: float, q: float) -> _Terms:
    K = np.atleast_1d(np.asarray(K, dtype=float))
    quote = surface.quote(K, T)
    s, sK, sKK, sT = (np.atleast_1d(np.asarray(a, dtype=float)) for a in
                      (quote.vol, quote.dK, quote.dKK, quote.dT))
    sqT = math.sqrt(T)
    d_plus = (np.log(S0 / K) + (r_disc - q + 0.5 * s * s) * T) / (s * sqT)
    d_minus = d_plus - s * sqT
    vega = math.exp(-q * T) * S0 * norm.pdf(d_plus) * sqT
    bracket = (1.0 / (s * K * K * T) + 2.0 * d_plus * sK / (s * K * sqT) + sKK
               + d_plus * d_minus * sK * sK / s)
    return _Terms(s, sK, sKK, sT, d_plus, d_minus, vega, 0.5 * K * K * vega * bracket)


def _rates(curve: YieldCurve | None, T: float, r: float | None, convention: str):
    """(rate used in d+/d- and BS discounting, rate multiplying the digital)."""
    if convention not in RATE_CONVENTIONS:
        raise InputDataError(f"unknown rate convention {convention!r}")
    if convention == "curve":
        if curve is None:
            raise InputDataError("the curve convention needs a yield curve")
        return float(curve.zero_rate(T)), float(curve.inst_forward(T)[0])
    r0 = curve.short_rate() if r is None else float(r)
    return r0, r0


def _check_denominator(den: np.ndarray, K: np.ndarray, T: float) -> None:
    bad = ~(den > 0)
    if np.any(bad):
        k = float(K[np.flatnonzero(bad)[0]])
        raise ArbitrageError(f"non-positive call curvature at K={k:g}, T={T:g}", K=k, T=T)


def _ret(v: np.ndarray, K):
    return float(v[0]) if np.ndim(K) == 0 else v


def dupire_deterministic(surface: ImpliedVolSurface, r: float, q: float, S0: float, K, T: float,
                         r_drift: float | None = None):
    """Dupire local volatility for a deterministic short rate.

    ``r`` enters d+/d- and the discounting; ``r_drift`` (default ``r``) is
    the rate multiplying K dsigma/dK, which differs from ``r`` only when the
    smile is read against a non-flat curve.
    """
    if not T > 0:
        raise InputDataError("maturity must be positive")
    Ka = np.atleast_1d(np.asarray(K, dtype=float))
    t = _terms(surface, S0, Ka, T, r, q)
    rd = r if r_drift is None else r_drift
    num = t.vega * (t.sigma / (2 * T) + t.dT + (rd - q) * Ka * t.dK)
    _check_denominator(t.denominator, Ka, T)
    rad = num / t.denominator
    if np.any(~(rad > 0)):
        k = float(Ka[np.flatnonzero(~(rad > 0))[0]])
        raise ArbitrageError(f"non-positive Dupire numerator at K={k:g}, T={T:g}", K=k, T=T)
    return _ret(np.sqrt(rad), K)


def market_digital(surface: ImpliedVolSurface, curve: YieldCurve, q: float, S0: float, K, T: float,
                   rate_convention: str = "printed"):
    """Forward-measure probability Q_T(S(T) > K) implied by the smile: -dC/dK / P(0,T)."""
    Ka = np.atleast_1d(np.asarray(K, dtype=float))
    r_disc, _ = _rates(curve, T, None, rate_convention)
    t = _terms(surface, S0, Ka, T, r_disc, q)
    dCdK = -math.exp(-r_disc * T) * ndtr(t.d_minus) + t.vega * t.dK
    return _ret(-dCdK / curve.discount(T), K)


def call_curvature(surface: ImpliedVolSurface, curve: YieldCurve, q: float, S0: float, K, T: float,
                   rate_convention: str = "printed"):
    """d2C/dK2 of the smile-implied call prices."""
    Ka = np.atleast_1d(np.asarray(K, dtype=float))
    r_disc, _ = _rates(curve, T, None, rate_convention)
    t = _terms(surface, S0, Ka, T, r_disc, q)
    return _ret(t.denominator / (0.5 * Ka * Ka), K)


def lv_from_expectation(surface: ImpliedVolSurface, curve: YieldCurve, q: float, S0: float, K, T: float,
                        E_r_indicator, rate_convention: str = "printed"):
    """Local volatility with stochastic rates, given E^{Q_T}[r(T) 1{S(T)>K}].

    The numerator is
    Vega (sigma/2T + dsigma/dT - q K dsigma/dK) + K r e^{-rT} N(d-) - K P(0,T) E,
    with r = r(0) in the ``printed`` convention. In the ``curve`` convention
    d+/d- use the zero rate R(T) and the middle term becomes
    K f(0,T) P(0,T) N(d-), which reduces exactly to the Dupire value for any
    deterministic curve.
    """
    if not T > 0:
        raise InputDataError("maturity must be positive")
    Ka = np.atleast_1d(np.asarray(K, dtype=float))
    E = np.broadcast_to(np.asarray(E_r_indicator, dtype=float), Ka.shape)
    if not np.all(np.isfinite(E)):
        raise CalibrationError("non-finite expectation input", T=T)
    r_disc, r_drift = _rates(curve, T, None, rate_convention)
    t = _terms(surface, S0, Ka, T, r_disc, q)
    P = curve.discount(T)
    num = (t.vega * (t.sigma / (2 * T) + t.dT - q * Ka * t.dK)
           + Ka * r_drift * math.exp(-r_disc * T) * ndtr(t.d_minus)
           - Ka * P * E)
    _check_denominator(t.denominator, Ka, T)
    rad = num / t.denominator
    bad = ~(rad > 0)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise CalibrationError(
            f"non-positive local variance {rad[j]:.3e} at K={Ka[j]:g}, T={T:g}",
            K=float(Ka[j]), T=T, radicand=float(rad[j]))
    return _ret(np.sqrt(rad), K)


def lv_difference_adjustment(sigma_1f, cov, curve: YieldCurve, K, T: float, d2C_dK2):
    """Stochastic-rate local vol from the Dupire value and Cov^{Q_T}[r(T), 1{S(T)>K}].

    sigma_2f^2 = sigma_1f^2 - P(0,T) Cov / (K d2C/dK2 / 2).
    """
    s1, c, Kk, ckk = (np.asarray(a, dtype=float) for a in (sigma_1f, cov, K, d2C_dK2))
    if np.any(~(ckk > 0)):
        raise ArbitrageError("call curvature must be positive", T=T)
    rad = s1 * s1 - curve.discount(T) * c / (0.5 * Kk * ckk)
    if np.any(~(rad > 0)):
        raise CalibrationError("adjusted local variance is non-positive", T=T,
                               radicand=float(np.min(rad)))
    out = np.sqrt(rad)
    return float(out) if out.ndim == 0 else out


def dupire_surface(surface: ImpliedVolSurface, curve: YieldCurve, q: float, S0: float,
                   grid: CalibrationGrid, rate_convention: str = "printed") -> LocalVolSurface:
    vals = np.empty((grid.maturities.size, grid.strikes.size))
    for i, T in enumerate(grid.maturities):
        r_disc, r_drift = _rates(curve, T, None, rate_convention)
        vals[i] = dupire_deterministic(surface, r_disc, q, S0, grid.strikes, T, r_drift=r_drift)
    return LocalVolSurface(grid.maturities, grid.strikes, vals)


# --------------------------------------------------------------------------
# Monte Carlo bootstrap
# --------------------------------------------------------------------------


def _tail_sums(S_T: np.ndarray, vals: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Sums of ``vals`` over the paths with S_T > K, for every strike, via one
    sort and a suffix sum."""
    order = np.argsort(S_T, kind="stable")
    tail = np.concatenate((np.cumsum(vals[order][::-1])[::-1], [0.0]))
    return tail[np.searchsorted(S_T[order], K, side="right")]


def _expectation(r_T: np.ndarray, S_T: np.ndarray, K: np.ndarray, f_T: float,
                 digital: np.ndarray | None, control: tuple | None = None) -> np.ndarray:
    """Estimate E[r(T) 1{S(T) > K}] on the grid strikes.

    The term E[(r - f) 1{S > K}] is a path average, optionally corrected by
    a regression control variate ``control = (S_c, mean_c)``: the same
    statistic on constant-vol paths sharing the rate paths, whose exact mean
    is ``mean_c``. The remaining f Q_T(S > K) uses ``digital`` when given and
    the simulated frequency otherwise.
    """
    n = r_T.size
    u = r_T - f_T
    E = _tail_sums(S_T, u, K) / n
    if control is not None:
        S_c, mean_c = control
        Ec = _tail_sums(S_c, u, K) / n
        cc = _tail_sums(S_c, u * u, K) / n - Ec * Ec
        yc = np.empty(K.size)
        for lo in range(0, K.size, 64):
            k = K[lo:lo + 64]
            both = (S_T[:, None] > k) & (S_c[:, None] > k)
            yc[lo:lo + 64] = (u * u) @ both / n
        yc -= E * Ec
        beta = np.divide(yc, cc, out=np.zeros(K.size), where=cc > 0)
        E = E - beta * (Ec - mean_c)
    if digital is None:
        digital = _tail_sums(S_T, np.ones(n), K) / n
    return E + f_T * digital


def _repair(row: np.ndarray, ok: np.ndarray) -> np.ndarray:
    good = np.flatnonzero(ok)
    out = row.copy()
    for j in np.flatnonzero(~ok):
        nearest = good[np.argmin(np.abs(good - j))]
        out[j] = row[nearest]
    return out


def calibrate_mc(params: HWParams, surface: ImpliedVolSurface, curve: YieldCurve, q: float, S0: float,
                 sim: SimConfig, grid: CalibrationGrid | None = None,
                 rate_convention: str = "printed", digital: str = "market",
                 control_variate: bool = True,
                 diagnostics: list | None = None) -> LocalVolSurface:
    """Forward-in-time bootstrap of the stochastic-rate local volatility.

    The first slice is the Dupire surface. For each later maturity T_i all
    paths are simulated from 0 under Q_{T_i}, using the slices already built
    (held flat beyond the last one), and E[r(T_i) 1{S(T_i) > K_j}] is
    estimated on the grid strikes.

    ``digital="simulated"`` estimates the expectation as the plain path
    average of r 1{S>K}. ``digital="market"`` (default) writes it as
    E[(r - f(0,T)) 1{S>K}] + f(0,T) Q_T(S>K) and takes the probability from
    the smile, since E^{Q_T}[r(T)] = f(0,T) exactly and a calibrated model
    reproduces the market digital. Only the first term is then simulated,
    which removes the dominant sampling noise.

    With ``control_variate`` (default) each slice also simulates
    constant-vol paths from the same random numbers, at the smile's spot vol
    for that maturity, and uses their E[(r - f) 1{S>K}], known in closed
    form, as a regression control. This doubles the simulation cost and
    cuts the remaining noise several times over.

    The step size is ``sim.horizon / sim.n_steps`` and every slice uses the
    same seed. Nodes whose local variance comes out non-positive copy the
    nearest valid node of the same slice; a slice with more than half its
    nodes failing aborts the bootstrap.
    """
    if digital not in DIGITAL_ESTIMATORS:
        raise InputDataError(f"unknown digital estimator {digital!r}")
    if grid is None:
        grid = CalibrationGrid.default(S0, sim.horizon)
    mats, K = np.asarray(grid.maturities, float), np.asarray(grid.strikes, float)
    if mats[-1] > curve.max_maturity:
        raise CalibrationError("calibration grid extends beyond the yield curve")
    dt = sim.horizon / sim.n_steps
    vals = np.empty((mats.size, K.size))
    r_disc, r_drift = _rates(curve, mats[0], None, rate_convention)
    vals[0] = dupire_deterministic(surface, r_disc, q, S0, K, mats[0], r_drift=r_drift)
    for i in range(1, mats.size):
        T = float(mats[i])
        partial = LocalVolSurface(mats[:i], K, vals[:i])
        n_steps = max(1, int(round(T / dt)))
        cfg = SimConfig(sim.n_paths, n_steps, sim.seed, "QT", T)
        batch = simulate_qt(params, partial, curve, q, S0, cfg, allow_time_extrapolation=True)
        f_T = float(curve.inst_forward(T)[0])
        r_T = batch.x_T + float(xbar(params, curve, T))
        dig = market_digital(surface, curve, q, S0, K, T, rate_convention) if digital == "market" else None
        control = None
        if control_variate:
            vc = float(surface.quote(S0, T).vol)
            twin = simulate_qt(params, LocalVolSurface.constant(vc), curve, q, S0, cfg)
            control = (twin.S_T, bshw_rate_digital(params, curve, S0, K, T, vc, q))
        E = _expectation(r_T, batch.S_T, K, f_T, dig, control)
        row = np.empty(K.size)
        ok = np.ones(K.size, dtype=bool)
        first_err: CalibrationError | None = None
        for j in range(K.size):
            try:
                row[j] = lv_from_expectation(surface, curve, q, S0, float(K[j]), T, float(E[j]),
                                             rate_convention)
            except CalibrationError as exc:
                ok[j] = False
                first_err = first_err or exc
        if not ok.all():
            if ok.sum() * 2 < K.size:
                raise CalibrationError(
                    f"slice {i + 1} (T={T:g}): {np.count_nonzero(~ok)} of {K.size} nodes failed; "
                    f"first at K={first_err.K:g}: {first_err}",
                    K=first_err.K, T=T, radicand=first_err.radicand, slice_index=i + 1)
            for j in np.flatnonzero(~ok):
                log.warning("repaired local vol node T=%g K=%g from its nearest valid neighbour", T, K[j])
                if diagnostics is not None:
                    diagnostics.append({"event": "repair", "slice": i + 1, "T": T, "K": float(K[j])})
            row = _repair(row, ok)
        vals[i] = row
    return LocalVolSurface(mats, K, vals)


# --------------------------------------------------------------------------
# Mimicking stochastic volatility
# --------------------------------------------------------------------------


def mimic_sz_closed_form(params: HWParams, sz: SZParams, T: float) -> float:
    """sqrt(E^{Q_T}[nu(T)^2]) for Schobel-Zhu volatility, independent of strike."""
    k, a = sz.kappa, params.alpha
    c = sz.rho_rnu * params.sigma_r * sz.tau
    mean = (sz.nu0 * math.exp(-k * T) + (sz.psi - c / (a * k)) * (-math.expm1(-k * T))
            + c / (a * (a + k)) * (-math.expm1(-(a + k) * T)))
    var = sz.tau**2 / (2 * k) * (-math.expm1(-2 * k * T))
    return math.sqrt(mean * mean + var)


def silverman_bandwidth(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=float)
    sd = np.std(z, ddof=1)
    iqr = np.subtract(*np.percentile(z, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * z.size ** (-0.2)


def mimic_sz_conditional(S_t, nu_t, K, bandwidth: float | None = None,
                         min_effective: float = 50.0):
    """Kernel estimate of sqrt(E[nu(t)^2 | S(t) = K]).

    Gaussian kernel in log S with Silverman's bandwidth unless one is given.
    Raises when the effective number of paths near K is below
    ``min_effective``.
    """
    z = np.log(np.asarray(S_t, dtype=float))
    v2 = np.asarray(nu_t, dtype=float) ** 2
    if z.shape != v2.shape:
        raise InputDataError("S and nu samples must have the same shape")
    h = silverman_bandwidth(z) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise InputDataError("bandwidth must be positive")
    Ks = np.atleast_1d(np.asarray(K, dtype=float))
    out = np.empty(Ks.size)
    for j, k in enumerate(np.log(Ks)):
        w = np.exp(-0.5 * ((z - k) / h) ** 2)
        sw = w.sum()
        eff = sw * sw / np.dot(w, w) if sw > 0 else 0.0
        if eff < min_effective:
            raise SparseDataError(f"only {eff:.1f} effective paths near K={math.exp(k):g}")
        out[j] = math.sqrt(np.dot(w, v2) / sw)
    return float(out[0]) if np.ndim(K) == 0 else out
