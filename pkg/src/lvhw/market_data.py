"""Market inputs: discount curve, mortality table and implied volatility smile.

All three containers are immutable. Array-valued queries are vectorised
with numpy; scalar inputs return Python floats.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InputDataError, OutOfRangeError

__all__ = [
    "YieldCurve",
    "MortalityTable",
    "ImpliedVolSurface",
    "discount",
    "inst_forward",
    "survival",
    "implied_vol",
    "read_curve_csv",
    "read_mortality_csv",
    "read_smile_csv",
]

_EDGE_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _scalar_or_array(value: np.ndarray, like) -> float | np.ndarray:
    return float(value) if np.ndim(like) == 0 else value


# --------------------------------------------------------------------------
# Yield curve
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class YieldCurve:
    """Zero-coupon discount curve with log-linear interpolation.

    The log discount factor is linear between pillars, so instantaneous
    forwards are piecewise constant and their maturity derivative is zero
    inside each interval. A pillar at maturity zero with discount factor one
    is added when absent.
    """

    maturities: np.ndarray
    discount_factors: np.ndarray
    _log_df: np.ndarray = field(init=False, repr=False, compare=False)
    _fwd: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.maturities, dtype=float).ravel()
        p = np.asarray(self.discount_factors, dtype=float).ravel()
        if t.shape != p.shape or t.size == 0:
            raise InputDataError("maturities and discount factors must be non-empty and of equal length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise InputDataError("curve pillars must be finite")
        if np.any(np.diff(t) <= 0) or t[0] < 0:
            raise InputDataError("curve maturities must be non-negative and strictly increasing")
        if t[0] == 0.0:
            if abs(p[0] - 1.0) > 1e-12:
                raise InputDataError("discount factor at maturity 0 must equal 1")
        else:
            t = np.concatenate(([0.0], t))
            p = np.concatenate(([1.0], p))
        if t.size < 2:
            raise InputDataError("curve needs at least one pillar beyond maturity 0")
        if np.any(p <= 0):
            raise InputDataError("discount factors must be strictly positive")
        if np.any(np.diff(p) > 0):
            raise InputDataError("discount factors must be non-increasing in maturity")
        log_df = np.log(p)
        object.__setattr__(self, "maturities", _frozen(t))
        object.__setattr__(self, "discount_factors", _frozen(p))
        object.__setattr__(self, "_log_df", _frozen(log_df))
        object.__setattr__(self, "_fwd", _frozen(-np.diff(log_df) / np.diff(t)))

    @classmethod
    def flat(cls, rate: float, max_maturity: float = 100.0, step: float = 1.0) -> "YieldCurve":
        """Curve with a constant continuously compounded rate."""
        t = np.arange(0.0, max_maturity + 0.5 * step, step)
        return cls(t, np.exp(-rate * t))

    @property
    def max_maturity(self) -> float:
        return float(self.maturities[-1])

    def _check(self, T, allow_end: bool = True) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        hi = self.max_maturity * (1 + _EDGE_TOL)
        bad = (T < 0) | (T > hi) | ~np.isfinite(T)
        if not allow_end:
            bad |= T >= hi
        if np.any(bad):
            raise OutOfRangeError(
                f"maturity outside curve range [0, {self.max_maturity:g}]: {T[bad].ravel()[:3]}")
        return T

    def discount(self, T):
        """P(0,T), exact at pillars."""
        T = self._check(T)
        out = np.exp(np.interp(T, self.maturities, self._log_df))
        return _scalar_or_array(out, T)

    def inst_forward(self, t):
        """Instantaneous forward f(0,t) and its maturity derivative.

        Forwards are right-continuous at pillars. The final pillar itself is
        accepted and takes the forward of the last interval. The derivative
        is zero everywhere under the log-linear rule.
        """
        t = self._check(t)
        idx = np.clip(np.searchsorted(self.maturities, t, side="right") - 1, 0, self._fwd.size - 1)
        f = self._fwd[idx]
        return _scalar_or_array(f, t), _scalar_or_array(np.zeros_like(f), t)

    def zero_rate(self, T):
        """Continuously compounded zero rate R(T), with R(0) = f(0,0)."""
        T = self._check(T)
        Tf = np.atleast_1d(T).astype(float)
        out = np.empty_like(Tf)
        small = Tf <= 0
        out[small] = self._fwd[0]
        out[~small] = -np.interp(Tf[~small], self.maturities, self._log_df) / Tf[~small]
        return _scalar_or_array(out.reshape(np.shape(T)), T)

    def short_rate(self) -> float:
        """r(0) = f(0,0)."""
        return float(self._fwd[0])


def discount(curve: YieldCurve, T):
    return curve.discount(T)


def inst_forward(curve: YieldCurve, t):
    return curve.inst_forward(t)


# --------------------------------------------------------------------------
# Mortality
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MortalityTable:
    """One-year survival probabilities indexed by integer age.

    ``one_year_survival[i]`` is the probability that a life aged
    ``base_age + i`` reaches ``base_age + i + 1``. ``omega`` is the largest
    attainable age: the first age whose one-year survival is zero, or one year
    past the last tabulated age when every entry is positive.
    """

    base_age: int
    one_year_survival: np.ndarray
    omega: int = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.one_year_survival, dtype=float).ravel()
        if p.size == 0:
            raise InputDataError("mortality table is empty")
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InputDataError("one-year survival probabilities must lie in [0, 1]")
        zeros = np.flatnonzero(p == 0.0)
        if zeros.size:
            last = int(zeros[0])
            p = p[: last + 1]
        else:
            last = p.size
            p = np.concatenate((p, [0.0]))
        object.__setattr__(self, "base_age", int(self.base_age))
        object.__setattr__(self, "one_year_survival", _frozen(p))
        object.__setattr__(self, "omega", int(self.base_age) + last)

    def survival(self, x: int, n: int) -> float:
        """n-year survival probability of a life aged x."""
        x, n = int(x), int(n)
        if x < self.base_age:
            raise OutOfRangeError(f"age {x} below table base age {self.base_age}")
        if n < 0:
            raise OutOfRangeError("survival horizon must be non-negative")
        if n == 0:
            return 1.0
        if x + n > self.omega:
            return 0.0
        i = x - self.base_age
        return float(np.prod(self.one_year_survival[i: i + n]))

    def survival_curve(self, x: int, n_max: int | None = None) -> np.ndarray:
        """Array of _n p_x for n = 0..n_max (default: up to omega - x)."""
        x = int(x)
        if x < self.base_age:
            raise OutOfRangeError(f"age {x} below table base age {self.base_age}")
        if n_max is None:
            n_max = max(self.omega - x, 0)
        out = np.zeros(n_max + 1)
        out[0] = 1.0
        i = x - self.base_age
        avail = self.one_year_survival[i: i + n_max]
        out[1: avail.size + 1] = np.cumprod(avail)
        return out

    @classmethod
    def gompertz(cls, base_age: int = 20, omega: int = 120, a: float = 2.0e-5,
                 c: float = 0.1) -> "MortalityTable":
        """Synthetic table with force of mortality a*exp(c*age)."""
        ages = np.arange(base_age, omega + 1)
        mu = a * (np.exp(c * (ages + 1)) - np.exp(c * ages)) / c
        p = np.exp(-mu)
        p[-1] = 0.0
        return cls(base_age, p)


def survival(table: MortalityTable, x: int, n: int) -> float:
    return table.survival(x, n)


# --------------------------------------------------------------------------
# Implied volatility
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VolQuote:
    vol: float | np.ndarray
    dK: float | np.ndarray
    dKK: float | np.ndarray
    dT: float | np.ndarray


@dataclass(frozen=True)
class ImpliedVolSurface:
    """Reference smile plus a constant maturity slope.

    sigma(K, T) = smile(K) + maturity_slope * (T - reference_maturity).

    Inside the quoted strikes the smile is a natural cubic spline. Outside,
    ``tail="smooth"`` (default) continues it as
    ``v_end + s_end * L * tanh((K - K_end) / L)``, which matches the spline's
    value, slope and (zero) curvature at the end point and levels off after a
    distance of order ``L``. ``tail="flat"`` holds the end value constant;
    that form has a slope discontinuity at the last quote whenever the
    spline's end slope is non-zero.
    """

    reference_maturity: float
    strikes: np.ndarray
    vols: np.ndarray
    maturity_slope: float = 0.0
    tail: str = "smooth"
    tail_length: float | None = None
    _spline: CubicSpline | None = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.asarray(self.strikes, dtype=float).ravel()
        v = np.asarray(self.vols, dtype=float).ravel()
        if K.shape != v.shape or K.size == 0:
            raise InputDataError("smile strikes and vols must be non-empty and of equal length")
        if np.any(np.diff(K) <= 0) or np.any(K <= 0):
            raise InputDataError("smile strikes must be positive and strictly increasing")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise InputDataError("smile vols must be positive and finite")
        if self.reference_maturity <= 0:
            raise InputDataError("reference maturity must be positive")
        if self.tail not in ("smooth", "flat"):
            raise InputDataError(f"unknown smile tail rule {self.tail!r}")
        spline = CubicSpline(K, v, bc_type="natural") if K.size >= 2 else None
        L = self.tail_length
        if L is None:
            L = 0.5 * (K[-1] - K[0]) if K.size >= 2 else 1.0
        if L <= 0:
            raise InputDataError("tail length must be positive")
        object.__setattr__(self, "strikes", _frozen(K))
        object.__setattr__(self, "vols", _frozen(v))
        object.__setattr__(self, "tail_length", float(L))
        object.__setattr__(self, "_spline", spline)

    @classmethod
    def flat(cls, vol: float, reference_maturity: float = 10.0,
             maturity_slope: float = 0.0) -> "ImpliedVolSurface":
        return cls(reference_maturity, [1.0], [vol], maturity_slope)

    def with_slope(self, maturity_slope: float) -> "ImpliedVolSurface":
        return ImpliedVolSurface(self.reference_maturity, self.strikes, self.vols,
                                 maturity_slope, self.tail, self.tail_length)

    def _smile(self, K: np.ndarray):
        if self._spline is None:
            c = np.full_like(K, self.vols[0])
            z = np.zeros_like(K)
            return c, z, z
        k0, k1 = self.strikes[0], self.strikes[-1]
        inside = (K >= k0) & (K <= k1)
        v = np.empty_like(K)
        d1 = np.empty_like(K)
        d2 = np.empty_like(K)
        sp = self._spline
        v[inside] = sp(K[inside])
        d1[inside] = sp(K[inside], 1)
        d2[inside] = sp(K[inside], 2)
        for mask, edge in ((K < k0, k0), (K > k1, k1)):
            if not np.any(mask):
                continue
            v_e = float(sp(edge))
            if self.tail == "flat":
                v[mask], d1[mask], d2[mask] = v_e, 0.0, 0.0
                continue
            s_e = float(sp(edge, 1))
            L = self.tail_length
            th = np.tanh((K[mask] - edge) / L)
            v[mask] = v_e + s_e * L * th
            d1[mask] = s_e * (1.0 - th**2)
            d2[mask] = -2.0 * s_e * th * (1.0 - th**2) / L
        return v, d1, d2

    def quote(self, K, T) -> VolQuote:
        """Implied vol and its derivatives dσ/dK, d²σ/dK², dσ/dT."""
        T_arr = np.asarray(T, dtype=float)
        if np.any(T_arr <= 0):
            raise OutOfRangeError("implied vol maturity must be positive")
        K_arr = np.asarray(K, dtype=float)
        if np.any(K_arr <= 0):
            raise OutOfRangeError("strike must be positive")
        Kb, Tb = np.broadcast_arrays(K_arr, T_arr)
        v, d1, d2 = self._smile(Kb.astype(float).ravel())
        v = v.reshape(Kb.shape) + self.maturity_slope * (Tb - self.reference_maturity)
        if np.any(v <= 0):
            raise OutOfRangeError("implied vol is non-positive at the requested (K, T)")
        d1 = d1.reshape(Kb.shape)
        d2 = d2.reshape(Kb.shape)
        dT = np.full(Kb.shape, float(self.maturity_slope))
        scalar = Kb.ndim == 0
        if scalar:
            return VolQuote(float(v), float(d1), float(d2), float(dT))
        return VolQuote(v, d1, d2, dT)

    def vol(self, K, T):
        return self.quote(K, T).vol


def implied_vol(surface: ImpliedVolSurface, K, T) -> VolQuote:
    return surface.quote(K, T)


# --------------------------------------------------------------------------
# CSV readers and writers
# --------------------------------------------------------------------------


def _read_columns(path: str | Path, names: Sequence[str]) -> list[np.ndarray]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise InputDataError(f"{path}: missing header row")
            header = [h.strip() for h in reader.fieldnames]
            missing = [n for n in names if n not in header]
            if missing:
                raise InputDataError(f"{path}: missing column(s) {missing}; found {header}")
            cols: list[list[float]] = [[] for _ in names]
            for lineno, row in enumerate(reader, start=2):
                row = {k.strip(): v for k, v in row.items() if k is not None}
                try:
                    for c, n in zip(cols, names):
                        c.append(float(row[n]))
                except (TypeError, ValueError) as exc:
                    raise InputDataError(f"{path}:{lineno}: cannot parse number ({exc})") from None
    except OSError as exc:
        raise InputDataError(f"{path}: {exc.strerror or exc}") from None
    if not cols[0]:
        raise InputDataError(f"{path}: no data rows")
    return [np.array(c) for c in cols]


def read_curve_csv(path: str | Path) -> YieldCurve:
    t, p = _read_columns(path, ("maturity_years", "discount_factor"))
    return YieldCurve(t, p)


def read_mortality_csv(path: str | Path) -> MortalityTable:
    age, p = _read_columns(path, ("age", "p"))
    if np.any(age != np.round(age)) or np.any(np.diff(age) != 1):
        raise InputDataError(f"{path}: ages must be consecutive integers")
    return MortalityTable(int(age[0]), p)


def read_smile_csv(path: str | Path, reference_maturity: float = 10.0,
                   maturity_slope: float = 0.0, tail: str = "smooth") -> ImpliedVolSurface:
    K, v = _read_columns(path, ("strike", "vol"))
    order = np.argsort(K)
    return ImpliedVolSurface(reference_maturity, K[order], v[order], maturity_slope, tail)


def write_curve_csv(curve: YieldCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["maturity_years", "discount_factor"])
        for t, p in zip(curve.maturities, curve.discount_factors):
            w.writerow([repr(float(t)), repr(float(p))])


def write_mortality_csv(table: MortalityTable, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age", "p"])
        for i, p in enumerate(table.one_year_survival):
            w.writerow([table.base_age + i, repr(float(p))])
