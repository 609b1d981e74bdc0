"""Euler simulation of fund value and Hull-White rate factor.

Two pricing measures are supported: the T-forward measure, whose numeraire
is the zero-coupon bond maturing at T, and the equity measure, whose
numeraire is the fund with dividends reinvested. The fund is stepped in log
space, the rate factor x with a plain Euler step, and the local volatility
is read at the left end of each step.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import _kernels
from .errors import ConfigurationError, CoverageError
from .hw_rates import HWParams, b_factor, xbar
from .market_data import YieldCurve

if TYPE_CHECKING:  # pragma: no cover
    from .closed_form import SZParams
    from .local_vol import LocalVolSurface

__all__ = [
    "SimConfig",
    "PathBatch",
    "PricingResult",
    "simulate_qt",
    "simulate_qs",
    "simulate_sz",
    "estimate",
    "write_path_dump",
    "read_path_dump",
    "thread_count",
]

THREADS_ENV = "LVHW_THREADS"
MEASURES = ("QT", "QS")


def thread_count() -> int:
    """Worker threads requested through ``LVHW_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be at least 1")
    return n


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    ``target_T`` is the maturity of the forward measure's numeraire bond and
    defaults to ``horizon``. ``barriers`` lists the rate-factor levels for
    which per-path survival weights are accumulated (equity measure only).
    """

    n_paths: int
    n_steps: int
    seed: int = 20240101
    measure: str = "QT"
    horizon: float = 10.0
    target_T: float | None = None
    barriers: tuple[float, ...] = ()
    store_paths: bool = False

    def __post_init__(self):
        if int(self.n_paths) < 2:
            raise ConfigurationError("n_paths must be at least 2")
        if int(self.n_steps) < 1:
            raise ConfigurationError("n_steps must be at least 1")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        if self.measure not in MEASURES:
            raise ConfigurationError(f"measure must be one of {MEASURES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 unsigned bits")
        object.__setattr__(self, "n_paths", int(self.n_paths))
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "barriers", tuple(float(b) for b in self.barriers))
        if self.barriers and self.measure != "QS":
            raise ConfigurationError("barrier weights are only available under the equity measure")
        if self.target_T is not None and abs(self.target_T - self.horizon) > 1e-12:
            raise ConfigurationError("forward-measure target maturity must equal the horizon")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def replace(self, **changes) -> "SimConfig":
        fields = dict(n_paths=self.n_paths, n_steps=self.n_steps, seed=self.seed,
                      measure=self.measure, horizon=self.horizon, target_T=self.target_T,
                      barriers=self.barriers, store_paths=self.store_paths)
        fields.update(changes)
        return SimConfig(**fields)

    def anniversary_steps(self) -> np.ndarray:
        """Step indices of integer-year dates 1..floor(horizon)."""
        years = np.arange(1, int(math.floor(self.horizon + 1e-9)) + 1)
        raw = years * self.n_steps / self.horizon
        idx = np.rint(raw).astype(np.int64)
        if np.any(np.abs(raw - idx) > 1e-9):
            raise ConfigurationError(
                f"integer years are not grid points: n_steps={self.n_steps} horizon={self.horizon}")
        return idx


@dataclass(frozen=True)
class PathBatch:
    """Simulation output.

    Terminal values and path functionals are always kept. Full matrices
    ``S``, ``x`` and ``nu`` (shape n_paths x (n_steps+1)) are only present
    when the configuration asks for them.
    """

    config: SimConfig
    S0: float
    times: np.ndarray
    S_T: np.ndarray
    x_T: np.ndarray
    x_min: np.ndarray
    anniversary_times: np.ndarray
    S_anniv: np.ndarray
    weights: np.ndarray
    nu_T: np.ndarray | None = None
    S: np.ndarray | None = None
    x: np.ndarray | None = None
    nu: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.config.n_paths

    @property
    def horizon(self) -> float:
        return self.config.horizon

    def weight(self, barrier: float) -> np.ndarray:
        try:
            j = self.config.barriers.index(float(barrier))
        except ValueError:
            raise ConfigurationError(f"barrier {barrier} was not simulated") from None
        return self.weights[j]


@dataclass(frozen=True)
class PricingResult:
    value: float
    std_error: float
    n_paths: int
    seed: int
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("standard error must be non-negative")

    def scaled(self, factor: float) -> "PricingResult":
        s = None if self.samples is None else self.samples * factor
        return PricingResult(self.value * factor, self.std_error * abs(factor), self.n_paths, self.seed, s)


def estimate(payoff, seed: int = 0, keep_samples: bool = False) -> PricingResult:
    """Sample mean and standard error sd/sqrt(n) of per-path payoffs."""
    y = np.asarray(payoff, dtype=float).ravel()
    n = y.size
    if n < 2:
        raise ConfigurationError("at least two samples are needed for a standard error")
    mean = float(np.mean(y))
    se = float(np.std(y, ddof=1) / math.sqrt(n))
    return PricingResult(mean, se, n, int(seed), y if keep_samples else None)


def _chol(rho_sr: float, rho_snu: float = 0.0, rho_rnu: float = 0.0) -> np.ndarray:
    corr = np.array([[1.0, rho_sr, rho_snu], [rho_sr, 1.0, rho_rnu], [rho_snu, rho_rnu, 1.0]])
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        # allow the semidefinite boundary (e.g. |rho| = 1)
        w, v = np.linalg.eigh(corr)
        if w.min() < -1e-12:
            raise ConfigurationError("correlation matrix is not positive semidefinite") from None
        c = v @ np.diag(np.sqrt(np.clip(w, 0, None)))
        q, r = np.linalg.qr(c.T)
        L = r.T
        L *= np.sign(np.diag(L))[None, :] + (np.diag(L) == 0)[None, :]
        return L


def _run(params: HWParams, curve: YieldCurve, q: float, S0: float, cfg: SimConfig,
         strikes: np.ndarray, vol_rows: np.ndarray, sz: "SZParams | None") -> PathBatch:
    n, m = cfg.n_paths, cfg.n_steps
    dt = cfg.dt
    times = np.linspace(0.0, cfg.horizon, m + 1)
    if cfg.horizon > curve.max_maturity + 1e-12:
        raise CoverageError(f"curve ends at {curve.max_maturity} before the horizon {cfg.horizon}")
    xbar_k = np.asarray(xbar(params, curve, times[:-1]), dtype=float)
    measure_qs = cfg.measure == "QS"
    b_k = np.zeros(m) if measure_qs else np.asarray(b_factor(params, times[:-1], cfg.horizon), dtype=float)
    try:
        anniv = cfg.anniversary_steps()
    except ConfigurationError:
        anniv = np.zeros(0, dtype=np.int64)
        anniv_ok = False
    else:
        anniv_ok = True
    barriers = np.asarray(cfg.barriers, dtype=float)
    if np.any(barriers >= 0):
        raise ConfigurationError("barrier levels must be negative (x starts at 0)")
    a, sr = params.alpha, params.sigma_r
    surv_mu_coef = params.rho_sr * sr / a * (-math.expm1(-a * dt))
    surv_sd = math.sqrt(sr * sr / (2 * a) * (-math.expm1(-2 * a * dt)))
    if sz is None:
        chol = _chol(params.rho_sr)
        kappa = psi = tau = rho_snu = rho_rnu = 0.0
        nu0 = 0.0
    else:
        chol = _chol(params.rho_sr, sz.rho_snu, sz.rho_rnu)
        kappa, psi, tau, nu0 = sz.kappa, sz.psi, sz.tau, sz.nu0
        rho_snu, rho_rnu = sz.rho_snu, sz.rho_rnu
    store = bool(cfg.store_paths)
    shape_full = (n, m + 1) if store else (0, 0)
    out_lnS = np.empty(n)
    out_x = np.empty(n)
    out_xmin = np.empty(n)
    out_nu = np.empty(n)
    out_anniv = np.empty((n, anniv.size))
    out_w = np.empty((barriers.size, n))
    S_full = np.empty(shape_full)
    x_full = np.empty(shape_full)
    nu_full = np.empty(shape_full if sz is not None else (0, 0))
    threads = thread_count()
    if threads > 1:
        import numba
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        kernel = _kernels.simulate_parallel
    else:
        kernel = _kernels.simulate_serial
    kernel(np.uint64(cfg.seed), n, m, dt, measure_qs, sz is not None, math.log(S0), float(q),
           np.ascontiguousarray(strikes, dtype=float), np.ascontiguousarray(vol_rows, dtype=float),
           xbar_k, b_k, a, sr, chol, kappa, psi, tau, nu0, rho_snu, rho_rnu,
           anniv, barriers, surv_mu_coef, surv_sd, store,
           out_lnS, out_x, out_xmin, out_nu, out_anniv, out_w, S_full, x_full, nu_full)
    if store:
        S_full[:, 0] = S0  # exact, rather than exp(log(S0))
    for arr in (out_lnS, out_x, out_xmin, out_nu, out_anniv, out_w, S_full, x_full, nu_full):
        arr.setflags(write=False)
    return PathBatch(
        config=cfg, S0=float(S0), times=times, S_T=np.exp(out_lnS), x_T=out_x, x_min=out_xmin,
        anniversary_times=times[anniv] if anniv_ok else np.zeros(0),
        S_anniv=out_anniv, weights=out_w,
        nu_T=out_nu if sz is not None else None,
        S=S_full if store else None, x=x_full if store else None,
        nu=nu_full if (store and sz is not None) else None)


def _lv_rows(lv: "LocalVolSurface", cfg: SimConfig, allow_time_extrapolation: bool):
    if not allow_time_extrapolation and lv.maturities[-1] < cfg.horizon - 1e-9:
        raise CoverageError(
            f"local volatility surface ends at T={lv.maturities[-1]:g}, before the horizon {cfg.horizon:g}")
    times = np.linspace(0.0, cfg.horizon, cfg.n_steps + 1)[:-1]
    return lv.strikes, lv.rows(times)


def simulate_qt(params: HWParams, lv: "LocalVolSurface", curve: YieldCurve, q: float, S0: float,
                cfg: SimConfig, allow_time_extrapolation: bool = False) -> PathBatch:
    """Simulate under the forward measure whose numeraire matures at the horizon."""
    if cfg.measure != "QT":
        cfg = cfg.replace(measure="QT")
    strikes, rows = _lv_rows(lv, cfg, allow_time_extrapolation)
    return _run(params, curve, q, S0, cfg, strikes, rows, None)


def simulate_qs(params: HWParams, lv: "LocalVolSurface", curve: YieldCurve, q: float, S0: float,
                cfg: SimConfig, allow_time_extrapolation: bool = False) -> PathBatch:
    """Simulate under the equity measure (fund with reinvested dividends as numeraire)."""
    if cfg.measure != "QS":
        cfg = cfg.replace(measure="QS")
    strikes, rows = _lv_rows(lv, cfg, allow_time_extrapolation)
    return _run(params, curve, q, S0, cfg, strikes, rows, None)


def simulate_sz(params: HWParams, sz: "SZParams", curve: YieldCurve, q: float, S0: float,
                cfg: SimConfig) -> PathBatch:
    """Simulate with Schobel-Zhu stochastic volatility under ``cfg.measure``."""
    dummy = np.zeros((cfg.n_steps, 1))
    return _run(params, curve, q, S0, cfg, np.array([1.0]), dummy, sz)


# --------------------------------------------------------------------------
# Binary path dump
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<QQd")


def write_path_dump(batch: PathBatch, path: str | Path) -> None:
    """Little-endian dump: header (uint64 n_paths, uint64 n_steps, float64
    horizon) followed by the S block, the x block and, for stochastic
    volatility runs, the nu block, each n_paths x (n_steps+1) row-major
    float64."""
    if batch.S is None or batch.x is None:
        raise ConfigurationError("path dump needs a batch simulated with store_paths=True")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(batch.config.n_paths, batch.config.n_steps, float(batch.horizon)))
        for block in (batch.S, batch.x, batch.nu):
            if block is not None:
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_path_dump(path: str | Path) -> dict[str, np.ndarray | float | int]:
    raw = Path(path).read_bytes()
    n, m, horizon = _HEADER.unpack_from(raw, 0)
    block = n * (m + 1) * 8
    body = len(raw) - _HEADER.size
    if body % block:
        raise ConfigurationError("path dump size does not match its header")
    count = body // block
    names = ("S", "x", "nu")[:count]
    out: dict[str, np.ndarray | float | int] = {"n_paths": n, "n_steps": m, "horizon": horizon}
    for j, name in enumerate(names):
        start = _HEADER.size + j * block
        out[name] = np.frombuffer(raw, dtype="<f8", count=n * (m + 1), offset=start).reshape(n, m + 1)
    return out
