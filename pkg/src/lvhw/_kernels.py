"""Compiled inner loops for path simulation.

Random numbers come from a Philox4x32-10 counter-based generator keyed by
the 64-bit seed. The counter is (path index, step index, stream), so every
path owns an independent stream and results do not depend on how paths are
split across threads.
"""
from __future__ import annotations

import math
import os

import numba as nb
import numpy as np

# quieten the TBB version probe on hosts with an old TBB; the workqueue layer
# is always available
if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "workqueue"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_TWO_M32 = 1.0 / 4294967296.0

STREAM_EQUITY_RATES = 0
STREAM_BROWNIAN_TEST = 7


@nb.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = (hi1 ^ c1 ^ k0) & _MASK
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True)
def philox_block(c0, c1, c2, c3, k0, k1):
    """Python-callable wrapper returning the four output words."""
    return philox4x32(np.uint64(c0), np.uint64(c1), np.uint64(c2), np.uint64(c3),
                      np.uint64(k0), np.uint64(k1))


_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


@nb.njit(cache=True, inline="always")
def inv_norm(p):
    """Rational approximation to the standard normal quantile (rel. err ~1e-9)."""
    if p < _P_LOW:
        t = math.sqrt(-2.0 * math.log(p))
        return ((((( _C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / \
            ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0)
    if p > 1.0 - _P_LOW:
        t = math.sqrt(-2.0 * math.log1p(-p))
        return -((((( _C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]) / \
            ((((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0)
    u = p - 0.5
    s = u * u
    return ((((( _A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * u / \
        (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0)


@nb.njit(cache=True)
def inv_norm_array(p):
    out = np.empty_like(p)
    for i in range(p.size):
        out[i] = inv_norm(p[i])
    return out


@nb.njit(cache=True, inline="always")
def u01(word):
    return (np.float64(word) + 0.5) * _TWO_M32


@nb.njit(cache=True)
def normals(seed, path, step, stream, out):
    """Fill ``out[:4]`` with the normals the simulator draws for one step."""
    k0 = np.uint64(seed) & _MASK
    k1 = np.uint64(seed) >> _S32
    c0, c1, c2, c3 = philox4x32(np.uint64(path) & _MASK, np.uint64(path) >> _S32,
                                np.uint64(step), np.uint64(stream), k0, k1)
    out[0] = inv_norm(u01(c0))
    out[1] = inv_norm(u01(c1))
    out[2] = inv_norm(u01(c2))
    out[3] = inv_norm(u01(c3))


@nb.njit(cache=True, inline="always")
def log_ndtr(x):
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    x2 = x * x
    return -0.5 * x2 - math.log(-x) - 0.5 * math.log(2.0 * math.pi) + \
        math.log1p(-1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2))


@nb.njit(cache=True, inline="always")
def survival_step(b_rel, mu, sd):
    """Probability that drifted Brownian motion from 0 stays above b_rel < 0.

    ``mu`` and ``sd`` are the mean and standard deviation of the increment
    over the whole interval.
    """
    if b_rel >= 0.0:
        return 0.0
    if sd <= 0.0:
        return 1.0 if mu > b_rel else 0.0
    a = (-b_rel + mu) / sd
    d = (b_rel + mu) / sd
    first = 0.5 * math.erfc(-a / math.sqrt(2.0))
    second = math.exp(2.0 * b_rel * mu / (sd * sd) + log_ndtr(d))
    p = first - second
    if p < 0.0:
        return 0.0
    if p > 1.0:
        return 1.0
    return p


@nb.njit(cache=True, inline="always")
def lv_lookup(strikes, row, s):
    n = strikes.size
    if s <= strikes[0]:
        return row[0]
    if s >= strikes[n - 1]:
        return row[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        m = (lo + hi) >> 1
        if strikes[m] <= s:
            lo = m
        else:
            hi = m
    w = (s - strikes[lo]) / (strikes[hi] - strikes[lo])
    return row[lo] + w * (row[hi] - row[lo])


def _simulate_impl(seed, n_paths, n_steps, dt, measure_qs, use_sz, lnS0, q,
                   strikes, vol_rows, xbar_k, b_k,
                   alpha, sigma_r, chol,
                   kappa, psi, tau, nu0, rho_snu, rho_rnu,
                   anniv_idx, barriers, surv_mu_coef, surv_sd, store,
                   out_lnS_T, out_x_T, out_x_min, out_nu_T, out_anniv, out_w,
                   out_S, out_x, out_nu):
    k0 = np.uint64(seed) & _MASK
    k1 = np.uint64(seed) >> _S32
    sq = math.sqrt(dt)
    n_b = barriers.size
    n_a = anniv_idx.size
    l00 = chol[0, 0]
    l10 = chol[1, 0]
    l11 = chol[1, 1]
    l20 = chol[2, 0]
    l21 = chol[2, 1]
    l22 = chol[2, 2]
    rho_sr = l10
    for i in nb.prange(n_paths):
        lnS = lnS0
        x = 0.0
        nu = nu0
        xmin = 0.0
        alive = np.ones(n_b, dtype=np.bool_)
        w = np.ones(n_b)
        a_pos = 0
        if store:
            out_S[i, 0] = math.exp(lnS)
            out_x[i, 0] = 0.0
            if use_sz:
                out_nu[i, 0] = nu
        pid = np.uint64(i)
        for k in range(n_steps):
            c0, c1, c2, c3 = philox4x32(pid & _MASK, pid >> _S32, np.uint64(k),
                                        np.uint64(STREAM_EQUITY_RATES), k0, k1)
            z1 = inv_norm(u01(c0))
            z2 = inv_norm(u01(c1))
            zs = l00 * z1
            zr = l10 * z1 + l11 * z2
            if use_sz:
                z3 = inv_norm(u01(c2))
                zv = l20 * z1 + l21 * z2 + l22 * z3
                vol = nu
            else:
                zv = 0.0
                vol = lv_lookup(strikes, vol_rows[k], math.exp(lnS))
            r = xbar_k[k] + x
            if measure_qs:
                lnS_new = lnS + (r - q + 0.5 * vol * vol) * dt + vol * sq * zs
                x_new = x + (-alpha * x + rho_sr * sigma_r * vol) * dt + sigma_r * sq * zr
                if use_sz:
                    nu_new = nu + (kappa * (psi - nu) + rho_snu * tau * nu) * dt + tau * sq * zv
            else:
                bk = b_k[k]
                lnS_new = lnS + (r - q - rho_sr * vol * sigma_r * bk - 0.5 * vol * vol) * dt + vol * sq * zs
                x_new = x - (alpha * x + sigma_r * sigma_r * bk) * dt + sigma_r * sq * zr
                if use_sz:
                    nu_new = nu + (kappa * (psi - nu) - rho_rnu * tau * sigma_r * bk) * dt + tau * sq * zv
            for j in range(n_b):
                if alive[j]:
                    if x_new <= barriers[j]:
                        alive[j] = False
                        w[j] = 0.0
                    else:
                        w[j] *= survival_step(barriers[j] - x, surv_mu_coef * vol, surv_sd)
            lnS = lnS_new
            x = x_new
            if use_sz:
                nu = nu_new
            if x < xmin:
                xmin = x
            if a_pos < n_a and anniv_idx[a_pos] == k + 1:
                out_anniv[i, a_pos] = math.exp(lnS)
                a_pos += 1
            if store:
                out_S[i, k + 1] = math.exp(lnS)
                out_x[i, k + 1] = x
                if use_sz:
                    out_nu[i, k + 1] = nu
        out_lnS_T[i] = lnS
        out_x_T[i] = x
        out_x_min[i] = xmin
        out_nu_T[i] = nu
        for j in range(n_b):
            out_w[j, i] = w[j]


simulate_serial = nb.njit(cache=True)(_simulate_impl)
simulate_parallel = nb.njit(cache=True, parallel=True)(_simulate_impl)


def _brownian_min_impl(seed, n_paths, n_sub, drift, vol, levels, out_hit):
    """Discrete walk W_k = drift t_k + vol B(t_k) on [0,1] with n_sub steps.

    For every (drift, vol) pair ``out_hit[p, l]`` counts the paths whose
    running minimum falls to or below ``levels[p, l]``. Setting-independent
    normals are shared by all pairs.
    """
    k0 = np.uint64(seed) & _MASK
    k1 = np.uint64(seed) >> _S32
    n_set = drift.size
    n_lev = levels.shape[1]
    h = 1.0 / n_sub
    sq = math.sqrt(h)
    for i in nb.prange(n_paths):
        pos = np.zeros(n_set)
        mins = np.zeros(n_set)
        pid = np.uint64(i)
        for k in range(0, n_sub, 4):
            c0, c1, c2, c3 = philox4x32(pid & _MASK, pid >> _S32, np.uint64(k),
                                        np.uint64(STREAM_BROWNIAN_TEST), k0, k1)
            zs = (inv_norm(u01(c0)), inv_norm(u01(c1)), inv_norm(u01(c2)), inv_norm(u01(c3)))
            for m in range(4):
                if k + m >= n_sub:
                    break
                z = zs[m]
                for p in range(n_set):
                    pos[p] += drift[p] * h + vol[p] * sq * z
                    if pos[p] < mins[p]:
                        mins[p] = pos[p]
        for p in range(n_set):
            for lev in range(n_lev):
                if mins[p] <= levels[p, lev]:
                    out_hit[i, p * n_lev + lev] = 1


brownian_min_hits = nb.njit(cache=True)(_brownian_min_impl)
