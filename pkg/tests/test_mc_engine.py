import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from lvhw import _kernels
from lvhw.errors import ConfigurationError, CoverageError
from lvhw.hw_rates import HWParams, b_factor, bond_reconstitution
from lvhw.local_vol import LocalVolSurface
from lvhw.market_data import YieldCurve
from lvhw.mc_engine import (PricingResult, SimConfig, estimate, read_path_dump, simulate_qs,
                            simulate_qt, write_path_dump)

FLAT = LocalVolSurface.constant(0.2)


# ---------------------------------------------------------------- random numbers


@pytest.mark.parametrize("ctr,key,want", [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
])
def test_philox_known_answers(ctr, key, want):
    assert tuple(int(v) for v in _kernels.philox_block(*ctr, *key)) == want


def test_inverse_normal_accuracy():
    p = np.concatenate([np.logspace(-12, -1, 200), np.linspace(0.01, 0.99, 500), 1 - np.logspace(-12, -1, 200)])
    z = _kernels.inv_norm_array(p)
    np.testing.assert_allclose(z, norm.ppf(p), rtol=2e-9, atol=1e-12)


def test_normals_depend_only_on_counter():
    a, b = np.empty(4), np.empty(4)
    _kernels.normals(5, 17, 3, 0, a)
    _kernels.normals(5, 17, 3, 0, b)
    np.testing.assert_array_equal(a, b)
    _kernels.normals(5, 17, 4, 0, b)
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------- configuration


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SimConfig(1, 10)
    with pytest.raises(ConfigurationError):
        SimConfig(10, 0)
    with pytest.raises(ConfigurationError):
        SimConfig(10, 10, horizon=0.0)
    with pytest.raises(ConfigurationError):
        SimConfig(10, 10, measure="P")
    with pytest.raises(ConfigurationError):
        SimConfig(10, 10, seed=-1)
    with pytest.raises(ConfigurationError):
        SimConfig(10, 10, barriers=(-0.01,))
    with pytest.raises(ConfigurationError):
        SimConfig(10, 10, horizon=5.0, target_T=6.0)


def test_anniversary_steps():
    np.testing.assert_array_equal(SimConfig(2, 500, horizon=10.0).anniversary_steps(), np.arange(50, 501, 50))
    with pytest.raises(ConfigurationError):
        SimConfig(2, 333, horizon=10.0).anniversary_steps()


def test_thread_setting_is_validated(monkeypatch, flat_curve, hw):
    monkeypatch.setenv("LVHW_THREADS", "zero")
    with pytest.raises(ConfigurationError):
        simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(10, 10, horizon=1.0))


# ---------------------------------------------------------------- estimator


def test_estimate_constant_payoff():
    r = estimate(np.full(50, 3.5), seed=4)
    assert (r.value, r.std_error, r.n_paths, r.seed) == (3.5, 0.0, 50, 4)


def test_estimate_alternating_signs():
    r = estimate([1.0, -1.0, 1.0, -1.0])
    assert r.value == 0.0
    assert r.std_error == pytest.approx(math.sqrt(4 / 3) / 2, rel=1e-15)


@given(st.integers(1, 99))
def test_estimate_bernoulli(k):
    y = np.r_[np.ones(k), np.zeros(100 - k)]
    p = k / 100
    r = estimate(y)
    assert r.value == pytest.approx(p)
    assert r.std_error == pytest.approx(math.sqrt(p * (1 - p) * 100 / 99 / 100), rel=1e-12)


def test_estimate_needs_two_samples():
    with pytest.raises(ConfigurationError):
        estimate([1.0])
    with pytest.raises(ValueError):
        PricingResult(1.0, -0.1, 10, 0)


# ---------------------------------------------------------------- reproducibility


def test_same_seed_same_paths(flat_curve, hw):
    cfg = SimConfig(3_000, 50, seed=11, horizon=5.0)
    a = simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, cfg)
    b = simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, cfg)
    np.testing.assert_array_equal(a.S_T, b.S_T)
    np.testing.assert_array_equal(a.x_T, b.x_T)
    c = simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, cfg.replace(seed=12))
    assert not np.array_equal(a.S_T, c.S_T)


def test_paths_do_not_depend_on_batch_size(flat_curve, hw):
    small = simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(100, 50, seed=3, horizon=5.0))
    big = simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(1_000, 50, seed=3, horizon=5.0))
    np.testing.assert_array_equal(small.S_T, big.S_T[:100])


def test_thread_count_does_not_change_results(monkeypatch, flat_curve, hw):
    cfg = SimConfig(4_001, 40, seed=8, horizon=4.0, measure="QS", barriers=(-0.02,))
    monkeypatch.setenv("LVHW_THREADS", "1")
    one = simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, cfg)
    monkeypatch.setenv("LVHW_THREADS", "2")
    two = simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, cfg)
    for name in ("S_T", "x_T", "x_min", "S_anniv", "weights"):
        np.testing.assert_array_equal(getattr(one, name), getattr(two, name))


def test_path_dump_roundtrip(tmp_path, flat_curve, hw):
    b = simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(7, 12, horizon=3.0, store_paths=True))
    write_path_dump(b, tmp_path / "paths.bin")
    back = read_path_dump(tmp_path / "paths.bin")
    assert (back["n_paths"], back["n_steps"], back["horizon"]) == (7, 12, 3.0)
    np.testing.assert_array_equal(back["S"], b.S)
    np.testing.assert_array_equal(back["x"], b.x)
    assert "nu" not in back
    assert (tmp_path / "paths.bin").stat().st_size == 24 + 2 * 7 * 13 * 8


def test_path_dump_requires_stored_paths(tmp_path, flat_curve, hw):
    b = simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(7, 12, horizon=3.0))
    with pytest.raises(ConfigurationError):
        write_path_dump(b, tmp_path / "paths.bin")


def test_stored_paths_are_consistent(flat_curve, hw):
    b = simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(50, 20, horizon=2.0, store_paths=True))
    assert np.all(b.S > 0)
    assert np.all(b.S[:, 0] == 100.0) and np.all(b.x[:, 0] == 0.0)
    np.testing.assert_allclose(b.S[:, -1], b.S_T, rtol=1e-14)
    np.testing.assert_array_equal(b.x[:, -1], b.x_T)
    np.testing.assert_array_equal(b.x.min(axis=1), b.x_min)
    np.testing.assert_allclose(b.S_anniv, b.S[:, [10, 20]], rtol=1e-14)


# ---------------------------------------------------------------- distributional checks


def test_zero_vol_is_deterministic(flat_curve):
    p = HWParams(0.05, 0.0, 0.0)
    b = simulate_qt(p, LocalVolSurface.constant(0.0), flat_curve, 0.01, 100.0, SimConfig(20, 100, horizon=7.0))
    np.testing.assert_allclose(b.S_T, 100.0 * math.exp(0.03 * 7.0), rtol=1e-12)
    assert np.all(b.x_T == 0.0)


def test_zero_equity_vol_under_equity_measure(flat_curve):
    # with no equity vol the correlation drift vanishes and x is a plain OU process
    p = HWParams(0.05, 0.01, 0.5)
    b = simulate_qs(p, LocalVolSurface.constant(0.0), flat_curve, 0.0, 100.0,
                    SimConfig(20_000, 50, seed=3, horizon=5.0))
    assert abs(b.x_T.mean()) < 3 * b.x_T.std(ddof=1) / math.sqrt(b.x_T.size)


def test_lognormal_moments(flat_curve):
    p = HWParams(0.05, 0.0, 0.0)
    T, s = 5.0, 0.2
    b = simulate_qt(p, LocalVolSurface.constant(s), flat_curve, 0.0, 100.0, SimConfig(50_000, 50, seed=2, horizon=T))
    z = np.log(b.S_T)
    se = z.std(ddof=1) / math.sqrt(z.size)
    assert abs(z.mean() - (math.log(100.0) + (0.04 - 0.5 * s * s) * T)) < 3 * se
    assert z.std(ddof=1) == pytest.approx(s * math.sqrt(T), rel=0.02)


def test_rate_factor_matches_ou_moments_without_correlation(flat_curve):
    p = HWParams(0.1, 0.015, 0.0)
    T = 5.0
    b = simulate_qs(p, FLAT, flat_curve, 0.0, 100.0, SimConfig(50_000, 100, seed=5, horizon=T))
    var = p.sigma_r**2 / (2 * p.alpha) * (1 - math.exp(-2 * p.alpha * T))
    se = math.sqrt(var / b.x_T.size)
    assert abs(b.x_T.mean()) < 3 * se
    assert b.x_T.var(ddof=1) == pytest.approx(var, abs=3 * var * math.sqrt(2 / b.x_T.size))


def test_forward_measure_mean_of_rate_factor(flat_curve):
    p = HWParams(0.05, 0.01, 0.3)
    T = 10.0
    b = simulate_qt(p, FLAT, flat_curve, 0.0, 100.0, SimConfig(50_000, 200, seed=6, horizon=T))
    # m' = -alpha m - sigma^2 b(t, T), m(0) = 0
    want = -p.sigma_r**2 * integrate.quad(lambda s: math.exp(-p.alpha * (T - s)) * b_factor(p, s, T), 0, T)[0]
    se = b.x_T.std(ddof=1) / math.sqrt(b.x_T.size)
    assert want < -1e-3
    assert abs(b.x_T.mean() - want) < 3 * se


def test_forward_measure_martingale_and_bonds_small(flat_curve, hw):
    T = 5.0
    b = simulate_qt(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(20_000, 100, seed=7, horizon=T))
    P = flat_curve.discount(T)
    v = P * b.S_T
    assert abs(v.mean() - 100.0) < 3 * v.std(ddof=1) / math.sqrt(v.size)
    for n in (1, 5, 20):
        y = P * bond_reconstitution(hw, flat_curve, T, n, b.x_T)
        assert abs(y.mean() - flat_curve.discount(T + n)) < 3 * y.std(ddof=1) / math.sqrt(y.size)


def test_equity_measure_mean_of_rate_factor_with_correlation(flat_curve):
    p = HWParams(0.05, 0.01, 0.5)
    T, s = 5.0, 0.2
    b = simulate_qs(p, LocalVolSurface.constant(s), flat_curve, 0.0, 100.0, SimConfig(50_000, 100, seed=8, horizon=T))
    want = p.rho_sr * p.sigma_r * s * (1 - math.exp(-p.alpha * T)) / p.alpha
    se = b.x_T.std(ddof=1) / math.sqrt(b.x_T.size)
    assert abs(b.x_T.mean() - want) < 3 * se


# ---------------------------------------------------------------- coverage


def test_surface_must_cover_horizon(flat_curve, hw):
    lv = LocalVolSurface([1.0, 2.0], [90.0, 110.0], [[0.2, 0.2], [0.2, 0.2]])
    with pytest.raises(CoverageError):
        simulate_qt(hw, lv, flat_curve, 0.0, 100.0, SimConfig(10, 10, horizon=3.0))
    simulate_qt(hw, lv, flat_curve, 0.0, 100.0, SimConfig(10, 10, horizon=2.0))


def test_curve_must_cover_horizon(hw):
    short = YieldCurve.flat(0.03, max_maturity=5.0)
    with pytest.raises(CoverageError):
        simulate_qs(hw, FLAT, short, 0.0, 100.0, SimConfig(10, 10, horizon=6.0))


def test_barriers_must_be_negative(flat_curve, hw):
    with pytest.raises(ConfigurationError):
        simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(10, 10, horizon=2.0, measure="QS", barriers=(0.01,)))
    b = simulate_qs(hw, FLAT, flat_curve, 0.0, 100.0, SimConfig(10, 10, horizon=2.0, measure="QS", barriers=(-0.01,)))
    with pytest.raises(ConfigurationError):
        b.weight(-0.02)
