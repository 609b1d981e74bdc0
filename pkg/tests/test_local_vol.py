import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvhw.closed_form import SZParams, bs_call
from lvhw.errors import ArbitrageError, CalibrationError, CoverageError, InputDataError, SparseDataError
from lvhw.hw_rates import HWParams
from lvhw.local_vol import (CalibrationGrid, LocalVolSurface, calibrate_mc, call_curvature,
                            dupire_deterministic, dupire_surface, lv_difference_adjustment,
                            lv_from_expectation, market_digital, mimic_sz_closed_form,
                            mimic_sz_conditional, silverman_bandwidth)
from lvhw.market_data import ImpliedVolSurface, YieldCurve
from lvhw.mc_engine import SimConfig, simulate_qt, simulate_sz

from roundtrip import reprice_vols

# ---------------------------------------------------------------- surface container


SMALL = LocalVolSurface([1.0, 2.0], [80.0, 100.0, 120.0], [[0.3, 0.25, 0.2], [0.32, 0.27, 0.22]])


@pytest.fixture
def small_surface():
    return SMALL


def test_surface_exact_at_nodes(small_surface):
    for i, T in enumerate(small_surface.maturities):
        for j, K in enumerate(small_surface.strikes):
            assert small_surface(T, K) == small_surface.values[i, j]


def test_surface_flat_outside(small_surface):
    assert small_surface(0.1, 50.0) == 0.3
    assert small_surface(5.0, 500.0) == 0.22
    assert small_surface(1.5, 90.0) == pytest.approx(0.5 * (0.275 + 0.295))


@given(st.floats(0.0, 3.0), st.floats(50.0, 150.0))
def test_surface_bounded_by_nodes(t, S):
    v = SMALL(t, S)
    assert SMALL.values.min() - 1e-15 <= v <= SMALL.values.max() + 1e-15


def test_surface_csv_roundtrip(tmp_path, small_surface):
    small_surface.to_csv(tmp_path / "lv.csv")
    back = LocalVolSurface.from_csv(tmp_path / "lv.csv")
    np.testing.assert_array_equal(back.values, small_surface.values)
    np.testing.assert_array_equal(back.strikes, small_surface.strikes)
    header = (tmp_path / "lv.csv").read_text().splitlines()[0]
    assert header.startswith("maturity,80.0,100.0")


def test_surface_rejects_bad_grids():
    with pytest.raises(InputDataError):
        LocalVolSurface([1.0], [100.0, 90.0], [[0.2, 0.2]])
    with pytest.raises(InputDataError):
        LocalVolSurface([1.0], [100.0], [[-0.2]])


def test_default_grid_layout():
    g = CalibrationGrid.default()
    assert g.maturities[0] == 0.5 and g.maturities[-1] == 10.0 and g.maturities.size == 20
    assert g.strikes[0] == pytest.approx(40.0) and g.strikes[-1] == pytest.approx(250.0)


# ---------------------------------------------------------------- Dupire


def test_dupire_flat_smile():
    s = ImpliedVolSurface.flat(0.258)
    for K, T in ((60.0, 0.5), (100.0, 3.0), (180.0, 10.0)):
        assert dupire_deterministic(s, 0.04, 0.0, 100.0, K, T) == pytest.approx(0.258, abs=1e-14)


def test_dupire_flat_smile_with_slope():
    s = ImpliedVolSurface.flat(0.25, maturity_slope=0.01)
    assert dupire_deterministic(s, 0.04, 0.0, 100.0, 100.0, 10.0) == pytest.approx(
        math.sqrt(0.25**2 + 2 * 10 * 0.25 * 0.01), abs=1e-14)


def test_dupire_strike_independent_without_skew():
    s = ImpliedVolSurface.flat(0.2, maturity_slope=0.005)
    vals = dupire_deterministic(s, 0.03, 0.01, 100.0, np.linspace(40, 250, 30), 4.0)
    assert np.ptp(vals) < 1e-12


def _bs_price_form(smile, r, q, K, T, h=0.005, ht=1e-4):
    C = lambda k, t: bs_call(100.0, k, t, r, q, smile.vol(k, t)).price
    CT = (C(K, T + ht) - C(K, T - ht)) / (2 * ht)
    CK = (C(K + h, T) - C(K - h, T)) / (2 * h)
    CKK = (C(K + h, T) - 2 * C(K, T) + C(K - h, T)) / h**2
    return math.sqrt((CT + (r - q) * K * CK + q * C(K, T)) / (0.5 * K * K * CKK))


@pytest.mark.parametrize("K,T", [(90.0, 10.0), (97.0, 2.0), (115.0, 6.0)])
def test_dupire_matches_price_form(us_smile, K, T):
    assert dupire_deterministic(us_smile, 0.04, 0.0, 100.0, K, T) == pytest.approx(
        _bs_price_form(us_smile, 0.04, 0.0, K, T), abs=1e-4)


def test_dupire_with_dividend_matches_price_form(us_smile):
    assert dupire_deterministic(us_smile, 0.04, 0.02, 100.0, 104.0, 5.0) == pytest.approx(
        _bs_price_form(us_smile, 0.04, 0.02, 104.0, 5.0), abs=1e-4)


def test_butterfly_arbitrage_detected():
    s = ImpliedVolSurface(1.0, [80.0, 100.0, 120.0], [0.3, 0.5, 0.3])
    with pytest.raises(ArbitrageError) as info:
        dupire_deterministic(s, 0.0, 0.0, 100.0, 100.0, 1.0)
    assert info.value.T == 1.0 and info.value.K is not None


# ---------------------------------------------------------------- stochastic-rate formula


@pytest.mark.parametrize("T", [0.5, 3.0, 10.0])
def test_expectation_form_collapses_to_dupire(us_smile, flat_curve, T):
    K = np.array([60.0, 90.0, 100.0, 130.0, 200.0])
    E = 0.04 * market_digital(us_smile, flat_curve, 0.0, 100.0, K, T)
    got = lv_from_expectation(us_smile, flat_curve, 0.0, 100.0, K, T, E)
    want = dupire_deterministic(us_smile, 0.04, 0.0, 100.0, K, T)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_expectation_form_collapses_on_a_sloped_curve(us_smile, piecewise_curve):
    K, T = np.array([70.0, 100.0, 140.0]), 7.0
    f = piecewise_curve.inst_forward(T)[0]
    E = f * market_digital(us_smile, piecewise_curve, 0.0, 100.0, K, T, "curve")
    got = lv_from_expectation(us_smile, piecewise_curve, 0.0, 100.0, K, T, E, "curve")
    want = dupire_deterministic(us_smile, piecewise_curve.zero_rate(T), 0.0, 100.0, K, T, r_drift=f)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_expectation_form_reports_bad_radicand(us_smile, flat_curve):
    with pytest.raises(CalibrationError) as info:
        lv_from_expectation(us_smile, flat_curve, 0.0, 100.0, 100.0, 5.0, 50.0)
    assert info.value.radicand < 0 and info.value.K == 100.0 and info.value.T == 5.0


def test_expectation_from_independent_simulation(flat_curve):
    smile = ImpliedVolSurface.flat(0.25)
    p = HWParams(0.05, 0.01, 0.0)
    T = 5.0
    b = simulate_qt(p, LocalVolSurface.constant(0.25), flat_curve, 0.0, 100.0,
                    SimConfig(50_000, 100, seed=3, horizon=T))
    from lvhw.hw_rates import xbar
    r_T = b.x_T + xbar(p, flat_curve, T)
    K = np.array([80.0, 100.0, 125.0])
    E = np.array([np.mean(r_T * (b.S_T > k)) for k in K])
    lv = lv_from_expectation(smile, flat_curve, 0.0, 100.0, K, T, E)
    # with independent drivers the rate correction stays small
    np.testing.assert_allclose(lv, 0.25, atol=0.01)


def test_difference_adjustment_zero_cov(flat_curve):
    assert lv_difference_adjustment(0.27, 0.0, flat_curve, 100.0, 5.0, 0.01) == 0.27


def test_difference_adjustment_identity(us_smile, flat_curve):
    K, T = np.array([75.0, 100.0, 135.0]), 6.0
    dig = market_digital(us_smile, flat_curve, 0.0, 100.0, K, T)
    cov = np.array([-2e-4, 3e-4, 1e-4])
    E = 0.04 * dig + cov
    direct = lv_from_expectation(us_smile, flat_curve, 0.0, 100.0, K, T, E)
    s1 = dupire_deterministic(us_smile, 0.04, 0.0, 100.0, K, T)
    ckk = call_curvature(us_smile, flat_curve, 0.0, 100.0, K, T)
    adj = lv_difference_adjustment(s1, cov, flat_curve, K, T, ckk)
    np.testing.assert_allclose(direct**2, adj**2, rtol=0, atol=1e-12)


def test_difference_adjustment_errors(flat_curve):
    with pytest.raises(CalibrationError):
        lv_difference_adjustment(0.1, 1.0, flat_curve, 100.0, 5.0, 0.01)
    with pytest.raises(ArbitrageError):
        lv_difference_adjustment(0.1, 0.0, flat_curve, 100.0, 5.0, -0.01)


# ---------------------------------------------------------------- bootstrap


SMALL_GRID = CalibrationGrid.default(horizon=2.0, maturity_step=0.5, n_strikes=41)


def test_bootstrap_collapses_without_rate_noise(us_smile, flat_curve):
    p = HWParams(0.05, 0.0, 0.2)
    lv = calibrate_mc(p, us_smile, flat_curve, 0.0, 100.0, SimConfig(5_000, 40, seed=1, horizon=2.0),
                      SMALL_GRID)
    ref = dupire_surface(us_smile, flat_curve, 0.0, 100.0, SMALL_GRID)
    np.testing.assert_allclose(lv.values, ref.values, rtol=0, atol=1e-12)


def test_bootstrap_is_deterministic(us_smile, flat_curve, hw):
    cfg = SimConfig(4_000, 40, seed=9, horizon=2.0)
    a = calibrate_mc(hw, us_smile, flat_curve, 0.0, 100.0, cfg, SMALL_GRID)
    b = calibrate_mc(hw, us_smile, flat_curve, 0.0, 100.0, cfg, SMALL_GRID)
    np.testing.assert_array_equal(a.values, b.values)
    c = calibrate_mc(hw, us_smile, flat_curve, 0.0, 100.0, cfg.replace(seed=10), SMALL_GRID)
    assert not np.array_equal(a.values[1:], c.values[1:])


def test_bootstrap_simulated_digital_mode(us_smile, flat_curve, hw):
    cfg = SimConfig(20_000, 40, seed=2, horizon=2.0)
    a = calibrate_mc(hw, us_smile, flat_curve, 0.0, 100.0, cfg, SMALL_GRID, digital="simulated")
    b = calibrate_mc(hw, us_smile, flat_curve, 0.0, 100.0, cfg, SMALL_GRID, digital="market")
    inner = (SMALL_GRID.strikes > 70) & (SMALL_GRID.strikes < 150)
    assert np.max(np.abs(a.values[:, inner] - b.values[:, inner])) < 0.02
    with pytest.raises(InputDataError):
        calibrate_mc(hw, us_smile, flat_curve, 0.0, 100.0, cfg, SMALL_GRID, digital="kernel")


def test_bootstrap_control_variate_keeps_the_mean_and_cuts_noise(us_smile, flat_curve):
    p = HWParams(0.05, 0.02, 0.3)
    grid = CalibrationGrid(np.array([0.5, 1.0, 2.0]), np.linspace(80.0, 125.0, 10))
    runs = {cv: np.array([calibrate_mc(p, us_smile, flat_curve, 0.0, 100.0,
                                       SimConfig(10_000, 40, seed=s, horizon=2.0), grid,
                                       control_variate=cv).values[-1] for s in range(1, 9)])
            for cv in (False, True)}
    plain, cv = runs[False], runs[True]
    spread = lambda a: a.std(axis=0, ddof=1)
    assert np.all(spread(cv) < spread(plain))
    se = np.sqrt((spread(plain) ** 2 + spread(cv) ** 2) / 8)
    assert np.all(np.abs(plain.mean(axis=0) - cv.mean(axis=0)) < 4 * se)


def test_bootstrap_reports_failing_slice(flat_curve):
    # rate vol so large relative to the equity smile that the correction overwhelms it
    smile = ImpliedVolSurface.flat(0.03)
    p = HWParams(0.01, 0.1, -0.9)
    grid = CalibrationGrid(np.array([0.5, 1.0, 1.5, 2.0]), np.linspace(90.0, 110.0, 11))
    with pytest.raises(CalibrationError) as info:
        calibrate_mc(p, smile, flat_curve, 0.0, 100.0, SimConfig(2_000, 40, seed=1, horizon=2.0), grid)
    assert info.value.slice_index == 2 and info.value.radicand < 0


def test_bootstrap_flat_smile_roundtrip(flat_curve):
    """Flat smile with independent rates: repriced 10y vols stay flat."""
    p = HWParams(0.05, 0.01, 0.0)
    smile = ImpliedVolSurface.flat(0.25)
    cfg = SimConfig(50_000, 500, seed=21, horizon=10.0)
    lv = calibrate_mc(p, smile, flat_curve, 0.0, 100.0, cfg, CalibrationGrid.default(n_strikes=85))
    vols, _ = reprice_vols(lv, p, flat_curve, 100.0, [80.0, 100.0, 120.0], 10.0, cfg.replace(seed=22), 0.25)
    np.testing.assert_allclose(vols, 0.25, atol=0.001)


def test_simulation_needs_full_coverage(flat_curve, hw, small_surface):
    with pytest.raises(CoverageError):
        simulate_qt(hw, small_surface, flat_curve, 0.0, 100.0, SimConfig(10, 10, horizon=5.0))


# ---------------------------------------------------------------- mimicking


def test_mimic_closed_form_cases():
    p = HWParams(0.05, 0.01, 0.0)
    sz = SZParams(1.0, 0.2, 0.1, 0.25)
    assert mimic_sz_closed_form(p, sz, 0.0) == pytest.approx(0.25, abs=1e-15)
    assert mimic_sz_closed_form(p, SZParams(1.0, 0.2, 0.0, 0.2), 7.0) == pytest.approx(0.2, abs=1e-15)
    want = math.sqrt((0.25 * math.exp(-5) + 0.2 * (1 - math.exp(-5))) ** 2 + 0.005 * (1 - math.exp(-10)))
    assert mimic_sz_closed_form(p, sz, 5.0) == pytest.approx(want, rel=1e-14)


def test_mimic_closed_form_rate_correlation_shifts_mean():
    p = HWParams(0.05, 0.01, 0.0)
    base = mimic_sz_closed_form(p, SZParams(1.0, 0.2, 0.1, 0.25), 5.0)
    shifted = mimic_sz_closed_form(p, SZParams(1.0, 0.2, 0.1, 0.25, 0.0, 0.5), 5.0)
    assert shifted != base


def _sz_paths(flat_curve, sz, T, n=100_000, seed=13):
    p = HWParams(0.05, 0.01, 0.0)
    b = simulate_sz(p, sz, flat_curve, 0.0, 100.0, SimConfig(n, 100, seed=seed, measure="QT", horizon=T))
    return b.S_T, b.nu_T


def test_conditional_mimic_deterministic_vol(flat_curve):
    sz = SZParams(1.0, 0.2, 0.0, 0.3)
    S, nu = _sz_paths(flat_curve, sz, 2.0, n=20_000)
    # without vol-of-vol the Euler recursion is deterministic: nu_k = psi + (nu0 - psi)(1 - kappa dt)^k
    expected = 0.2 + 0.1 * (1 - 1.0 * 0.02) ** 100
    np.testing.assert_allclose(mimic_sz_conditional(S, nu, [80.0, 100.0, 130.0]), nu[0], rtol=1e-12)
    assert nu[0] == pytest.approx(expected, rel=1e-12)


def test_conditional_mimic_tower_property(flat_curve):
    sz = SZParams(1.0, 0.2, 0.1, 0.25, -0.3)
    S, nu = _sz_paths(flat_curve, sz, 5.0, n=20_000)
    # averaging the conditional second moment over every sample point recovers E[nu^2]
    avg = np.mean(mimic_sz_conditional(S, nu, S, min_effective=1.0) ** 2)
    assert avg == pytest.approx(np.mean(nu**2), rel=1e-3)


def test_conditional_mimic_sparse_region(flat_curve):
    S, nu = _sz_paths(flat_curve, SZParams(1.0, 0.2, 0.1, 0.25), 1.0, n=5_000)
    with pytest.raises(SparseDataError):
        mimic_sz_conditional(S, nu, 5_000.0)


def test_silverman_bandwidth():
    z = np.random.default_rng(1).standard_normal(10_000)
    iqr = np.subtract(*np.percentile(z, [75, 25]))
    assert silverman_bandwidth(z) == pytest.approx(0.9 * min(z.std(ddof=1), iqr / 1.349) * 10_000 ** -0.2)


def test_conditional_mimic_near_closed_form_for_small_vol_of_vol(flat_curve):
    p = HWParams(0.05, 0.01, 0.0)
    sz = SZParams(1.0, 0.25, 0.05, 0.25)
    S, nu = _sz_paths(flat_curve, sz, 5.0)
    K = float(np.median(S))
    assert mimic_sz_conditional(S, nu, K) == pytest.approx(mimic_sz_closed_form(p, sz, 5.0), rel=0.02)
    # the unconditional second moment always matches
    assert math.sqrt(np.mean(nu**2)) == pytest.approx(mimic_sz_closed_form(p, sz, 5.0), rel=0.005)
