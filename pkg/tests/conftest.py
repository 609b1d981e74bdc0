import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lvhw.hw_rates import HWParams
from lvhw.market_data import ImpliedVolSurface, MortalityTable, YieldCurve

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

US_STRIKES = (80.0, 90.0, 95.0, 100.0, 105.0, 110.0, 120.0)
US_VOLS = (0.275, 0.266, 0.262, 0.258, 0.254, 0.250, 0.243)


@pytest.fixture(scope="session")
def flat_curve():
    return YieldCurve.flat(0.04, 100.0)


@pytest.fixture(scope="session")
def table():
    return MortalityTable.gompertz()


@pytest.fixture(scope="session")
def us_smile():
    return ImpliedVolSurface(10.0, US_STRIKES, US_VOLS)


@pytest.fixture(scope="session")
def hw():
    return HWParams(0.05, 0.01, 0.1464)


@pytest.fixture(scope="session")
def piecewise_curve():
    t = np.array([0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 60.0])
    zero = np.array([0.030, 0.032, 0.035, 0.038, 0.041, 0.043, 0.042, 0.040])
    return YieldCurve(t, np.exp(-zero * t))
