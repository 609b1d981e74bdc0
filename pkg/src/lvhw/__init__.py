"""Local volatility with Hull-White rates for variable annuity guarantees."""

__version__ = "0.1.0"
