"""
lob-impact: state-dependent Hawkes models of the limit order book

Calibrates a state-dependent Hawkes process on LOBSTER data, simulates
liquidations against it and measures their price impact.
"""

__version__ = "1.0.0"

from .error_handler import (
    LobImpactError,
    InputError,
    DomainError,
    ModelError,
    SamplingBudgetExceeded,
    NoLiquidatorActivity,
    FlagRecorder,
)
from .lob_model import BookSnapshot, StateVariable, DirichletParams, LimitOrder
from .hawkes_engine import (
    EventHistory,
    HawkesParams,
    TransitionMatrices,
    ModelBundle,
    simulate,
    simulate_with_liquidator,
    save_model,
    load_model,
)
from .calibration import calibrate, fit_hawkes, fit_dirichlet, residual_diagnostics
from .impact_profiler import (
    LiquidationConfig,
    impact_profile,
    monte_carlo_profiles,
    stress_scores,
    check_price_symmetry,
    symmetrise,
)
from .synthetic import synthetic_model

__all__ = [
    "LobImpactError",
    "InputError",
    "DomainError",
    "ModelError",
    "SamplingBudgetExceeded",
    "NoLiquidatorActivity",
    "FlagRecorder",
    "BookSnapshot",
    "StateVariable",
    "DirichletParams",
    "LimitOrder",
    "EventHistory",
    "HawkesParams",
    "TransitionMatrices",
    "ModelBundle",
    "simulate",
    "simulate_with_liquidator",
    "save_model",
    "load_model",
    "calibrate",
    "fit_hawkes",
    "fit_dirichlet",
    "residual_diagnostics",
    "LiquidationConfig",
    "impact_profile",
    "monte_carlo_profiles",
    "stress_scores",
    "check_price_symmetry",
    "symmetrise",
    "synthetic_model",
]
