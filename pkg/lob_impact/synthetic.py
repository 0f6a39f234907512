"""
Shipped synthetic calibration.

A hand-built model with the sign structure seen on liquid stocks: sell market
orders excite sell orders and price decreases more than buys and increases,
buys mirror it, market orders only move the price in their own direction, and
volumes lean towards the side the imbalance points at.
"""

import logging

import numpy as np

from .error_handler import InputError
from .hawkes_engine import ModelBundle, HawkesParams, TransitionMatrices
from .lob_model import DirichletParams, StateVariable, state_count

logger = logging.getLogger(__name__)

KERNEL_EXPONENT = 2.5
BASE_RATES = (0.80, 0.75, 0.30, 0.32)

# L1 kernel norms [source][target] over types 1..4
KERNEL_NORMS = np.array([
    [0.30, 0.05, 0.20, 0.08],
    [0.05, 0.30, 0.08, 0.20],
    [0.10, 0.05, 0.20, 0.05],
    [0.05, 0.10, 0.05, 0.20],
])
# targets 1 and 3 are favoured by ask-heavy books (x2 < 0)
IMBALANCE_TILT = np.array([-0.1, 0.1, -0.1, 0.1])


def _relative_bucket(x2: int, K: int) -> float:
    half = (K - 1) // 2
    return x2 / half if half else 0.0


def _kernels(K: int) -> np.ndarray:
    d_S = state_count(K)
    alpha = np.empty((4, d_S, 4))
    for x in range(d_S):
        r = _relative_bucket(StateVariable.from_index(x, K).x2, K)
        alpha[:, x, :] = (KERNEL_EXPONENT - 1.0) * KERNEL_NORMS * (1.0 + IMBALANCE_TILT * r)
    return alpha


def _bucket_weights(K: int, centre: float) -> np.ndarray:
    half = (K - 1) // 2
    buckets = np.arange(-half, half + 1)
    weights = np.exp(-0.9 * np.abs(buckets - centre))
    return weights / weights.sum()


def _transitions(K: int) -> np.ndarray:
    d_S = state_count(K)
    half = (K - 1) // 2
    phi = np.zeros((4, d_S, d_S))

    for y in range(d_S):
        before = StateVariable.from_index(y, K)
        # sell market orders deplete the bid, pushing the imbalance down
        sell_buckets = _bucket_weights(K, before.x2 - 0.6)
        limit_buckets = _bucket_weights(K, -0.3 * half)
        for x2 in range(-half, half + 1):
            k = x2 + half
            p_down = 0.41 - 0.065 * _relative_bucket(x2, K)
            phi[0, y, StateVariable(-1, x2, K).index] = sell_buckets[k] * p_down
            phi[0, y, StateVariable(0, x2, K).index] = sell_buckets[k] * (1.0 - p_down)
            phi[2, y, StateVariable(-1, x2, K).index] = limit_buckets[k]

    # buys and inflationary events are the mirror images
    reflect = np.array([StateVariable.from_index(x, K).reflected().index for x in range(d_S)])
    phi[1] = phi[0][np.ix_(reflect, reflect)]
    phi[3] = phi[2][np.ix_(reflect, reflect)]
    return phi / phi.sum(axis=2, keepdims=True)


def _gamma(n: int, K: int) -> np.ndarray:
    d_S = state_count(K)
    levels = np.arange(1, n + 1, dtype=float)
    gamma = np.empty((d_S, 2 * n))
    for x in range(d_S):
        r = _relative_bucket(StateVariable.from_index(x, K).x2, K)
        gamma[x, 0::2] = levels * (1.5 - 0.5 * r)
        gamma[x, 1::2] = levels * (1.5 + 0.5 * r)
    return gamma


def synthetic_model(n: int = 2, K: int = 3, symmetric: bool = False) -> ModelBundle:
    """Synthetic four-type model for depth n and K imbalance buckets."""
    if n < 1:
        raise InputError(f"depth n must be >= 1, got {n}")
    if K < 1 or K % 2 == 0:
        raise InputError(f"number of buckets K must be odd and >= 1, got {K}")

    alpha = _kernels(K)
    params = HawkesParams(np.array(BASE_RATES), alpha, np.full(alpha.shape, KERNEL_EXPONENT))
    transitions = TransitionMatrices(_transitions(K))
    if symmetric:
        from .impact_profiler import symmetrise
        params, transitions = symmetrise(params, transitions)

    logger.info(f"🧪 Synthetic model n={n}, K={K}, symmetric={symmetric}, "
                f"radius={params.spectral_radius():.3f}")
    return ModelBundle(params, transitions, DirichletParams(_gamma(n, K)), n, K)
