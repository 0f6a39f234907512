#!/usr/bin/env python3
"""
State-Dependent Hawkes Engine

Parameter containers for power-law state-dependent Hawkes processes, event
histories, intensity and closed-form compensator evaluation, Ogata thinning
with and without a liquidating agent, and the versioned model JSON format.
"""

import json
import math
import logging
from pathlib import Path
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .error_handler import InputError, ModelError
from .lob_model import (
    DEFAULT_REJECTION_BUDGET,
    DirichletParams,
    SeedLike,
    Side,
    StateVariable,
    as_generator,
    inflationary_states,
    deflationary_states,
    market_order_update,
)

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1

LIQUIDATOR = 0
SELL_MARKET_ORDER = 1
BUY_MARKET_ORDER = 2
DEFLATIONARY_LIMIT = 3
INFLATIONARY_LIMIT = 4
MARKET_EVENT_TYPES = (SELL_MARKET_ORDER, BUY_MARKET_ORDER, DEFLATIONARY_LIMIT, INFLATIONARY_LIMIT)

ROW_SUM_TOLERANCE = 1e-12
PAIRWISE_BLOCK = 2_000_000


def event_labels(d_E: int) -> Tuple[int, ...]:
    """Event-type labels carried by a model with d_E types."""
    if d_E == 4:
        return MARKET_EVENT_TYPES
    if d_E == 5:
        return (LIQUIDATOR,) + MARKET_EVENT_TYPES
    raise ModelError(f"models carry 4 market event types, plus the liquidator; got d_E={d_E}")


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class EventRecord:
    """One market event."""
    time: float
    event_type: int
    state_after: int
    size: Optional[float] = None
    price: Optional[int] = None


@dataclass(frozen=True, eq=False)
class EventHistory:
    """Columnar event history: times, event-type labels and post-event states.

    liquidation_window is the interval [t0, tau) on which the liquidator's
    intensity is switched on; it is irrelevant for market-only histories.
    """
    times: np.ndarray
    events: np.ndarray
    states: np.ndarray
    initial_state: int
    liquidation_window: Tuple[float, float] = (0.0, math.inf)

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        events = np.array(self.events, dtype=np.int64).reshape(-1)
        states = np.array(self.states, dtype=np.int64).reshape(-1)
        if not (times.size == events.size == states.size):
            raise InputError("times, events and states must have equal length")
        if times.size and (np.any(~np.isfinite(times)) or np.any(np.diff(times) <= 0)):
            raise InputError("event times must be finite and strictly increasing")
        object.__setattr__(self, 'times', _freeze(times))
        object.__setattr__(self, 'events', _freeze(events))
        object.__setattr__(self, 'states', _freeze(states))
        object.__setattr__(self, 'initial_state', int(self.initial_state))
        start, end = self.liquidation_window
        object.__setattr__(self, 'liquidation_window', (float(start), float(end)))

    def __len__(self) -> int:
        return int(self.times.size)

    @classmethod
    def empty(cls, initial_state: int = 0) -> 'EventHistory':
        return cls(np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), initial_state)

    @classmethod
    def from_records(cls,
                     records: Iterable[EventRecord],
                     initial_state: int,
                     liquidation_window: Tuple[float, float] = (0.0, math.inf)) -> 'EventHistory':
        records = list(records)
        return cls(
            times=[r.time for r in records],
            events=[r.event_type for r in records],
            states=[r.state_after for r in records],
            initial_state=initial_state,
            liquidation_window=liquidation_window
        )

    def records(self) -> List[EventRecord]:
        return [
            EventRecord(float(t), int(e), int(x))
            for t, e, x in zip(self.times, self.events, self.states)
        ]

    def before(self, t: float) -> int:
        """Number of events strictly before t."""
        return int(np.searchsorted(self.times, t, side='left'))

    def state_at(self, t: float) -> int:
        """State after the last event strictly before t."""
        idx = self.before(t)
        return self.initial_state if idx == 0 else int(self.states[idx - 1])

    def states_at(self, ts: Sequence[float]) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(ts, dtype=float), side='left')
        padded = np.concatenate(([self.initial_state], self.states))
        return padded[idx]

    def pre_event_states(self) -> np.ndarray:
        """State in force just before each event."""
        return np.concatenate(([self.initial_state], self.states[:-1])) if len(self) else self.states

    def times_of(self, label: int) -> np.ndarray:
        return self.times[self.events == label]

    def count(self, label: int, up_to: Optional[float] = None) -> int:
        mask = self.events == label
        if up_to is not None:
            mask &= self.times <= up_to
        return int(mask.sum())

    def liquidator_active(self, t: float) -> bool:
        start, end = self.liquidation_window
        return start <= t < end

    def shifted(self, dt: float) -> 'EventHistory':
        """The same history translated by dt in time."""
        start, end = self.liquidation_window
        return EventHistory(self.times + dt, self.events, self.states, self.initial_state, (start + dt, end + dt))

    def without(self, label: int) -> 'EventHistory':
        keep = self.events != label
        return EventHistory(self.times[keep], self.events[keep], self.states[keep], self.initial_state)


@dataclass(frozen=True, eq=False)
class HawkesParams:
    """Base rates and power-law kernels alpha * (t + 1) ** -beta.

    alpha and beta are indexed [source type][source state][target type] by
    position; positions map to labels through `labels`.
    """
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        nu = np.array(self.nu, dtype=float)
        alpha = np.array(self.alpha, dtype=float)
        beta = np.array(self.beta, dtype=float)
        d_E = nu.size
        event_labels(d_E)
        if nu.shape != (d_E,) or alpha.ndim != 3 or alpha.shape[0] != d_E or alpha.shape[2] != d_E:
            raise ModelError(f"inconsistent shapes nu{nu.shape}, alpha{alpha.shape}")
        if beta.shape != alpha.shape:
            raise ModelError(f"beta shape {beta.shape} differs from alpha shape {alpha.shape}")
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise ModelError("parameters must be finite")
        if np.any(nu < 0) or np.any(alpha < 0):
            raise ModelError("base rates and kernel coefficients must be non-negative")
        if np.any(beta <= 1):
            raise ModelError("kernel exponents must exceed 1")
        object.__setattr__(self, 'nu', _freeze(nu))
        object.__setattr__(self, 'alpha', _freeze(alpha))
        object.__setattr__(self, 'beta', _freeze(beta))

    @property
    def d_E(self) -> int:
        return self.nu.size

    @property
    def d_S(self) -> int:
        return self.alpha.shape[1]

    @property
    def labels(self) -> Tuple[int, ...]:
        return event_labels(self.d_E)

    @property
    def has_liquidator(self) -> bool:
        return self.d_E == 5

    def index_of(self, label: int) -> int:
        try:
            return self.labels.index(int(label))
        except ValueError:
            raise ModelError(f"event type {label} not in model types {self.labels}") from None

    def indices_of(self, labels: np.ndarray) -> np.ndarray:
        lookup = np.full(5, -1, dtype=np.int64)
        lookup[list(self.labels)] = np.arange(self.d_E)
        idx = lookup[np.asarray(labels, dtype=np.int64)]
        if np.any(idx < 0):
            raise ModelError(f"history holds event types outside {self.labels}")
        return idx

    def kernel_norms(self) -> np.ndarray:
        """L1 norms alpha / (beta - 1), same shape as alpha."""
        return self.alpha / (self.beta - 1.0)

    def norm_matrix(self) -> np.ndarray:
        """Max over source states of the kernel norms, as [source][target]."""
        return self.kernel_norms().max(axis=1)

    def spectral_radius(self) -> float:
        """Heuristic stationarity diagnostic; not a proof of stationarity."""
        return float(np.max(np.abs(np.linalg.eigvals(self.norm_matrix()))))

    def tail_window(self, tolerance: Optional[float]) -> Optional[float]:
        """Lag beyond which every integrated kernel tail drops below tolerance."""
        if tolerance is None:
            return None
        if tolerance <= 0:
            raise InputError("kernel tail tolerance must be positive")
        norms = self.kernel_norms()
        active = norms > 0
        if not np.any(active):
            return 0.0
        lags = (norms[active] / tolerance) ** (1.0 / (self.beta[active] - 1.0)) - 1.0
        return float(max(lags.max(), 0.0))

    def with_liquidator(self, base_rate: float, clustering_rate: float) -> 'HawkesParams':
        """Five-type parameters with the liquidator as type 0.

        Liquidator events excite the market like sell market orders, and every
        event excites the liquidator with clustering_rate times its excitation
        of sell market orders.
        """
        if self.has_liquidator:
            raise ModelError("parameters already include the liquidator")
        if base_rate < 0 or clustering_rate < 0:
            raise InputError("liquidator base and clustering rates must be non-negative")

        sell = self.index_of(SELL_MARKET_ORDER)
        d_E, d_S = self.d_E + 1, self.d_S
        nu = np.concatenate(([base_rate], self.nu))
        alpha = np.zeros((d_E, d_S, d_E))
        beta = np.full((d_E, d_S, d_E), 2.0)
        alpha[1:, :, 1:] = self.alpha
        beta[1:, :, 1:] = self.beta
        alpha[0, :, 1:] = self.alpha[sell]
        beta[0, :, 1:] = self.beta[sell]
        alpha[:, :, 0] = clustering_rate * alpha[:, :, 1 + sell]
        beta[:, :, 0] = beta[:, :, 1 + sell]
        return HawkesParams(nu, alpha, beta)

    def market_only(self) -> 'HawkesParams':
        if not self.has_liquidator:
            return self
        return HawkesParams(self.nu[1:], self.alpha[1:, :, 1:], self.beta[1:, :, 1:])

    def shocked(self, shock: float, beta_floor: float = 1.0 + 1e-6) -> Tuple['HawkesParams', bool]:
        """Multiply nu, alpha and beta by (1 + shock); reports whether beta had to be clamped."""
        factor = 1.0 + shock
        if factor <= 0:
            raise InputError(f"shock {shock} would make parameters non-positive")
        beta = self.beta * factor
        clamped = bool(np.any(beta < beta_floor))
        return HawkesParams(self.nu * factor, self.alpha * factor, np.maximum(beta, beta_floor)), clamped

    def to_dict(self) -> Dict[str, Any]:
        return {'nu': self.nu.tolist(), 'alpha': self.alpha.tolist(), 'beta': self.beta.tolist()}


@dataclass(frozen=True, eq=False)
class TransitionMatrices:
    """Row-stochastic state transition matrices phi_e(x', x), one per event type."""
    phi: np.ndarray
    unvisited_rows: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 3 or phi.shape[1] != phi.shape[2]:
            raise ModelError(f"phi must have shape (d_E, d_S, d_S), got {phi.shape}")
        event_labels(phi.shape[0])
        if np.any(phi < 0) or np.any(phi > 1):
            raise ModelError("transition probabilities must lie in [0, 1]")
        deviation = np.max(np.abs(phi.sum(axis=2) - 1.0))
        if deviation > ROW_SUM_TOLERANCE:
            raise ModelError(f"transition rows must sum to 1 (max deviation {deviation:.3e})")
        object.__setattr__(self, 'phi', _freeze(phi))

    @property
    def d_E(self) -> int:
        return self.phi.shape[0]

    @property
    def d_S(self) -> int:
        return self.phi.shape[1]

    @property
    def labels(self) -> Tuple[int, ...]:
        return event_labels(self.d_E)

    def for_event(self, label: int) -> np.ndarray:
        try:
            return self.phi[self.labels.index(int(label))]
        except ValueError:
            raise ModelError(f"no transition matrix for event type {label}") from None

    def sign_violation(self) -> float:
        """Largest mass a visited row of sell (buy) market orders puts on price rises (falls)."""
        K = self.d_S // 3

        def worst(label: int, targets: np.ndarray) -> float:
            mass = self.for_event(label)[:, targets].sum(axis=1)
            mass[list(self.unvisited_rows.get(label, ()))] = 0.0
            return float(mass.max())

        return max(worst(SELL_MARKET_ORDER, inflationary_states(K)),
                   worst(BUY_MARKET_ORDER, deflationary_states(K)))

    def validate_sign_constraints(self, tolerance: float = 0.0) -> None:
        violation = self.sign_violation()
        if violation > tolerance:
            raise ModelError(f"market orders move the price against their side (mass {violation:.3e})")

    def with_phi0(self, phi0: np.ndarray) -> 'TransitionMatrices':
        """Five-type matrices with phi0 for the liquidator."""
        market = self.market_only()
        phi = np.concatenate((np.asarray(phi0, dtype=float)[None], market.phi), axis=0)
        return TransitionMatrices(phi, dict(market.unvisited_rows))

    def market_only(self) -> 'TransitionMatrices':
        if self.d_E == 4:
            return self
        rows = {k: v for k, v in self.unvisited_rows.items() if k != LIQUIDATOR}
        return TransitionMatrices(self.phi[1:], rows)


def lagged_power_sums(source_times: np.ndarray,
                      coefficients: np.ndarray,
                      exponents: np.ndarray,
                      query_times: np.ndarray,
                      window: Optional[float] = None) -> np.ndarray:
    """For each query q: sum over sources with T < q of c * (q - T + 1) ** -p.

    coefficients and exponents have shape (N, d); the result has shape (Q, d).
    Sources with lag above window are dropped when a window is given.
    """
    source_times = np.asarray(source_times, dtype=float)
    query_times = np.asarray(query_times, dtype=float)
    d = coefficients.shape[1] if coefficients.ndim == 2 else 1
    coefficients = coefficients.reshape(-1, d)
    exponents = exponents.reshape(-1, d)
    out = np.zeros((query_times.size, d))
    if source_times.size == 0 or query_times.size == 0:
        return out

    order = np.argsort(query_times, kind='stable')
    sorted_queries = query_times[order]
    span = source_times.size if window is None else max(int(np.searchsorted(
        source_times, source_times[0] + window)), 1)
    chunk = max(1, PAIRWISE_BLOCK // (max(span, 1) * d))

    for start in range(0, sorted_queries.size, chunk):
        q = sorted_queries[start:start + chunk]
        hi = int(np.searchsorted(source_times, q[-1], side='left'))
        lo = 0 if window is None else int(np.searchsorted(source_times, q[0] - window, side='left'))
        if hi <= lo:
            continue
        lag = q[:, None] - source_times[None, lo:hi]
        mask = lag > 0
        if window is not None:
            mask &= lag <= window
        log_base = np.log1p(np.where(mask, lag, 0.0))
        terms = coefficients[None, lo:hi, :] * np.exp(-log_base[:, :, None] * exponents[None, lo:hi, :])
        terms *= mask[:, :, None]
        out[order[start:start + chunk]] = terms.sum(axis=1)
    return out


def integrated_power_sums(source_times: np.ndarray,
                          coefficients: np.ndarray,
                          exponents: np.ndarray,
                          query_times: np.ndarray) -> np.ndarray:
    """Integral over [0, q] of lagged_power_sums: sum over T < q of c/(p-1) * (1 - (q - T + 1) ** (1 - p))."""
    source_times = np.asarray(source_times, dtype=float)
    query_times = np.asarray(query_times, dtype=float)
    d = coefficients.shape[1] if coefficients.ndim == 2 else 1
    norms = coefficients.reshape(-1, d) / (exponents.reshape(-1, d) - 1.0)
    count = np.searchsorted(source_times, query_times, side='left')
    cumulative = np.vstack((np.zeros((1, d)), np.cumsum(norms, axis=0)))
    tails = lagged_power_sums(source_times, norms, exponents.reshape(-1, d) - 1.0, query_times)
    return cumulative[count] - tails


def _source_rows(params: HawkesParams, history: EventHistory) -> Tuple[np.ndarray, np.ndarray]:
    """Per-event (alpha, beta) rows toward every target type."""
    src = params.indices_of(history.events)
    return params.alpha[src, history.states, :], params.beta[src, history.states, :]


def _apply_liquidator_window(params: HawkesParams, history: EventHistory,
                             ts: np.ndarray, values: np.ndarray) -> np.ndarray:
    if params.has_liquidator:
        start, end = history.liquidation_window
        inactive = (ts < start) | (ts >= end)
        values[inactive, params.index_of(LIQUIDATOR)] = 0.0
    return values


def intensities_at_times(params: HawkesParams,
                         history: EventHistory,
                         ts: Sequence[float],
                         tail_tolerance: Optional[float] = None) -> np.ndarray:
    """Intensities of every event type at each time in ts, shape (len(ts), d_E)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    alpha, beta = _source_rows(params, history)
    excitation = lagged_power_sums(history.times, alpha, beta, ts, params.tail_window(tail_tolerance))
    values = params.nu[None, :] + excitation
    if not np.all(np.isfinite(values)):
        raise ModelError("non-finite intensity")
    return _apply_liquidator_window(params, history, ts, values)


def intensity_at(params: HawkesParams,
                 history: EventHistory,
                 t: float,
                 target: int,
                 tail_tolerance: Optional[float] = None) -> float:
    """Intensity of event type `target` at t, counting events strictly before t."""
    return float(intensities_at_times(params, history, [t], tail_tolerance)[0, params.index_of(target)])


def hybrid_intensity_at(params: HawkesParams,
                        transitions: TransitionMatrices,
                        history: EventHistory,
                        t: float,
                        target: Tuple[int, int],
                        tail_tolerance: Optional[float] = None) -> float:
    """Intensity of events of type e that land in state x."""
    label, state = target
    weight = transitions.for_event(label)[history.state_at(t), state]
    return float(weight * intensity_at(params, history, t, label, tail_tolerance))


def _unwindowed_compensator(params: HawkesParams, history: EventHistory, ts: np.ndarray) -> np.ndarray:
    alpha, beta = _source_rows(params, history)
    return params.nu[None, :] * ts[:, None] + integrated_power_sums(history.times, alpha, beta, ts)


def compensator_at_times(params: HawkesParams, history: EventHistory, ts: Sequence[float]) -> np.ndarray:
    """Lambda_e(t) = integral of the intensity over [0, t], shape (len(ts), d_E)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(ts < 0):
        raise InputError("compensators are defined for t >= 0")
    values = _unwindowed_compensator(params, history, ts)
    if params.has_liquidator:
        start, end = history.liquidation_window
        liq = params.index_of(LIQUIDATOR)
        clipped = np.clip(ts, start, end)
        on = _unwindowed_compensator(params, history, clipped)[:, liq]
        off = _unwindowed_compensator(params, history, np.array([start]))[0, liq]
        values[:, liq] = on - off
    if not np.all(np.isfinite(values)):
        raise ModelError("non-finite compensator")
    return values


def compensator_increment(params: HawkesParams, history: EventHistory, t0: float, t1: float) -> np.ndarray:
    """Lambda_e(t1) - Lambda_e(t0) for every event type, in closed form."""
    if t1 < t0:
        raise InputError(f"compensator interval end {t1} precedes its start {t0}")
    values = compensator_at_times(params, history, [t0, t1])
    return np.maximum(values[1] - values[0], 0.0)


class _ThinningSimulator:
    """Growing event buffer with per-event kernel rows for Ogata thinning."""

    def __init__(self, params: HawkesParams, tail_tolerance: Optional[float] = None, capacity: int = 1024):
        self.params = params
        self.window = params.tail_window(tail_tolerance)
        self.times = np.empty(capacity)
        self.alpha = np.empty((capacity, params.d_E))
        self.beta = np.empty((capacity, params.d_E))
        self.events = np.empty(capacity, dtype=np.int64)
        self.states = np.empty(capacity, dtype=np.int64)
        self.size = 0
        self.liquidator_index = params.index_of(LIQUIDATOR) if params.has_liquidator else None
        self.liquidator_on = False

    def intensities(self, t: float) -> np.ndarray:
        lam = self.params.nu.copy()
        if self.size:
            lo = 0
            if self.window is not None:
                lo = int(np.searchsorted(self.times[:self.size], t - self.window, side='left'))
            lag = t - self.times[lo:self.size] + 1.0
            lam += (self.alpha[lo:self.size] * lag[:, None] ** -self.beta[lo:self.size]).sum(axis=0)
        if self.liquidator_index is not None and not self.liquidator_on:
            lam[self.liquidator_index] = 0.0
        if not np.all(np.isfinite(lam)):
            raise ModelError(f"non-finite intensity at t={t}")
        return lam

    def record(self, t: float, event_index: int, state: int) -> None:
        if self.size == self.times.size:
            self._grow()
        self.times[self.size] = t
        self.alpha[self.size] = self.params.alpha[event_index, state]
        self.beta[self.size] = self.params.beta[event_index, state]
        self.events[self.size] = self.params.labels[event_index]
        self.states[self.size] = state
        self.size += 1

    def _grow(self) -> None:
        capacity = 2 * self.times.size
        for name in ('times', 'alpha', 'beta', 'events', 'states'):
            old = getattr(self, name)
            new = np.empty((capacity,) + old.shape[1:], dtype=old.dtype)
            new[:self.size] = old[:self.size]
            setattr(self, name, new)

    def history(self, initial_state: int,
                liquidation_window: Tuple[float, float] = (0.0, math.inf)) -> EventHistory:
        return EventHistory(
            self.times[:self.size].copy(),
            self.events[:self.size].copy(),
            self.states[:self.size].copy(),
            initial_state,
            liquidation_window
        )


def _state_index(state: Union[int, StateVariable]) -> int:
    return state.index if isinstance(state, StateVariable) else int(state)


def _check_transitions(params: HawkesParams, transitions: TransitionMatrices) -> None:
    if transitions.d_S != params.d_S:
        raise ModelError(f"transitions have {transitions.d_S} states, parameters {params.d_S}")


def simulate(params: HawkesParams,
             transitions: TransitionMatrices,
             initial_state: Union[int, StateVariable],
             horizon: float,
             rng_seed: SeedLike = None,
             tail_tolerance: Optional[float] = None) -> EventHistory:
    """Simulate the market on [0, horizon] by Ogata thinning.

    The bound is the total intensity just after the current time, which
    dominates the intensity until the next event since every kernel decays.
    """
    if params.has_liquidator:
        raise ModelError("use simulate_with_liquidator for five-type parameters")
    _check_transitions(params, transitions)
    if horizon < 0:
        raise InputError("horizon must be non-negative")

    rng = as_generator(rng_seed)
    sim = _ThinningSimulator(params, tail_tolerance)
    phi = transitions.market_only().phi
    state = _state_index(initial_state)
    t = 0.0

    while True:
        bound = sim.intensities(t).sum()
        if bound <= 0:
            break
        t += rng.exponential(1.0 / bound)
        if t > horizon:
            break
        lam = sim.intensities(t)
        total = lam.sum()
        if rng.uniform() * bound <= total:
            event_index = int(rng.choice(params.d_E, p=lam / total))
            state = int(rng.choice(params.d_S, p=phi[event_index, state]))
            sim.record(t, event_index, state)

    history = sim.history(_state_index(initial_state))
    logger.debug(f"Simulated {len(history)} events on [0, {horizon}]")
    return history


class LiquidationSchedule(Protocol):
    """Attributes of a liquidation schedule used by the simulator."""
    initial_inventory: float
    base_rate: float
    clustering_rate: float
    order_size_fraction: float
    start_time: float


@dataclass(frozen=True)
class LiquidatorFill:
    """A child market order of the liquidator."""
    time: float
    size: float
    state_before: int
    state_after: int
    cumulative: float
    imbalance_after: float


@dataclass(frozen=True, eq=False)
class LiquidationRun:
    """A simulated path with the liquidator active from t0 until its inventory is gone."""
    history: EventHistory
    fills: Tuple[LiquidatorFill, ...]
    termination_time: Optional[float]
    completed: bool
    params: HawkesParams
    start_time: float
    initial_inventory: float
    horizon: float

    @property
    def fill_times(self) -> np.ndarray:
        return np.array([f.time for f in self.fills])

    @property
    def fill_states(self) -> np.ndarray:
        return np.array([f.state_after for f in self.fills], dtype=np.int64)

    def inventory_at(self, ts: Sequence[float]) -> np.ndarray:
        """Remaining inventory right after time t."""
        ts = np.asarray(ts, dtype=float)
        cumulative = np.concatenate(([0.0], [f.cumulative for f in self.fills]))
        idx = np.searchsorted(self.fill_times, ts, side='right')
        return np.maximum(self.initial_inventory - cumulative[idx], 0.0)


def termination_time(fill_times: Sequence[float], fill_sizes: Sequence[float], inventory: float) -> Optional[float]:
    """Time of the first fill at which cumulated sizes reach the inventory."""
    if inventory <= 0:
        raise InputError(f"inventory must be positive, got {inventory}")
    cumulative = np.cumsum(np.asarray(fill_sizes, dtype=float))
    reached = np.flatnonzero(cumulative >= inventory)
    return float(fill_times[reached[0]]) if reached.size else None


def simulate_with_liquidator(params: HawkesParams,
                             transitions: TransitionMatrices,
                             liquidation: LiquidationSchedule,
                             gamma: DirichletParams,
                             horizon: float,
                             rng_seed: SeedLike = None,
                             initial_state: Union[int, StateVariable, None] = None,
                             tail_tolerance: Optional[float] = None,
                             rejection_budget: int = DEFAULT_REJECTION_BUDGET) -> LiquidationRun:
    """Five-type thinning where type 0 is the liquidator's sell market orders.

    Liquidator fills update the state through the book mechanics of a sampled
    order book; the liquidator stops at the first fill exhausting its inventory.
    """
    if liquidation.initial_inventory <= 0:
        raise InputError(f"inventory Q0 must be positive, got {liquidation.initial_inventory}")
    if not params.has_liquidator:
        params = params.with_liquidator(liquidation.base_rate, liquidation.clustering_rate)
    _check_transitions(params, transitions)
    K = params.d_S // 3
    if gamma.n_states != params.d_S:
        raise ModelError(f"gamma covers {gamma.n_states} states, parameters {params.d_S}")

    rng = as_generator(rng_seed)
    phi = transitions.market_only().phi
    sim = _ThinningSimulator(params, tail_tolerance)
    liq = params.index_of(LIQUIDATOR)
    t0 = float(liquidation.start_time)
    state = _state_index(initial_state) if initial_state is not None else StateVariable(0, 0, K).index
    start_state = state

    t = 0.0
    sim.liquidator_on = t0 <= 0
    tau: Optional[float] = None
    fills: List[LiquidatorFill] = []
    fill_times: List[float] = []
    fill_sizes: List[float] = []

    while True:
        bound = sim.intensities(t).sum()
        awaiting_start = tau is None and not sim.liquidator_on
        if bound <= 0 and not awaiting_start:
            break
        proposal = t + (rng.exponential(1.0 / bound) if bound > 0 else math.inf)
        if awaiting_start and proposal >= t0:
            if t0 > horizon:
                break
            t = t0
            sim.liquidator_on = True
            continue
        if proposal > horizon:
            break
        t = proposal
        lam = sim.intensities(t)
        total = lam.sum()
        if rng.uniform() * bound > total:
            continue

        event_index = int(rng.choice(params.d_E, p=lam / total))
        if event_index == liq:
            update = market_order_update(
                StateVariable.from_index(state, K), gamma, liquidation.order_size_fraction,
                Side.SELL, rng, rejection_budget
            )
            new_state = update.state_after.index
            fill_times.append(t)
            fill_sizes.append(update.size)
            fills.append(LiquidatorFill(t, update.size, state, new_state, float(np.sum(fill_sizes)), update.imbalance))
            state = new_state
            sim.record(t, event_index, state)
            tau = termination_time(fill_times, fill_sizes, liquidation.initial_inventory)
            if tau is not None:
                sim.liquidator_on = False
        else:
            state = int(rng.choice(params.d_S, p=phi[event_index - 1, state]))
            sim.record(t, event_index, state)

    completed = tau is not None
    window_end = tau if completed else math.inf
    history = sim.history(start_state, (t0, window_end))
    if not completed:
        logger.warning(
            f"⚠️ Liquidation incomplete at horizon {horizon}: "
            f"{sum(fill_sizes):.4f} of {liquidation.initial_inventory} sold"
        )
    else:
        logger.debug(f"Liquidation completed at tau={tau:.3f} after {len(fills)} fills")

    return LiquidationRun(
        history=history,
        fills=tuple(fills),
        termination_time=tau,
        completed=completed,
        params=params,
        start_time=t0,
        initial_inventory=float(liquidation.initial_inventory),
        horizon=float(horizon)
    )


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Everything needed to simulate: Hawkes parameters, transitions and volume model."""
    params: HawkesParams
    transitions: TransitionMatrices
    gamma: DirichletParams
    n: int
    K: int

    def __post_init__(self):
        if self.params.d_S != 3 * self.K:
            raise ModelError(f"d_S={self.params.d_S} does not match K={self.K}")
        if self.transitions.d_E != self.params.d_E or self.transitions.d_S != self.params.d_S:
            raise ModelError("transition matrices do not match the Hawkes parameters")
        if self.gamma.n_states != self.params.d_S or self.gamma.depth != self.n:
            raise ModelError("Dirichlet parameters do not match the state space or depth")

    def to_dict(self, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'schema_version': MODEL_SCHEMA_VERSION,
            'd_E': self.params.d_E,
            'd_S': self.params.d_S,
            'n': self.n,
            'K': self.K,
            'nu': self.params.nu.tolist(),
            'alpha': self.params.alpha.tolist(),
            'beta': self.params.beta.tolist(),
            'phi': self.transitions.phi.tolist(),
            'gamma': self.gamma.to_list(),
        }
        if meta:
            data['meta'] = meta
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelBundle':
        version = data.get('schema_version')
        if version != MODEL_SCHEMA_VERSION:
            raise ModelError(f"unsupported model schema_version {version!r}")
        try:
            bundle = cls(
                params=HawkesParams(data['nu'], data['alpha'], data['beta']),
                transitions=TransitionMatrices(data['phi']),
                gamma=DirichletParams(data['gamma']),
                n=int(data['n']),
                K=int(data['K'])
            )
        except KeyError as e:
            raise ModelError(f"model document misses field {e}") from None
        if bundle.params.d_E != data['d_E'] or bundle.params.d_S != data['d_S']:
            raise ModelError("declared d_E/d_S differ from the parameter shapes")
        return bundle


def save_model(bundle: ModelBundle, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write the versioned model JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(bundle.to_dict(meta), f, indent=2)
    logger.info(f"📁 Model written to {path}")
    return path


def load_model(path: Union[str, Path]) -> ModelBundle:
    """Read and validate a model JSON file."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"model file not found: {path}", path=str(path))
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"model file {path} is not valid JSON: {e}", path=str(path)) from None
    return ModelBundle.from_dict(data)
