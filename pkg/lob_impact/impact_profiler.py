#!/usr/bin/env python3
"""
Price Impact Profiling

Direct and indirect impact intensities of a liquidation, their exact
integration into the impact profile, the impact score, price-symmetry checks
and symmetrisation, Monte Carlo profile bands and the parameter stress harness.
"""

import csv
import json
import logging
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SimulationConfig
from .error_handler import Flag, FlagRecorder, InputError, ModelError, NoLiquidatorActivity
from .batch_processor import BatchSummary, PathBatchProcessor, PathResult, path_seeds
from .calibration import empirical_transition_rows, write_header_block
from .lob_model import (
    StateVariable,
    deflationary_states,
    inflationary_states,
    mid_price_proxy,
    neutral_states,
    reflection_map,
)
from .hawkes_engine import (
    LIQUIDATOR,
    MARKET_EVENT_TYPES,
    EventHistory,
    HawkesParams,
    ModelBundle,
    TransitionMatrices,
    compensator_at_times,
    integrated_power_sums,
    intensities_at_times,
    lagged_power_sums,
    simulate_with_liquidator,
)

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1
CANONICAL_EVENT_PERMUTATION = {1: 2, 2: 1, 3: 4, 4: 3}


@dataclass(frozen=True)
class LiquidationConfig:
    """Liquidation schedule: inventory Q0, liquidator base rate nu0, clustering rate a,
    order-size fraction c of the visible bid depth, and start time t0."""
    initial_inventory: float
    base_rate: float = 0.0
    clustering_rate: float = 0.0
    order_size_fraction: float = 0.1
    start_time: float = 0.0

    def __post_init__(self):
        if not self.initial_inventory > 0:
            raise InputError(f"inventory Q0 must be positive, got {self.initial_inventory}")
        if not 0 < self.order_size_fraction <= 1:
            raise InputError(f"order size fraction c must lie in (0, 1], got {self.order_size_fraction}")
        if self.base_rate < 0 or self.clustering_rate < 0:
            raise InputError("liquidator base rate and clustering rate must be non-negative")
        if not (math.isfinite(self.start_time) and self.start_time >= 0):
            raise InputError(f"start time must be finite and non-negative, got {self.start_time}")

    @property
    def is_baseline(self) -> bool:
        """True when the liquidator can never trade."""
        return self.base_rate == 0 and self.clustering_rate == 0

    def to_dict(self) -> Dict[str, float]:
        return {
            'Q0': self.initial_inventory,
            'nu0': self.base_rate,
            'a': self.clustering_rate,
            'c': self.order_size_fraction,
            't0': self.start_time,
        }


# ---------------------------------------------------------------------------
# phi0 and impact intensities
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Phi0Estimate:
    phi0: np.ndarray
    unvisited_rows: Tuple[int, ...]
    n_fills: int


def estimate_phi0(history: EventHistory, d_S: int, recorder: Optional[FlagRecorder] = None) -> Phi0Estimate:
    """Empirical state transitions at the liquidator's own arrival times."""
    fills = history.events == LIQUIDATOR
    if not np.any(fills):
        raise NoLiquidatorActivity()
    before = history.pre_event_states()[fills]
    phi0, missing = empirical_transition_rows(before, history.states[fills], d_S)
    if missing and recorder is not None:
        recorder.flag('impact', 'identity_row',
                      f"phi0: {len(missing)} rows unvisited at liquidator fills set to identity", rows=list(missing))
    return Phi0Estimate(phi0, missing, int(fills.sum()))


def _require_liquidator_model(params: HawkesParams, transitions: TransitionMatrices) -> None:
    if not params.has_liquidator or transitions.d_E != 5:
        raise ModelError("impact evaluation needs five-type parameters and transitions including phi0")
    if transitions.d_S != params.d_S:
        raise ModelError("transitions and parameters disagree on the number of states")


def _price_move_weights(transitions: TransitionMatrices, states: np.ndarray) -> np.ndarray:
    """(sum over deflationary - sum over inflationary) of phi_e(X, .) per market event type."""
    K = transitions.d_S // 3
    minus, plus = deflationary_states(K), inflationary_states(K)
    weights = np.empty((states.size, len(MARKET_EVENT_TYPES)))
    for col, label in enumerate(MARKET_EVENT_TYPES):
        rows = transitions.for_event(label)[states]
        weights[:, col] = rows[:, minus].sum(axis=1) - rows[:, plus].sum(axis=1)
    return weights


def _deflationary_mass(transitions: TransitionMatrices, states: np.ndarray) -> np.ndarray:
    K = transitions.d_S // 3
    return transitions.for_event(LIQUIDATOR)[states][:, deflationary_states(K)].sum(axis=1)


def _fill_kernels(params: HawkesParams, history: EventHistory) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fill times and the kernels kappa_{0,e}(., X(T0_j)) toward the market types."""
    fills = history.events == LIQUIDATOR
    src = params.index_of(LIQUIDATOR)
    cols = [params.index_of(e) for e in MARKET_EVENT_TYPES]
    states = history.states[fills]
    return history.times[fills], params.alpha[src][states][:, cols], params.beta[src][states][:, cols]


def impact_intensities(params: HawkesParams,
                       transitions: TransitionMatrices,
                       history: EventHistory,
                       ts: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Dir(t) and Indir(t) at each time in ts."""
    _require_liquidator_model(params, transitions)
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    states = history.states_at(ts)
    lam0 = intensities_at_times(params, history, ts)[:, params.index_of(LIQUIDATOR)]
    direct = _deflationary_mass(transitions, states) * lam0

    times, alpha, beta = _fill_kernels(params, history)
    kernels = lagged_power_sums(times, alpha, beta, ts)
    indirect = (kernels * _price_move_weights(transitions, states)).sum(axis=1)
    return direct, indirect


def dir_intensity(params: HawkesParams, transitions: TransitionMatrices, history: EventHistory, t: float) -> float:
    """Intensity of liquidator fills landing in a deflationary state."""
    return float(impact_intensities(params, transitions, history, [t])[0][0])


def indir_intensity(params: HawkesParams, transitions: TransitionMatrices, history: EventHistory, t: float) -> float:
    """Market reaction to past liquidator fills, signed towards price decreases."""
    return float(impact_intensities(params, transitions, history, [t])[1][0])


def integrate_impact(params: HawkesParams,
                     transitions: TransitionMatrices,
                     history: EventHistory,
                     start: float,
                     ts: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Exact integrals of Dir and Indir over [start, t] for each t in ts.

    Between consecutive events the state is constant, so each kernel term
    integrates in closed form.
    """
    _require_liquidator_model(params, transitions)
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(ts < start):
        raise InputError("profile times must not precede the liquidation start")
    if ts.size == 0:
        return np.empty(0), np.empty(0)

    end = float(ts.max())
    inner = history.times[(history.times > start) & (history.times < end)]
    window_end = history.liquidation_window[1]
    extra = [window_end] if start < window_end < end else []
    knots = np.unique(np.concatenate(([start], inner, extra, ts)))

    lam0_integral = compensator_at_times(params, history, knots)[:, params.index_of(LIQUIDATOR)]
    times, alpha, beta = _fill_kernels(params, history)
    kernel_integral = integrated_power_sums(times, alpha, beta, knots)

    states = history.states_at(0.5 * (knots[:-1] + knots[1:]))
    dir_steps = _deflationary_mass(transitions, states) * np.diff(lam0_integral)
    indir_steps = (_price_move_weights(transitions, states) * np.diff(kernel_integral, axis=0)).sum(axis=1)

    positions = np.searchsorted(knots, ts)
    dir_cum = np.concatenate(([0.0], np.cumsum(dir_steps)))
    indir_cum = np.concatenate(([0.0], np.cumsum(indir_steps)))
    return dir_cum[positions], indir_cum[positions]


# ---------------------------------------------------------------------------
# Profile
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ImpactProfile:
    """Impact profile of one liquidation path, sampled at its breakpoints."""
    breakpoints: np.ndarray
    values: np.ndarray
    dir_series: np.ndarray
    indir_series: np.ndarray
    inventory: np.ndarray
    midprice_proxy: np.ndarray
    start_time: float
    termination_time: Optional[float]
    horizon: float
    score: float
    liquidation: LiquidationConfig
    params: HawkesParams
    transitions: TransitionMatrices
    history: EventHistory
    n_fills: int = 0
    flags: List[Flag] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.termination_time is not None

    @property
    def phi0(self) -> np.ndarray:
        return self.transitions.for_event(LIQUIDATOR)

    @property
    def maximum(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    def values_at(self, ts: Sequence[float]) -> np.ndarray:
        """Exact profile values at arbitrary times in [t0, horizon]."""
        direct, indirect = integrate_impact(self.params, self.transitions, self.history, self.start_time, ts)
        return direct + indirect

    def value_at(self, t: float) -> float:
        return float(self.values_at([t])[0])

    def transient(self) -> Tuple[np.ndarray, np.ndarray]:
        """Breakpoints and profile values from the termination time on."""
        if not self.completed:
            return np.empty(0), np.empty(0)
        mask = self.breakpoints >= self.termination_time
        return self.breakpoints[mask], self.values[mask]

    def rows(self) -> List[Dict[str, float]]:
        return [
            {
                'time': float(t),
                'dir': float(d),
                'indir': float(i),
                'profile': float(p),
                'inventory': float(q),
                'midprice_proxy': float(m),
            }
            for t, d, i, p, q, m in zip(self.breakpoints, self.dir_series, self.indir_series,
                                         self.values, self.inventory, self.midprice_proxy)
        ]

    def summary(self) -> Dict[str, Any]:
        data: Dict[str, Any] = dict(self.liquidation.to_dict())
        data.update({
            'tau': self.termination_time,
            'score': self.score,
            'converged': self.completed,
            'n_fills': self.n_fills,
            'phi0': self.phi0.tolist(),
            'flags': [f.to_dict() for f in self.flags],
        })
        return data

    def write_csv(self, path: Union[str, Path], header: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            write_header_block(f, header)
            writer = csv.DictWriter(f, fieldnames=['time', 'dir', 'indir', 'profile', 'inventory', 'midprice_proxy'])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) for k, v in row.items()})
        return path


def _inventory_at(history: EventHistory, liquidation: LiquidationConfig,
                  fill_sizes: Optional[Sequence[float]], ts: np.ndarray) -> np.ndarray:
    if fill_sizes is None:
        return np.full(ts.size, np.nan)
    fill_times = history.times_of(LIQUIDATOR)
    cumulative = np.concatenate(([0.0], np.cumsum(np.asarray(fill_sizes, dtype=float))))
    idx = np.searchsorted(fill_times, ts, side='right')
    return np.maximum(liquidation.initial_inventory - cumulative[idx], 0.0)


def impact_profile(params: HawkesParams,
                   transitions: TransitionMatrices,
                   history: EventHistory,
                   liquidation: LiquidationConfig,
                   horizon: float,
                   fill_sizes: Optional[Sequence[float]] = None,
                   transient_window_factor: Optional[float] = None,
                   tick_size: int = 100,
                   recorder: Optional[FlagRecorder] = None) -> ImpactProfile:
    """Profile t -> integral of Dir + Indir from t0, pinned at 0 in t0.

    Market-only parameters are extended with the liquidator, and phi0 is
    estimated from the history's own fills when transitions carry no phi0.
    The score divides the profile maximum by tau - t0, or by horizon - t0 when
    the inventory was not exhausted.
    """
    local = FlagRecorder()
    t0 = liquidation.start_time
    if horizon < t0:
        raise InputError(f"horizon {horizon} precedes the liquidation start {t0}")
    if not params.has_liquidator:
        params = params.with_liquidator(liquidation.base_rate, liquidation.clustering_rate)

    fills = int(np.sum(history.events == LIQUIDATOR))
    if transitions.d_E == 4:
        if fills:
            estimate = estimate_phi0(history, params.d_S, local)
            phi0 = estimate.phi0
        else:
            phi0 = np.eye(params.d_S)
            local.flag('impact', 'no_liquidator_activity', "no liquidator fills; phi0 set to identity")
        transitions = transitions.with_phi0(phi0)
    _require_liquidator_model(params, transitions)

    tau_end = history.liquidation_window[1]
    tau = float(tau_end) if math.isfinite(tau_end) else None
    history = EventHistory(history.times, history.events, history.states, history.initial_state, (t0, tau_end))

    end = float(horizon)
    if tau is None:
        local.flag('impact', 'incomplete', f"inventory not exhausted by the horizon {horizon}; profile truncated",
                   horizon=horizon)
    elif tau > horizon:
        local.flag('impact', 'truncated', f"horizon {horizon} precedes the termination time {tau}", tau=tau)
    elif transient_window_factor is not None:
        end = min(end, tau + transient_window_factor * (tau - t0))

    inner = history.times[(history.times > t0) & (history.times < end)]
    extra = [tau] if tau is not None and t0 < tau < end else []
    breakpoints = np.unique(np.concatenate(([t0], inner, extra, [end])))
    direct_int, indirect_int = integrate_impact(params, transitions, history, t0, breakpoints)
    values = direct_int + indirect_int
    direct, indirect = impact_intensities(params, transitions, history, breakpoints)

    duration = (tau if tau is not None and tau <= horizon else end) - t0
    if duration > 0:
        score = float(values.max() / duration)
    else:
        score = 0.0
        local.flag('impact', 'zero_duration', "liquidation has zero duration; score set to 0")

    moves = [(float(t), StateVariable.from_index(int(x), params.d_S // 3).x1)
             for t, x in zip(history.times, history.states)]
    proxy = mid_price_proxy(0.0, tick_size, moves).values_at(breakpoints)

    return ImpactProfile(
        breakpoints=breakpoints,
        values=values,
        dir_series=direct,
        indir_series=indirect,
        inventory=_inventory_at(history, liquidation, fill_sizes, breakpoints),
        midprice_proxy=proxy,
        start_time=t0,
        termination_time=tau,
        horizon=end,
        score=score,
        liquidation=liquidation,
        params=params,
        transitions=transitions,
        history=history,
        n_fills=fills,
        flags=_collect(recorder, local)
    )


def _collect(recorder: Optional[FlagRecorder], local: FlagRecorder) -> List[Flag]:
    if recorder is not None:
        recorder.extend(local.flag_history)
    return list(local.flag_history)


@dataclass(frozen=True)
class IdentityCheck:
    max_discrepancy: float
    direct_difference: np.ndarray
    decomposition: np.ndarray


def impact_identity_check(params: HawkesParams,
                          transitions: TransitionMatrices,
                          history: EventHistory,
                          sample_times: Sequence[float]) -> IdentityCheck:
    """Compare lambda^- - lambda^+ from direct hybrid-intensity sums with Dir + Indir."""
    _require_liquidator_model(params, transitions)
    ts = np.atleast_1d(np.asarray(sample_times, dtype=float))
    K = params.d_S // 3
    minus, plus = deflationary_states(K), inflationary_states(K)
    states = history.states_at(ts)
    intensities = intensities_at_times(params, history, ts)

    difference = np.zeros(ts.size)
    for label in params.labels:
        rows = transitions.for_event(label)[states]
        weight = rows[:, minus].sum(axis=1) - rows[:, plus].sum(axis=1)
        difference += weight * intensities[:, params.index_of(label)]

    direct, indirect = impact_intensities(params, transitions, history, ts)
    decomposition = direct + indirect
    gap = float(np.max(np.abs(difference - decomposition))) if ts.size else 0.0
    return IdentityCheck(gap, difference, decomposition)


# ---------------------------------------------------------------------------
# Price symmetry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetryReport:
    passed: bool
    max_violation: float
    violations: Dict[str, float]
    tolerance: float


def _check_maps(sigma_E: Dict[int, int], sigma_S: Dict[int, int], K: int) -> None:
    if sorted(sigma_E) != list(MARKET_EVENT_TYPES) or sorted(sigma_E.values()) != list(MARKET_EVENT_TYPES):
        raise InputError(f"event map must permute {MARKET_EVENT_TYPES}, got {sigma_E}")
    plus = set(inflationary_states(K).tolist())
    minus = set(deflationary_states(K).tolist())
    if set(sigma_S) != plus or set(sigma_S.values()) != minus or len(set(sigma_S.values())) != len(sigma_S):
        raise InputError("state map must be a bijection from inflationary onto deflationary states")


def check_price_symmetry(params: HawkesParams,
                         transitions: TransitionMatrices,
                         sigma_E: Optional[Dict[int, int]] = None,
                         sigma_S: Optional[Dict[int, int]] = None,
                         tolerance: float = 1e-12) -> SymmetryReport:
    """Check the sufficient conditions for price symmetry.

    phi_e(y, x) = phi_sigma(e)(y, sigma_S(x)) on inflationary x,
    nu_e = nu_sigma(e), and equal kernels toward e and sigma(e) from every source.
    """
    market = params.market_only()
    phi = transitions.market_only()
    K = market.d_S // 3
    sigma_E = dict(sigma_E or CANONICAL_EVENT_PERMUTATION)
    sigma_S = dict(sigma_S or reflection_map(K))
    _check_maps(sigma_E, sigma_S, K)

    plus = np.array(sorted(sigma_S))
    image = np.array([sigma_S[x] for x in plus])
    transition_gap = nu_gap = kernel_gap = 0.0
    for e, e_image in sigma_E.items():
        i, j = market.index_of(e), market.index_of(e_image)
        transition_gap = max(transition_gap, float(np.max(np.abs(
            phi.for_event(e)[:, plus] - phi.for_event(e_image)[:, image]))))
        nu_gap = max(nu_gap, abs(float(market.nu[i] - market.nu[j])))
        kernel_gap = max(kernel_gap,
                         float(np.max(np.abs(market.alpha[:, :, i] - market.alpha[:, :, j]))),
                         float(np.max(np.abs(market.beta[:, :, i] - market.beta[:, :, j]))))

    violations = {'transitions': transition_gap, 'base_rates': nu_gap, 'kernels': kernel_gap}
    worst = max(violations.values())
    return SymmetryReport(worst <= tolerance, worst, violations, tolerance)


def symmetrise(params: HawkesParams,
               transitions: TransitionMatrices,
               sigma_E: Optional[Dict[int, int]] = None,
               sigma_S: Optional[Dict[int, int]] = None) -> Tuple[HawkesParams, TransitionMatrices]:
    """Average every parameter with its image under (sigma_E, sigma_S); the result is price-symmetric.

    sigma_E must be an involution. Liquidator entries are left untouched.
    """
    K = params.d_S // 3
    sigma_E = dict(sigma_E or CANONICAL_EVENT_PERMUTATION)
    sigma_S = dict(sigma_S or reflection_map(K))
    _check_maps(sigma_E, sigma_S, K)
    if any(sigma_E[sigma_E[e]] != e for e in sigma_E):
        raise InputError("symmetrisation needs an involutive event map")

    nu, alpha, beta = params.nu.copy(), params.alpha.copy(), params.beta.copy()
    phi = transitions.phi.copy()
    neutral = neutral_states(K)
    for e, e_image in sigma_E.items():
        i, j = params.index_of(e), params.index_of(e_image)
        nu[i] = 0.5 * (params.nu[i] + params.nu[j])
        alpha[:, :, i] = 0.5 * (params.alpha[:, :, i] + params.alpha[:, :, j])
        beta[:, :, i] = 0.5 * (params.beta[:, :, i] + params.beta[:, :, j])

        a, b = transitions.labels.index(e), transitions.labels.index(e_image)
        for x, z in sigma_S.items():
            paired = 0.5 * (transitions.phi[a][:, x] + transitions.phi[b][:, z])
            phi[a][:, x] = paired
            phi[b][:, z] = paired
        phi[a][:, neutral] = 0.5 * (transitions.phi[a][:, neutral] + transitions.phi[b][:, neutral])

    return HawkesParams(nu, alpha, beta), TransitionMatrices(phi, dict(transitions.unvisited_rows))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LiquidationPath:
    """Outcome of one simulated liquidation, profile sampled on a common grid."""
    profile: ImpactProfile
    grid_values: np.ndarray
    score: float
    termination_time: Optional[float]
    completed: bool
    n_fills: int


def run_liquidation_path(model: ModelBundle,
                         liquidation: LiquidationConfig,
                         horizon: float,
                         seed: Union[int, np.random.SeedSequence, np.random.Generator, None],
                         grid: Optional[np.ndarray] = None,
                         simulation: Optional[SimulationConfig] = None,
                         initial_state: Optional[int] = None,
                         tick_size: int = 100) -> LiquidationPath:
    """Simulate a liquidation, estimate phi0 from it and profile its impact."""
    simulation = simulation or SimulationConfig()
    run = simulate_with_liquidator(
        model.params, model.transitions.market_only(), liquidation, model.gamma, horizon,
        rng_seed=seed,
        initial_state=initial_state,
        tail_tolerance=simulation.kernel_tail_tolerance,
        rejection_budget=simulation.rejection_budget
    )
    profile = impact_profile(
        run.params, model.transitions.market_only(), run.history, liquidation, horizon,
        fill_sizes=[f.size for f in run.fills],
        transient_window_factor=simulation.transient_window_factor,
        tick_size=tick_size
    )
    grid_values = profile.values_at(grid) if grid is not None else profile.values
    return LiquidationPath(profile, grid_values, profile.score, run.termination_time, run.completed, len(run.fills))


@dataclass(eq=False)
class MonteCarloSummary:
    """Pointwise profile bands across paths plus score statistics."""
    grid: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray
    scores: np.ndarray
    termination_times: np.ndarray
    batch: BatchSummary
    results: List[PathResult]
    paths: List[LiquidationPath]
    liquidation: LiquidationConfig

    @property
    def mean_score(self) -> float:
        return float(self.scores.mean())

    @property
    def sd_score(self) -> float:
        return float(self.scores.std(ddof=1)) if self.scores.size > 1 else 0.0

    @property
    def completion_rate(self) -> float:
        return float(np.mean([p.completed for p in self.paths]))

    @property
    def mean_phi0(self) -> np.ndarray:
        """Element-wise mean of the per-path phi0 estimates."""
        return np.mean([p.profile.phi0 for p in self.paths], axis=0)

    def to_dict(self, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'schema_version': SUMMARY_SCHEMA_VERSION,
            **self.liquidation.to_dict(),
            'n_paths': int(self.scores.size),
            'failed_paths': self.batch.failed_paths,
            'mean_score': self.mean_score,
            'sd_score': self.sd_score,
            'completion_rate': self.completion_rate,
            'mean_tau': float(self.termination_times.mean()) if self.termination_times.size else None,
            'phi0': self.mean_phi0.tolist(),
        }
        if meta:
            data['meta'] = meta
        return data

    def write_quantiles_csv(self, path: Union[str, Path], header: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            write_header_block(f, header)
            writer = csv.writer(f)
            writer.writerow(['time', 'median', 'q25', 'q75', 'mean'])
            for row in zip(self.grid, self.median, self.lower, self.upper, self.mean):
                writer.writerow([repr(float(v)) for v in row])
        return path


def monte_carlo_profiles(model: ModelBundle,
                         liquidation: LiquidationConfig,
                         n_paths: int,
                         horizon: float,
                         seeds: Union[int, Sequence[int], None] = 0,
                         simulation: Optional[SimulationConfig] = None,
                         progress_callback: Optional[Callable[[int, int, str], None]] = None,
                         initial_state: Optional[int] = None) -> MonteCarloSummary:
    """Median and quartile trajectories of the impact profile on a common time grid."""
    if n_paths < 2:
        raise InputError(f"Monte Carlo profiles need at least 2 paths, got {n_paths}")
    simulation = simulation or SimulationConfig()
    grid = np.linspace(liquidation.start_time, horizon, max(simulation.grid_size, 2))

    def runner(index: int, seed: np.random.SeedSequence) -> LiquidationPath:
        return run_liquidation_path(model, liquidation, horizon, np.random.default_rng(seed), grid,
                                    simulation, initial_state)

    processor = PathBatchProcessor(runner, workers=simulation.workers)
    if progress_callback:
        processor.set_progress_callback(progress_callback)
    batch = processor.run(path_seeds(seeds, n_paths))
    paths = processor.ordered_outcomes()
    if not paths:
        raise ModelError(f"all {n_paths} paths failed: {batch.errors[0] if batch.errors else 'unknown error'}")

    stacked = np.vstack([p.grid_values for p in paths])
    lower, median, upper = np.quantile(stacked, [0.25, 0.5, 0.75], axis=0)
    return MonteCarloSummary(
        grid=grid,
        median=median,
        lower=lower,
        upper=upper,
        mean=stacked.mean(axis=0),
        scores=np.array([p.score for p in paths]),
        termination_times=np.array([p.termination_time for p in paths if p.termination_time is not None]),
        batch=batch,
        results=processor.results,
        paths=paths,
        liquidation=liquidation
    )


# ---------------------------------------------------------------------------
# Stress harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StressRow:
    shock: float
    mean_score: float
    sd_score: float
    relative_change: Optional[float]
    completion_rate: float
    beta_clamped: bool


@dataclass
class StressReport:
    rows: List[StressRow]
    n_paths: int
    liquidation: LiquidationConfig
    flags: List[Flag] = field(default_factory=list)

    def to_dict(self, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'schema_version': SUMMARY_SCHEMA_VERSION,
            'scenario': self.liquidation.to_dict(),
            'n_paths': self.n_paths,
            'shocks': [row.__dict__ for row in self.rows],
            'flags': [f.to_dict() for f in self.flags],
        }
        if meta:
            data['meta'] = meta
        return data

    def write_json(self, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(meta), f, indent=2)
        return path


def stress_scores(model: ModelBundle,
                  liquidation: LiquidationConfig,
                  shocks: Sequence[float],
                  n_paths: int,
                  horizon: float,
                  seed: int = 0,
                  simulation: Optional[SimulationConfig] = None,
                  progress_callback: Optional[Callable[[int, int, str], None]] = None,
                  recorder: Optional[FlagRecorder] = None) -> StressReport:
    """Mean and sd of impact scores under joint multiplicative shocks of nu, alpha and beta.

    Every shock reuses the same path seeds; the unshocked baseline is always included.
    """
    local = FlagRecorder()
    grid = sorted(set(float(s) for s in shocks) | {0.0})
    outcomes: Dict[float, Tuple[MonteCarloSummary, bool]] = {}

    for shock in grid:
        params, clamped = model.params.shocked(shock)
        if clamped:
            local.flag('stress', 'beta_clamped', f"shock {shock:+.2%} pushed some beta to 1; clamped", shock=shock)
        shocked = ModelBundle(params, model.transitions, model.gamma, model.n, model.K)
        logger.info(f"📈 Stress shock {shock:+.2%}")
        summary = monte_carlo_profiles(shocked, liquidation, n_paths, horizon, seed, simulation, progress_callback)
        outcomes[shock] = (summary, clamped)

    baseline = outcomes[0.0][0].mean_score
    rows = []
    for shock in grid:
        summary, clamped = outcomes[shock]
        change = (summary.mean_score - baseline) / baseline if baseline != 0 else None
        rows.append(StressRow(shock, summary.mean_score, summary.sd_score, change,
                              summary.completion_rate, clamped))
    return StressReport(rows, n_paths, liquidation, _collect(recorder, local))
