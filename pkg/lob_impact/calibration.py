#!/usr/bin/env python3
"""
Maximum-Likelihood Calibration

Empirical transition matrices, the intensity log-likelihood with its analytic
gradient, per-target-type Hawkes fits, Dirichlet fits of normalised volumes and
time-change residual diagnostics.
"""

import csv
import json
import logging
import time
from fractions import Fraction
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, special, stats

from .config import CalibrationConfig
from .error_handler import Flag, FlagRecorder, InputError, ModelError
from .lob_model import DirichletParams
from .hawkes_engine import (
    LIQUIDATOR,
    MARKET_EVENT_TYPES,
    PAIRWISE_BLOCK,
    EventHistory,
    HawkesParams,
    TransitionMatrices,
    compensator_at_times,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
NU_FLOOR = float(np.finfo(float).tiny)
LOG_PARAM_MIN = -40.0
LOG_PARAM_MAX = 20.0
STALL_WINDOW = 50
DIVERGENCE_CAP = 1e8


def _collect(recorder: Optional[FlagRecorder], local: FlagRecorder) -> List[Flag]:
    if recorder is not None:
        recorder.extend(local.flag_history)
    return list(local.flag_history)


# ---------------------------------------------------------------------------
# Transition matrices
# ---------------------------------------------------------------------------

def empirical_transition_rows(before: np.ndarray, after: np.ndarray, d_S: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Row-normalised transition counts; rows without observations stay in place.

    Counts are normalised as exact fractions before conversion to floats.
    """
    counts = np.zeros((d_S, d_S), dtype=np.int64)
    np.add.at(counts, (np.asarray(before, dtype=np.int64), np.asarray(after, dtype=np.int64)), 1)
    matrix = np.zeros((d_S, d_S))
    missing = []
    for row in range(d_S):
        total = int(counts[row].sum())
        if total == 0:
            matrix[row, row] = 1.0
            missing.append(row)
            continue
        matrix[row] = [float(Fraction(int(c), total)) for c in counts[row]]
    return matrix, tuple(missing)


def estimate_transitions(history: EventHistory,
                         d_S: int,
                         labels: Sequence[int] = MARKET_EVENT_TYPES,
                         recorder: Optional[FlagRecorder] = None) -> TransitionMatrices:
    """Empirical frequencies of (pre-event state -> post-event state) per event type.

    Rows never visited by an event type fall back to staying in place.
    """
    local = FlagRecorder()
    labels = tuple(labels)
    d_E = len(labels)
    if np.any(history.states >= d_S) or np.any(history.states < 0):
        raise InputError(f"history holds states outside [0, {d_S})")

    before = history.pre_event_states()
    phi = np.zeros((d_E, d_S, d_S))
    unvisited: Dict[int, Tuple[int, ...]] = {}
    for pos, label in enumerate(labels):
        mask = history.events == label
        phi[pos], missing = empirical_transition_rows(before[mask], history.states[mask], d_S)
        if missing:
            unvisited[label] = tuple(missing)
            local.flag('calibration', 'identity_row',
                       f"event {label}: {len(missing)} unvisited rows set to identity",
                       event_type=label, rows=missing)

    _collect(recorder, local)
    return TransitionMatrices(phi, unvisited)


# ---------------------------------------------------------------------------
# Intensity log-likelihood
# ---------------------------------------------------------------------------

@dataclass
class _LikelihoodData:
    """Flattened history: per-event time and source-pair index (source type, source state)."""
    times: np.ndarray
    pairs: np.ndarray
    events: np.ndarray
    horizon: float
    d_E: int
    d_S: int
    window: Optional[float] = None

    @classmethod
    def build(cls, history: EventHistory, horizon: float, labels: Tuple[int, ...], d_S: int,
              window: Optional[float] = None) -> '_LikelihoodData':
        if len(history) and history.times[-1] > horizon:
            raise InputError(f"history extends beyond the horizon {horizon}")
        if len(history) and history.times[0] < 0:
            raise InputError("history times must be non-negative")
        lookup = np.full(5, -1, dtype=np.int64)
        lookup[list(labels)] = np.arange(len(labels))
        src = lookup[history.events]
        if np.any(src < 0):
            raise InputError(f"history holds event types outside {labels}")
        if np.any(history.states >= d_S):
            raise InputError(f"history holds states outside [0, {d_S})")
        return cls(
            times=history.times,
            pairs=src * d_S + history.states,
            events=history.events,
            horizon=float(horizon),
            d_E=len(labels),
            d_S=d_S,
            window=window
        )

    @property
    def n_pairs(self) -> int:
        return self.d_E * self.d_S


@dataclass
class _TargetTerms:
    value: float
    grad_nu: float
    grad_alpha: np.ndarray
    grad_beta: np.ndarray
    zero_intensity_event: Optional[int] = None


def _target_terms(data: _LikelihoodData, label: int, nu: float,
                  alpha: np.ndarray, beta: np.ndarray) -> _TargetTerms:
    """Log-likelihood of one target type and its gradient in (nu, alpha, beta).

    alpha and beta are flat over source pairs toward the target.
    """
    P = data.n_pairs
    times, pairs = data.times, data.pairs
    N = times.size
    queries = np.flatnonzero(data.events == label)

    value = 0.0
    grad_nu = 0.0
    g_events = np.zeros(N)
    h_events = np.zeros(N)
    a_src = alpha[pairs]
    b_src = beta[pairs]

    span = N
    if data.window is not None and N:
        span = int(np.searchsorted(times, times[0] + data.window))
    rows = max(1, PAIRWISE_BLOCK // max(span, 1))
    for start in range(0, queries.size, rows):
        q = queries[start:start + rows]
        hi = int(q[-1])
        lo = 0 if data.window is None else int(np.searchsorted(times, times[q[0]] - data.window, side='left'))
        lam = np.full(q.size, nu)
        if hi > lo:
            lag = times[q, None] - times[None, lo:hi]
            mask = lag > 0
            if data.window is not None:
                mask &= lag <= data.window
            log_base = np.log1p(np.where(mask, lag, 0.0))
            powers = np.exp(-b_src[None, lo:hi] * log_base) * mask
            lam = lam + powers @ a_src[lo:hi]
        bad = np.flatnonzero(~(lam > 0))
        if bad.size:
            index = int(q[bad[0]])
            return _TargetTerms(-np.inf, np.nan, np.full(P, np.nan), np.full(P, np.nan), index)
        value += float(np.log(lam).sum())
        weights = 1.0 / lam
        grad_nu += float(weights.sum())
        if hi > lo:
            g_events[lo:hi] += weights @ powers
            h_events[lo:hi] += weights @ (powers * log_base)

    # compensator over [0, horizon]
    value -= nu * data.horizon
    grad_nu -= data.horizon
    grad_alpha = np.bincount(pairs, weights=g_events, minlength=P)
    grad_beta = -np.bincount(pairs, weights=a_src * h_events, minlength=P)
    if N:
        u = data.horizon - times + 1.0
        b1 = b_src - 1.0
        tail = np.exp(-b1 * np.log(u))
        integral = (1.0 - tail) / b1
        d_integral = (tail * np.log(u) * b1 - (1.0 - tail)) / b1 ** 2
        value -= float(np.dot(a_src, integral))
        grad_alpha -= np.bincount(pairs, weights=integral, minlength=P)
        grad_beta -= np.bincount(pairs, weights=a_src * d_integral, minlength=P)

    return _TargetTerms(value, grad_nu, grad_alpha, grad_beta)


@dataclass
class LikelihoodResult:
    """Intensity log-likelihood with per-type values and the analytic gradient."""
    value: float
    per_type: Dict[int, float]
    grad_nu: Optional[np.ndarray] = None
    grad_alpha: Optional[np.ndarray] = None
    grad_beta: Optional[np.ndarray] = None
    zero_intensity_event: Optional[int] = None

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.value))


def log_likelihood(params: HawkesParams,
                   history: EventHistory,
                   horizon: float,
                   targets: Optional[Sequence[int]] = None,
                   tail_tolerance: Optional[float] = None) -> LikelihoodResult:
    """Sum over target types of sum log lambda_e(T_n) - Lambda_e(horizon).

    The transition part of the likelihood is maximised separately by
    estimate_transitions. A zero intensity at an observed event gives -inf and
    names the event index.
    """
    labels = params.labels
    targets = tuple(t for t in labels if t != LIQUIDATOR) if targets is None else tuple(targets)
    if LIQUIDATOR in targets:
        raise InputError("the liquidator intensity is not part of the market likelihood")

    data = _LikelihoodData.build(history, horizon, labels, params.d_S, params.tail_window(tail_tolerance))
    d_E, d_S = params.d_E, params.d_S
    grad_nu = np.zeros(d_E)
    grad_alpha = np.zeros(params.alpha.shape)
    grad_beta = np.zeros(params.beta.shape)
    per_type: Dict[int, float] = {}

    for label in targets:
        j = params.index_of(label)
        terms = _target_terms(data, label, params.nu[j],
                              params.alpha[:, :, j].reshape(-1), params.beta[:, :, j].reshape(-1))
        if terms.zero_intensity_event is not None:
            logger.warning(f"⚠️ Zero intensity for event type {label} at event index {terms.zero_intensity_event}")
            per_type[label] = -np.inf
            return LikelihoodResult(-np.inf, per_type, zero_intensity_event=terms.zero_intensity_event)
        per_type[label] = terms.value
        grad_nu[j] = terms.grad_nu
        grad_alpha[:, :, j] = terms.grad_alpha.reshape(d_E, d_S)
        grad_beta[:, :, j] = terms.grad_beta.reshape(d_E, d_S)

    return LikelihoodResult(
        value=float(sum(per_type.values())),
        per_type=per_type,
        grad_nu=grad_nu,
        grad_alpha=grad_alpha,
        grad_beta=grad_beta
    )


# ---------------------------------------------------------------------------
# Hawkes fit
# ---------------------------------------------------------------------------

@dataclass
class _TargetFit:
    label: int
    nu: float
    alpha: np.ndarray
    beta: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    restart: int
    zero_events: bool = False


class _TargetObjective:
    """Log-likelihood of one target type in log-space coordinates (u, v, w)."""

    def __init__(self, data: _LikelihoodData, label: int, beta_max: float):
        self.data = data
        self.label = label
        self.P = data.n_pairs
        self.lower = np.full(1 + 2 * self.P, LOG_PARAM_MIN)
        self.upper = np.full(1 + 2 * self.P, LOG_PARAM_MAX)
        self.upper[1 + self.P:] = np.log(beta_max - 1.0)
        self.evaluations = 0

    def unpack(self, theta: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        P = self.P
        return float(np.exp(theta[0])), np.exp(theta[1:1 + P]), 1.0 + np.exp(theta[1 + P:])

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        self.evaluations += 1
        nu, alpha, beta = self.unpack(theta)
        terms = _target_terms(self.data, self.label, nu, alpha, beta)
        if terms.zero_intensity_event is not None:
            return -np.inf, np.zeros_like(theta)
        grad = np.concatenate((
            [terms.grad_nu * nu],
            terms.grad_alpha * alpha,
            terms.grad_beta * (beta - 1.0)
        ))
        return terms.value, grad

    def project(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def projected_gradient(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        pg = grad.copy()
        pg[(theta >= self.upper) & (grad > 0)] = 0.0
        pg[(theta <= self.lower) & (grad < 0)] = 0.0
        return pg


def _gradient_ascent(objective: _TargetObjective, theta: np.ndarray,
                     config: CalibrationConfig) -> Tuple[np.ndarray, float, bool, int]:
    """Projected gradient ascent with Armijo backtracking; every accepted step increases the objective."""
    theta = objective.project(theta)
    value, grad = objective(theta)
    if not np.isfinite(value):
        return theta, value, False, 0
    step = 1.0 / max(1.0, float(np.max(np.abs(grad))))

    for iteration in range(1, config.max_iterations + 1):
        direction = objective.projected_gradient(theta, grad)
        if np.max(np.abs(direction)) < config.gradient_tolerance:
            return theta, value, True, iteration - 1

        accepted = False
        while step > 1e-20:
            candidate = objective.project(theta + step * direction)
            new_value, new_grad = objective(candidate)
            gain = float(np.dot(grad, candidate - theta))
            if np.isfinite(new_value) and new_value > value and new_value >= value + config.armijo_c * gain:
                accepted = True
                break
            step *= 0.5

        if not accepted:
            logger.debug(f"Line search stalled for type {objective.label} at iteration {iteration}")
            return theta, value, False, iteration
        theta, value, grad = candidate, new_value, new_grad
        step *= 2.0
        if iteration % 500 == 0:
            logger.debug(f"type {objective.label} iter {iteration}: loglik={value:.6f}")

    direction = objective.projected_gradient(theta, grad)
    return theta, value, bool(np.max(np.abs(direction)) < config.gradient_tolerance), config.max_iterations


def _lbfgs(objective: _TargetObjective, theta: np.ndarray,
           config: CalibrationConfig) -> Tuple[np.ndarray, float, bool, int]:
    def negative(x):
        value, grad = objective(x)
        if not np.isfinite(value):
            return np.inf, np.zeros_like(x)
        return -value, -grad

    result = optimize.minimize(
        negative, objective.project(theta), jac=True, method='L-BFGS-B',
        bounds=list(zip(objective.lower, objective.upper)),
        options={'maxiter': config.max_iterations, 'gtol': config.gradient_tolerance}
    )
    return result.x, -float(result.fun), bool(result.success), int(result.nit)


def _fit_target(data: _LikelihoodData, label: int, config: CalibrationConfig) -> _TargetFit:
    P = data.n_pairs
    count = int(np.sum(data.events == label))
    if count == 0:
        return _TargetFit(label, NU_FLOOR, np.zeros(P), np.full(P, config.initial_beta),
                          -NU_FLOOR * data.horizon, True, 0, 0, zero_events=True)

    objective = _TargetObjective(data, label, config.beta_max)
    rng = np.random.default_rng([config.seed, label])
    base = np.concatenate((
        [np.log(count / data.horizon)],
        np.full(P, np.log(config.initial_alpha)),
        np.full(P, np.log(config.initial_beta - 1.0))
    ))
    solver = _lbfgs if config.method == 'lbfgs' else _gradient_ascent

    best: Optional[_TargetFit] = None
    for restart in range(config.restarts):
        theta0 = base.copy()
        if restart:
            theta0[0] += rng.normal(0.0, 0.2)
            theta0[1:] += rng.normal(0.0, 0.5, 2 * P)
        theta, value, converged, iterations = solver(objective, theta0, config)
        nu, alpha, beta = objective.unpack(theta)
        logger.debug(f"type {label} restart {restart}: loglik={value:.6f} converged={converged}")
        if best is None or value > best.log_likelihood:
            best = _TargetFit(label, nu, alpha, beta, value, converged, iterations, restart)
    return best


@dataclass
class FitResult:
    """Fitted Hawkes parameters with per-type convergence information."""
    params: HawkesParams
    log_likelihood: Dict[int, float]
    converged: Dict[int, bool]
    iterations: Dict[int, int]
    elapsed_seconds: float
    flags: List[Flag] = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return all(self.converged.values())

    @property
    def total_log_likelihood(self) -> float:
        return float(sum(self.log_likelihood.values()))


def fit_hawkes(history: EventHistory,
               horizon: float,
               d_S: int,
               config: Optional[CalibrationConfig] = None,
               recorder: Optional[FlagRecorder] = None,
               fit_order: Optional[Sequence[int]] = None) -> FitResult:
    """Maximum-likelihood fit of (nu, alpha, beta), one independent problem per target type.

    fit_order sets the order in which the per-type problems are submitted;
    the assembled parameters are the same for every permutation.
    """
    config = config or CalibrationConfig()
    if config.initial_beta <= 1 or config.initial_beta > config.beta_max:
        raise InputError("initial beta must lie in (1, beta_max]")
    if horizon <= 0:
        raise InputError(f"horizon must be positive, got {horizon}")
    local = FlagRecorder()
    labels = MARKET_EVENT_TYPES
    d_E = len(labels)
    order = labels if fit_order is None else tuple(int(label) for label in fit_order)
    if sorted(order) != sorted(labels):
        raise InputError(f"fit order {order} is not a permutation of {labels}")
    window = None
    if config.kernel_tail_tolerance is not None:
        # truncation window of the initial kernel shape
        window = HawkesParams(
            np.ones(d_E), np.full((d_E, d_S, d_E), config.initial_alpha), np.full((d_E, d_S, d_E), config.initial_beta)
        ).tail_window(config.kernel_tail_tolerance)
    data = _LikelihoodData.build(history, horizon, labels, d_S, window)

    logger.info(f"🚀 Fitting {d_E} event types on {len(history)} events (method={config.method}, "
                f"restarts={config.restarts})")
    start = time.time()
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as executor:
        by_label = dict(zip(order, executor.map(lambda label: _fit_target(data, label, config), order)))
    fits = [by_label[label] for label in labels]

    nu = np.empty(d_E)
    alpha = np.empty((d_E, d_S, d_E))
    beta = np.empty((d_E, d_S, d_E))
    for j, fit in enumerate(fits):
        nu[j] = fit.nu
        alpha[:, :, j] = fit.alpha.reshape(d_E, d_S)
        beta[:, :, j] = fit.beta.reshape(d_E, d_S)
        if fit.zero_events:
            local.flag('calibration', 'zero_events', f"event type {fit.label} never occurs; nu set to machine floor",
                       event_type=fit.label)
        elif not fit.converged:
            local.flag('calibration', 'not_converged',
                       f"event type {fit.label} stopped after {fit.iterations} iterations without converging",
                       event_type=fit.label, iterations=fit.iterations)

    elapsed = time.time() - start
    result = FitResult(
        params=HawkesParams(nu, alpha, beta),
        log_likelihood={f.label: f.log_likelihood for f in fits},
        converged={f.label: f.converged for f in fits},
        iterations={f.label: f.iterations for f in fits},
        elapsed_seconds=elapsed,
        flags=_collect(recorder, local)
    )
    status = "✅" if result.all_converged else "⚠️"
    logger.info(f"{status} Hawkes fit finished in {elapsed:.1f}s, log-likelihood {result.total_log_likelihood:.4f}")
    return result


# ---------------------------------------------------------------------------
# Dirichlet fit
# ---------------------------------------------------------------------------

def inverse_digamma(y: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Newton inversion of the digamma function."""
    y = np.asarray(y, dtype=float)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y + special.digamma(1.0)))
    for _ in range(iterations):
        x = x - (special.digamma(x) - y) / special.polygamma(1, x)
    return x


def _dirichlet_newton_step(gamma: np.ndarray, mean_log: np.ndarray) -> np.ndarray:
    """One Newton step on the per-sample Dirichlet log-likelihood."""
    total = gamma.sum()
    grad = special.digamma(total) - special.digamma(gamma) + mean_log
    q = -special.polygamma(1, gamma)
    z = special.polygamma(1, total)
    b = np.sum(grad / q) / (1.0 / z + np.sum(1.0 / q))
    delta = (grad - b) / q
    scale = 1.0
    while np.any(gamma - scale * delta <= 0) and scale > 1e-12:
        scale *= 0.5
    return gamma - scale * delta


@dataclass
class DirichletStateFit:
    gamma: np.ndarray
    converged: bool
    iterations: int
    samples: int
    method: str


def dirichlet_mle(samples: np.ndarray,
                  tolerance: float = 1e-8,
                  max_iterations: int = 10000) -> DirichletStateFit:
    """Fixed-point Dirichlet MLE on the digamma moment equations, with a Newton fallback on plateaus."""
    samples = np.asarray(samples, dtype=float)
    mean_log = np.log(samples).mean(axis=0)
    # moment-matching start
    mean = samples.mean(axis=0)
    second = (samples[:, 0] ** 2).mean()
    spread = (mean[0] - second) / max(second - mean[0] ** 2, 1e-12)
    gamma = mean * (spread if np.isfinite(spread) and spread > 0 else 1.0)
    gamma = np.maximum(gamma, 1e-3)

    method = "fixed-point"
    history: List[float] = []
    for iteration in range(1, max_iterations + 1):
        if method == "fixed-point":
            updated = inverse_digamma(special.digamma(gamma.sum()) + mean_log)
        else:
            updated = _dirichlet_newton_step(gamma, mean_log)
        if not np.all(np.isfinite(updated)) or updated.max() > DIVERGENCE_CAP:
            return DirichletStateFit(np.minimum(np.where(np.isfinite(updated), updated, gamma), DIVERGENCE_CAP),
                                     False, iteration, samples.shape[0], method)
        change = float(np.max(np.abs(updated - gamma)))
        gamma = updated
        if change < tolerance:
            return DirichletStateFit(gamma, True, iteration, samples.shape[0], method)

        history.append(change / max(1.0, float(gamma.max())))
        if method == "fixed-point" and len(history) > STALL_WINDOW:
            if history[-1] >= 0.999 * history[-1 - STALL_WINDOW]:
                method = "newton"
                logger.debug(f"Dirichlet fixed point stalled after {iteration} iterations; switching to Newton")

    return DirichletStateFit(gamma, False, max_iterations, samples.shape[0], method)


@dataclass
class DirichletFit:
    """Per-state Dirichlet concentrations with fit diagnostics."""
    params: DirichletParams
    converged: Dict[int, bool]
    samples: Dict[int, int]
    flags: List[Flag] = field(default_factory=list)


def fit_dirichlet(volumes: np.ndarray,
                  states: np.ndarray,
                  d_S: int,
                  config: Optional[CalibrationConfig] = None,
                  recorder: Optional[FlagRecorder] = None) -> DirichletFit:
    """Fit gamma(x) from normalised volume snapshots grouped by their flat state."""
    config = config or CalibrationConfig()
    local = FlagRecorder()
    volumes = np.asarray(volumes, dtype=float)
    states = np.asarray(states, dtype=np.int64).reshape(-1)
    if volumes.ndim != 2 or volumes.shape[1] % 2 or volumes.shape[0] != states.size:
        raise InputError(f"volumes must have shape (M, 2n) matching {states.size} states, got {volumes.shape}")
    if np.any(volumes < 0) or np.any(~np.isfinite(volumes)):
        raise InputError("volume snapshots must be finite and non-negative")

    width = volumes.shape[1]
    gamma = np.ones((d_S, width))
    converged: Dict[int, bool] = {}
    counts: Dict[int, int] = {}

    for state in range(d_S):
        rows = volumes[states == state]
        counts[state] = int(rows.shape[0])
        if rows.shape[0] < width + 1:
            converged[state] = False
            local.flag('calibration', 'dirichlet_fallback',
                       f"state {state}: {rows.shape[0]} snapshots, need {width + 1}; gamma set to ones",
                       state=state, samples=int(rows.shape[0]))
            continue
        if np.any(rows <= 0):
            local.flag('calibration', 'floored_volumes',
                       f"state {state}: zero components floored at {config.dirichlet_floor}",
                       state=state, rows=int(np.sum(np.any(rows <= 0, axis=1))))
            rows = np.maximum(rows, config.dirichlet_floor)
        rows = rows / rows.sum(axis=1, keepdims=True)

        fit = dirichlet_mle(rows, config.dirichlet_tolerance, config.dirichlet_max_iterations)
        gamma[state] = fit.gamma
        converged[state] = fit.converged
        if not fit.converged:
            local.flag('calibration', 'dirichlet_not_converged',
                       f"state {state}: Dirichlet MLE did not converge ({fit.method}, {fit.iterations} iterations)",
                       state=state)

    return DirichletFit(DirichletParams(gamma), converged, counts, _collect(recorder, local))


# ---------------------------------------------------------------------------
# Residual diagnostics
# ---------------------------------------------------------------------------

@dataclass
class TypeResiduals:
    """Time-changed inter-arrival times of one event type and their KS test against Exp(1)."""
    event_type: int
    residuals: np.ndarray
    ks_statistic: Optional[float]
    p_value: Optional[float]

    @property
    def skipped(self) -> bool:
        return self.ks_statistic is None

    def qq_points(self) -> Tuple[np.ndarray, np.ndarray]:
        """(empirical, theoretical) quantile pairs."""
        m = self.residuals.size
        empirical = np.sort(self.residuals)
        theoretical = stats.expon.ppf((np.arange(1, m + 1) - 0.5) / m) if m else np.empty(0)
        return empirical, theoretical

    def to_dict(self) -> Dict[str, Any]:
        return {
            'event_type': self.event_type,
            'count': int(self.residuals.size),
            'mean_residual': float(self.residuals.mean()) if self.residuals.size else None,
            'ks_statistic': self.ks_statistic,
            'p_value': self.p_value,
            'skipped': self.skipped,
        }


@dataclass
class ResidualDiagnostics:
    per_type: Dict[int, TypeResiduals]
    flags: List[Flag] = field(default_factory=list)

    def ks_table(self) -> List[Dict[str, Any]]:
        return [r.to_dict() for r in self.per_type.values()]

    def passes(self, level: float = 0.05) -> Dict[int, bool]:
        return {e: r.p_value > level for e, r in self.per_type.items() if not r.skipped}


def residual_diagnostics(params: HawkesParams,
                         history: EventHistory,
                         horizon: float,
                         min_events: int = 10,
                         recorder: Optional[FlagRecorder] = None) -> ResidualDiagnostics:
    """Residuals Lambda_e(T_j) - Lambda_e(T_{j-1}) per event type, starting from time 0."""
    local = FlagRecorder()
    if len(history) and history.times[-1] > horizon:
        raise InputError(f"history extends beyond the horizon {horizon}")
    per_type: Dict[int, TypeResiduals] = {}

    for label in params.labels:
        if label == LIQUIDATOR:
            continue
        times = history.times_of(label)
        column = params.index_of(label)
        compensator = compensator_at_times(params, history, np.concatenate(([0.0], times)))[:, column]
        residuals = np.diff(compensator)
        if residuals.size < min_events:
            local.flag('calibration', 'ks_skipped',
                       f"event type {label}: {residuals.size} events, KS needs {min_events}",
                       event_type=label, events=int(residuals.size))
            per_type[label] = TypeResiduals(label, residuals, None, None)
            continue
        test = stats.kstest(residuals, 'expon')
        per_type[label] = TypeResiduals(label, residuals, float(test.statistic), float(test.pvalue))

    return ResidualDiagnostics(per_type, _collect(recorder, local))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class CalibrationReport:
    """Fitted model plus diagnostics of one calibration run."""
    params: HawkesParams
    transitions: TransitionMatrices
    gamma: DirichletParams
    log_likelihood: Dict[int, float]
    converged: Dict[int, bool]
    diagnostics: ResidualDiagnostics
    n_events: int
    horizon: float
    flags: List[Flag] = field(default_factory=list)

    def to_dict(self, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'schema_version': REPORT_SCHEMA_VERSION,
            'n_events': self.n_events,
            'horizon': self.horizon,
            'log_likelihood': {str(k): v for k, v in self.log_likelihood.items()},
            'converged': {str(k): v for k, v in self.converged.items()},
            'kernel_norms': self.params.kernel_norms().tolist(),
            'norm_matrix': self.params.norm_matrix().tolist(),
            'spectral_radius': self.params.spectral_radius(),
            'ks': self.diagnostics.ks_table(),
            'unvisited_rows': {str(k): list(v) for k, v in self.transitions.unvisited_rows.items()},
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

    def write_residual_csv(self, path: Union[str, Path], header: Optional[Dict[str, Any]] = None) -> Path:
        return write_residual_csv(self.diagnostics, path, header)


def write_header_block(handle, header: Optional[Dict[str, Any]]) -> None:
    """'# key: value' comment lines opening every CSV output."""
    for key, value in (header or {}).items():
        handle.write(f"# {key}: {value}\n")


def write_residual_csv(diagnostics: ResidualDiagnostics,
                       path: Union[str, Path],
                       header: Optional[Dict[str, Any]] = None) -> Path:
    """QQ data: ordered residuals against Exp(1) quantiles."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        write_header_block(f, header)
        writer = csv.writer(f)
        writer.writerow(['event_type', 'index', 'residual', 'theoretical_quantile'])
        for label, entry in diagnostics.per_type.items():
            empirical, theoretical = entry.qq_points()
            for i, (r, q) in enumerate(zip(empirical, theoretical), start=1):
                writer.writerow([label, i, repr(float(r)), repr(float(q))])
    return path


def calibrate(history: EventHistory,
              horizon: float,
              volumes: np.ndarray,
              volume_states: np.ndarray,
              K: int,
              config: Optional[CalibrationConfig] = None,
              recorder: Optional[FlagRecorder] = None) -> CalibrationReport:
    """Full calibration: transitions, Hawkes kernels, Dirichlet volumes and residual diagnostics."""
    config = config or CalibrationConfig()
    local = FlagRecorder()
    d_S = 3 * K
    if len(history) == 0:
        raise InputError("cannot calibrate on an empty history")

    transitions = estimate_transitions(history, d_S, recorder=local)
    fit = fit_hawkes(history, horizon, d_S, config, recorder=local)
    dirichlet = fit_dirichlet(volumes, volume_states, d_S, config, recorder=local)
    diagnostics = residual_diagnostics(fit.params, history, horizon, config.ks_min_events, recorder=local)

    violation = transitions.sign_violation()
    if violation > 0:
        local.flag('calibration', 'sign_violation',
                   f"market orders move the mid-price against their side with mass {violation:.3e}",
                   mass=violation)

    logger.info(f"📊 Spectral radius heuristic of the fitted kernels: {fit.params.spectral_radius():.4f}")
    return CalibrationReport(
        params=fit.params,
        transitions=transitions,
        gamma=dirichlet.params,
        log_likelihood=fit.log_likelihood,
        converged=fit.converged,
        diagnostics=diagnostics,
        n_events=len(history),
        horizon=float(horizon),
        flags=_collect(recorder, local)
    )
