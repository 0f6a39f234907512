#!/usr/bin/env python3
"""
Tests for price impact profiling.
"""

import json
import pytest
import numpy as np
import sys
from pathlib import Path
from scipy import integrate, stats

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from lob_impact.config import SimulationConfig
from lob_impact.error_handler import FlagRecorder, InputError, ModelError, NoLiquidatorActivity
from lob_impact.hawkes_engine import (
    SELL_MARKET_ORDER,
    EventHistory,
    HawkesParams,
    ModelBundle,
    simulate,
    simulate_with_liquidator,
)
from lob_impact.impact_profiler import (
    CANONICAL_EVENT_PERMUTATION,
    LiquidationConfig,
    check_price_symmetry,
    dir_intensity,
    estimate_phi0,
    impact_identity_check,
    impact_profile,
    indir_intensity,
    monte_carlo_profiles,
    run_liquidation_path,
    stress_scores,
    symmetrise,
)
from lob_impact.lob_model import deflationary_states, inflationary_states
from lob_impact.synthetic import synthetic_model

SCENARIO = dict(initial_inventory=0.2, base_rate=0.5, clustering_rate=0.5, order_size_fraction=0.1, start_time=5.0)


@pytest.fixture(scope='module')
def model():
    return synthetic_model(n=2, K=3)


@pytest.fixture(scope='module')
def symmetric_model():
    return synthetic_model(n=2, K=3, symmetric=True)


@pytest.fixture(scope='module')
def liquidation():
    return LiquidationConfig(**SCENARIO)


@pytest.fixture(scope='module')
def run(model, liquidation):
    """One completed liquidation on the synthetic market."""
    return simulate_with_liquidator(model.params, model.transitions, liquidation, model.gamma, 80.0, rng_seed=6)


@pytest.fixture(scope='module')
def profile(model, liquidation, run):
    return impact_profile(run.params, model.transitions, run.history, liquidation, 80.0,
                          fill_sizes=[f.size for f in run.fills])


class TestLiquidationConfig:
    """Test cases for LiquidationConfig."""

    def test_to_dict(self, liquidation):
        """Test scenario keys."""
        assert liquidation.to_dict() == {'Q0': 0.2, 'nu0': 0.5, 'a': 0.5, 'c': 0.1, 't0': 5.0}
        assert not liquidation.is_baseline
        assert LiquidationConfig(1.0).is_baseline

    @pytest.mark.parametrize('kwargs', [
        {'initial_inventory': 0.0},
        {'initial_inventory': 1.0, 'order_size_fraction': 0.0},
        {'initial_inventory': 1.0, 'order_size_fraction': 1.5},
        {'initial_inventory': 1.0, 'base_rate': -0.1},
        {'initial_inventory': 1.0, 'start_time': -1.0},
    ])
    def test_invalid(self, kwargs):
        """Test invalid scenarios are input errors."""
        with pytest.raises(InputError):
            LiquidationConfig(**kwargs)


class TestPhi0:
    """Test cases for the liquidator transition estimate."""

    def test_estimate_from_fills(self, run):
        """Test phi0 rows come from the liquidator's own transitions."""
        estimate = estimate_phi0(run.history, 9)

        assert estimate.n_fills == len(run.fills)
        assert np.allclose(estimate.phi0.sum(axis=1), 1.0)
        for fill in run.fills:
            assert estimate.phi0[fill.state_before, fill.state_after] > 0
        assert np.all(estimate.phi0[:, inflationary_states(3)][list(set(f.state_before for f in run.fills))] == 0)

    def test_no_fills(self):
        """Test a history without liquidator events."""
        with pytest.raises(NoLiquidatorActivity):
            estimate_phi0(EventHistory([1.0], [1], [4], 4), 9)


class TestImpactProfile:
    """Test cases for a single-path impact profile."""

    def test_pinned_at_start(self, profile):
        """Test the profile starts at zero in t0."""
        assert profile.breakpoints[0] == 5.0
        assert profile.values[0] == 0.0
        assert profile.value_at(5.0) == 0.0

    def test_completed(self, profile, run):
        """Test tau is the termination time of the run."""
        assert profile.completed
        assert profile.termination_time == run.termination_time
        assert profile.n_fills == len(run.fills)
        assert not {"incomplete", "truncated"} & {f.code for f in profile.flags}

    def test_score(self, profile):
        """Test the score divides the maximum by the liquidation duration."""
        assert profile.score == pytest.approx(profile.maximum / (profile.termination_time - 5.0))

    def test_matches_quadrature(self, profile):
        """Test the piecewise closed form against numerical integration of Dir + Indir."""
        params, transitions, history = profile.params, profile.transitions, profile.history
        end = float(profile.breakpoints[-1])

        def density(t):
            return dir_intensity(params, transitions, history, t) + indir_intensity(params, transitions, history, t)

        knots = profile.breakpoints[profile.breakpoints <= end]
        numeric = sum(
            integrate.quad(density, a, b, epsabs=1e-13, epsrel=1e-11)[0]
            for a, b in zip(knots, knots[1:])
        )

        assert profile.value_at(end) == pytest.approx(numeric, rel=1e-8, abs=1e-12)

    def test_score_invariant_under_time_translation(self, model, run, profile):
        """Test shifting the whole scenario in time leaves the score and profile unchanged."""
        shift = 12.5
        moved = LiquidationConfig(**{**SCENARIO, 'start_time': SCENARIO['start_time'] + shift})

        shifted = impact_profile(run.params, model.transitions, run.history.shifted(shift), moved, 80.0 + shift,
                                 fill_sizes=[f.size for f in run.fills])

        assert shifted.score == pytest.approx(profile.score, rel=1e-9)
        assert shifted.termination_time == pytest.approx(profile.termination_time + shift)
        assert np.allclose(shifted.values, profile.values, rtol=1e-9, atol=1e-12)

    def test_values_match_breakpoints(self, profile):
        """Test values_at reproduces the stored breakpoint values."""
        assert np.allclose(profile.values_at(profile.breakpoints), profile.values)

    def test_transient_window(self, model, liquidation, run):
        """Test the profile stops a multiple of the duration after tau."""
        tau = run.termination_time
        windowed = impact_profile(run.params, model.transitions, run.history, liquidation, 80.0,
                                  transient_window_factor=1.0)

        assert windowed.breakpoints[-1] == pytest.approx(min(80.0, tau + (tau - 5.0)))
        times, values = windowed.transient()
        assert times[0] == tau
        assert values.size == times.size

    def test_inventory_column(self, profile):
        """Test the inventory falls from Q0 to 0."""
        assert profile.inventory[0] == pytest.approx(0.2)
        assert profile.inventory[-1] == 0.0
        assert np.all(np.diff(profile.inventory) <= 0)

    def test_incomplete_liquidation(self, model):
        """Test an unfinished liquidation is scored over the horizon and flagged."""
        liquidation = LiquidationConfig(initial_inventory=50.0, base_rate=0.5, start_time=1.0)
        run = simulate_with_liquidator(model.params, model.transitions, liquidation, model.gamma, 10.0, rng_seed=2)
        recorder = FlagRecorder()

        profile = impact_profile(run.params, model.transitions, run.history, liquidation, 10.0, recorder=recorder)

        assert not profile.completed
        assert 'incomplete' in recorder.codes()
        assert profile.score == pytest.approx(profile.maximum / 9.0)

    def test_baseline_is_zero(self, model):
        """Test a liquidator that never trades has no impact."""
        history = simulate(model.params, model.transitions, 4, 30.0, rng_seed=3)
        recorder = FlagRecorder()

        profile = impact_profile(model.params, model.transitions, history, LiquidationConfig(1.0), 30.0,
                                 recorder=recorder)

        assert np.all(profile.values == 0.0)
        assert profile.score == 0.0
        assert 'no_liquidator_activity' in recorder.codes()

    def test_zero_duration(self, model):
        """Test a liquidation starting at the horizon gets a zero score."""
        recorder = FlagRecorder()

        profile = impact_profile(model.params, model.transitions, EventHistory.empty(4),
                                 LiquidationConfig(1.0, base_rate=1.0, start_time=10.0), 10.0, recorder=recorder)

        assert profile.score == 0.0
        assert 'zero_duration' in recorder.codes()

    def test_horizon_before_start(self, model):
        """Test the horizon must not precede t0."""
        with pytest.raises(InputError):
            impact_profile(model.params, model.transitions, EventHistory.empty(4),
                           LiquidationConfig(1.0, start_time=10.0), 5.0)

    def test_summary_and_csv(self, profile, tmp_path):
        """Test the summary document and the profile CSV."""
        summary = profile.summary()
        path = profile.write_csv(tmp_path / 'path.csv', {'seed': 6})
        lines = path.read_text().splitlines()

        assert summary['tau'] == profile.termination_time
        assert summary['converged'] is True
        assert len(summary['phi0']) == 9
        json.dumps(summary)
        assert lines[0] == '# seed: 6'
        assert lines[1] == 'time,dir,indir,profile,inventory,midprice_proxy'
        assert len(lines) == 2 + profile.breakpoints.size

    def test_requires_liquidator_transitions(self, model, run):
        """Test the intensities need phi0."""
        with pytest.raises(ModelError):
            dir_intensity(run.params, model.transitions, run.history, 10.0)


class TestPriceSymmetry:
    """Test cases for symmetry checks, symmetrisation and the impact identity."""

    def test_synthetic_is_not_symmetric(self, model):
        """Test the raw synthetic calibration reports its asymmetries."""
        report = check_price_symmetry(model.params, model.transitions)

        assert not report.passed
        assert report.violations['base_rates'] == pytest.approx(0.05)

    def test_symmetrised_passes(self, model, symmetric_model):
        """Test symmetrisation yields exactly symmetric parameters."""
        report = check_price_symmetry(symmetric_model.params, symmetric_model.transitions)

        assert report.passed
        assert report.max_violation <= 1e-12
        assert symmetric_model.transitions.sign_violation() == 0.0

    def test_symmetrise_is_idempotent(self, symmetric_model):
        """Test symmetrising symmetric parameters changes nothing."""
        params, transitions = symmetrise(symmetric_model.params, symmetric_model.transitions)

        assert np.allclose(params.alpha, symmetric_model.params.alpha)
        assert np.allclose(transitions.phi, symmetric_model.transitions.phi)

    def test_invalid_maps(self, model):
        """Test maps must be the right kind of bijection."""
        with pytest.raises(InputError):
            check_price_symmetry(model.params, model.transitions, sigma_E={1: 2, 2: 1, 3: 3})
        with pytest.raises(InputError):
            check_price_symmetry(model.params, model.transitions, sigma_S={6: 2, 7: 2, 8: 0})
        with pytest.raises(InputError):
            symmetrise(model.params, model.transitions, sigma_E={1: 3, 3: 2, 2: 1, 4: 4})

    def test_canonical_permutation(self):
        """Test the canonical event map swaps buys with sells and rises with falls."""
        assert CANONICAL_EVENT_PERMUTATION == {1: 2, 2: 1, 3: 4, 4: 3}

    def test_identity_under_symmetry(self, symmetric_model, liquidation):
        """Test lambda^- - lambda^+ equals Dir + Indir at a thousand sample times."""
        run = simulate_with_liquidator(symmetric_model.params, symmetric_model.transitions, liquidation,
                                       symmetric_model.gamma, 60.0, rng_seed=14)
        phi0 = symmetric_model.transitions.for_event(SELL_MARKET_ORDER)
        transitions = symmetric_model.transitions.with_phi0(phi0)
        ts = np.linspace(0.0, 60.0, 1000)

        check = impact_identity_check(run.params, transitions, run.history, ts)

        assert check.max_discrepancy < 1e-9

    def test_identity_without_liquidator(self, symmetric_model):
        """Test both sides vanish when the liquidator is silent."""
        history = simulate(symmetric_model.params, symmetric_model.transitions, 4, 20.0, rng_seed=4)
        params = symmetric_model.params.with_liquidator(0.0, 0.0)
        transitions = symmetric_model.transitions.with_phi0(np.eye(9))

        check = impact_identity_check(params, transitions, history, np.linspace(0.0, 20.0, 50))

        assert np.allclose(check.decomposition, 0.0)
        assert np.allclose(check.direct_difference, 0.0, atol=1e-12)

    def test_identity_broken_by_asymmetry(self, model, liquidation):
        """Test unequal base rates leave a gap in the identity."""
        run = simulate_with_liquidator(model.params, model.transitions, liquidation, model.gamma, 60.0, rng_seed=14)
        transitions = model.transitions.with_phi0(model.transitions.for_event(SELL_MARKET_ORDER))

        check = impact_identity_check(run.params, transitions, run.history, np.linspace(0.0, 60.0, 100))

        assert check.max_discrepancy > 1e-6

    @pytest.mark.slow
    def test_martingale_baseline(self, symmetric_model):
        """Test price falls and rises balance on average without a liquidator."""
        K = 3
        minus, plus = deflationary_states(K), inflationary_states(K)
        differences = []
        for seed in range(500):
            history = simulate(symmetric_model.params, symmetric_model.transitions, 4, 20.0, rng_seed=seed)
            differences.append(np.isin(history.states, minus).sum() - np.isin(history.states, plus).sum())

        differences = np.array(differences, dtype=float)
        standard_error = differences.std(ddof=1) / np.sqrt(differences.size)
        assert abs(differences.mean()) < 3 * standard_error


class TestMonteCarlo:
    """Test cases for Monte Carlo profile bands."""

    def test_single_path_runner(self, model, liquidation):
        """Test one path sampled on a grid."""
        grid = np.linspace(5.0, 60.0, 12)

        path = run_liquidation_path(model, liquidation, 60.0, 3, grid)

        assert path.grid_values.shape == (12,)
        assert path.grid_values[0] == 0.0
        assert path.n_fills == path.profile.n_fills

    def test_transient_window_setting(self, model, liquidation):
        """Test the configured transient window factor bounds each path's profile."""
        short = run_liquidation_path(model, liquidation, 400.0, 3,
                                     simulation=SimulationConfig(transient_window_factor=0.5))
        long = run_liquidation_path(model, liquidation, 400.0, 3,
                                    simulation=SimulationConfig(transient_window_factor=3.0))

        tau = short.termination_time
        assert short.completed
        assert long.termination_time == tau
        assert short.profile.horizon == pytest.approx(min(400.0, tau + 0.5 * (tau - 5.0)))
        assert long.profile.horizon == pytest.approx(min(400.0, tau + 3.0 * (tau - 5.0)))
        assert short.profile.horizon < long.profile.horizon

    def test_bands(self, model, liquidation):
        """Test quartile bands bracket the median."""
        simulation = SimulationConfig(grid_size=25)

        summary = monte_carlo_profiles(model, liquidation, 6, 60.0, seeds=0, simulation=simulation)

        assert summary.grid.size == 25
        assert np.all(summary.lower <= summary.median + 1e-15)
        assert np.all(summary.median <= summary.upper + 1e-15)
        assert summary.scores.size == 6
        assert summary.batch.failed_paths == 0
        assert summary.to_dict()['n_paths'] == 6

    def test_reproducible(self, model, liquidation):
        """Test the same root seed gives the same scores."""
        simulation = SimulationConfig(grid_size=10)

        first = monte_carlo_profiles(model, liquidation, 3, 40.0, seeds=5, simulation=simulation)
        second = monte_carlo_profiles(model, liquidation, 3, 40.0, seeds=5, simulation=simulation)

        assert np.array_equal(first.scores, second.scores)
        assert np.array_equal(first.median, second.median)

    def test_needs_two_paths(self, model, liquidation):
        """Test a single path is not a Monte Carlo run."""
        with pytest.raises(InputError):
            monte_carlo_profiles(model, liquidation, 1, 40.0)

    def test_quantiles_csv(self, model, liquidation, tmp_path):
        """Test the quantile CSV layout."""
        summary = monte_carlo_profiles(model, liquidation, 2, 40.0, simulation=SimulationConfig(grid_size=5))

        lines = summary.write_quantiles_csv(tmp_path / 'quantiles.csv').read_text().splitlines()

        assert lines[0] == 'time,median,q25,q75,mean'
        assert len(lines) == 6

    @pytest.mark.slow
    def test_mean_profile_positive_at_termination(self, model):
        """Test a liquidation leaves a significantly positive profile at tau."""
        liquidation = LiquidationConfig(initial_inventory=0.5, base_rate=0.5, clustering_rate=1.0,
                                        order_size_fraction=0.1, start_time=0.0)

        summary = monte_carlo_profiles(model, liquidation, 100, 200.0, seeds=0,
                                       simulation=SimulationConfig(grid_size=50))

        at_tau = [p.profile.value_at(p.termination_time) for p in summary.paths if p.completed]
        assert len(at_tau) > 50
        assert stats.ttest_1samp(at_tau, 0.0, alternative='greater').pvalue < 0.01


    @pytest.mark.slow
    def test_scenario_ordering(self, model):
        """Test clustered small orders outscore large and small regular ones."""
        simulation = SimulationConfig(grid_size=20)
        scenarios = [
            dict(base_rate=0.0, clustering_rate=0.25, order_size_fraction=0.015),
            dict(base_rate=0.03, clustering_rate=0.0, order_size_fraction=0.5),
            dict(base_rate=0.03, clustering_rate=0.0, order_size_fraction=0.075),
        ]

        means = [
            monte_carlo_profiles(model, LiquidationConfig(initial_inventory=10.0, **scenario), 100, 300.0,
                                 seeds=0, simulation=simulation).mean_score
            for scenario in scenarios
        ]

        assert means[0] > means[1] > means[2]


class TestStress:
    """Test cases for the parameter stress harness."""

    def test_stress_rows(self, model, liquidation, tmp_path):
        """Test shocks are reported around an unshocked baseline."""
        simulation = SimulationConfig(grid_size=5)

        report = stress_scores(model, liquidation, [0.05, -0.05], 2, 40.0, seed=1, simulation=simulation)

        assert [row.shock for row in report.rows] == [-0.05, 0.0, 0.05]
        baseline = report.rows[1]
        assert baseline.relative_change in (0.0, None)
        assert not any(row.beta_clamped for row in report.rows)
        data = json.loads(report.write_json(tmp_path / 'stress.json', {'seed': 1}).read_text())
        assert data['scenario']['Q0'] == 0.2
        assert len(data['shocks']) == 3

    def test_beta_clamp_flagged(self, liquidation):
        """Test a shock pushing beta to 1 is clamped and flagged."""
        base = synthetic_model()
        params = HawkesParams(base.params.nu, 0.01 * base.params.alpha, np.full(base.params.beta.shape, 1.02))
        model = ModelBundle(params, base.transitions, base.gamma, base.n, base.K)
        recorder = FlagRecorder()

        report = stress_scores(model, liquidation, [-0.05], 2, 20.0, simulation=SimulationConfig(grid_size=5),
                               recorder=recorder)

        assert report.rows[0].beta_clamped
        assert 'beta_clamped' in recorder.codes()
