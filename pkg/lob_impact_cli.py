#!/usr/bin/env python3
"""
lob-impact CLI

Command-line interface for the ingest -> calibrate -> simulate -> liquidate ->
diagnose -> stress pipeline. Every output carries a header block with the
tool version, the configuration hash and the seed.
"""

import sys
import json
import logging
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
from dataclasses import dataclass
from datetime import datetime

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

# Add current directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))


def setup_logging(verbose: bool = False, debug_file: Optional[str] = None) -> logging.Logger:
    """Console logging, plus a detailed debug file when verbose or when a file is given."""
    log_level = logging.DEBUG if verbose else logging.INFO

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'
    )
    simple_formatter = logging.Formatter('%(levelname)s: %(message)s')

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(simple_formatter if not verbose else detailed_formatter)
    root_logger.addHandler(console_handler)

    if debug_file or verbose:
        debug_file = debug_file or f"lob_impact_debug_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        file_handler = logging.FileHandler(debug_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)
        root_logger.addHandler(file_handler)

        if verbose:
            print(f"🔍 Debug logging enabled. Logs saved to: {debug_file}", file=sys.stderr)

    return root_logger


from lob_impact import __version__
from lob_impact.config import AppConfig, ConfigManager
from lob_impact.error_handler import (
    EXIT_SUCCESS,
    FlagRecorder,
    InputError,
    describe_error,
)
from lob_impact.lob_model import StateVariable, mid_price_proxy
from lob_impact.hawkes_engine import ModelBundle, load_model, save_model, simulate
from lob_impact.batch_processor import export_path_results, path_seeds
from lob_impact.calibration import calibrate, residual_diagnostics, write_residual_csv
from lob_impact.impact_profiler import (
    LiquidationConfig,
    monte_carlo_profiles,
    run_liquidation_path,
    stress_scores,
)
from lob_impact.lobster_ingest import (
    classify,
    dedup_and_order,
    history_from_frame,
    parse_pair,
    read_events_csv,
    read_volumes_csv,
    renormalise_tick,
    to_history,
    volume_matrix,
    write_events_csv,
    write_history_csv,
    write_volumes_csv,
)
from lob_impact.synthetic import synthetic_model

TOOL_NAME = "lob-impact"
SYNTHETIC_MODEL = "synthetic"
DEFAULT_SHOCKS = (-0.05, 0.05)


@dataclass
class ScenarioConfig:
    """One liquidation scenario as run by `liquidate` and `stress`."""
    model: str
    liquidation: LiquidationConfig
    horizon: float
    seed: int
    paths: int
    out_dir: Path

    def validate(self) -> None:
        if self.model != SYNTHETIC_MODEL and not Path(self.model).is_file():
            raise InputError(f"model file not found: {self.model}", path=self.model)
        if not self.horizon > self.liquidation.start_time:
            raise InputError(f"horizon {self.horizon} must exceed the start time {self.liquidation.start_time}")
        if self.paths < 1:
            raise InputError(f"--paths must be >= 1, got {self.paths}")

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'ScenarioConfig':
        """Flags override the scenario file, which overrides the defaults."""
        values: Dict[str, Any] = {}
        if getattr(args, 'scenario', None):
            path = Path(args.scenario)
            if not path.is_file():
                raise InputError(f"scenario file not found: {path}", path=str(path))
            with open(path, 'r') as f:
                values.update(yaml.safe_load(f) or {})
        for key in ('Q0', 'nu0', 'a', 'c', 't0', 'horizon'):
            flag = getattr(args, key, None)
            if flag is not None:
                values[key] = flag
        if 'Q0' not in values or 'horizon' not in values:
            raise InputError("a scenario needs Q0 and horizon (flags or --scenario file)")

        scenario = cls(
            model=args.model,
            liquidation=LiquidationConfig(
                initial_inventory=float(values['Q0']),
                base_rate=float(values.get('nu0', 0.0)),
                clustering_rate=float(values.get('a', 0.0)),
                order_size_fraction=float(values.get('c', 0.1)),
                start_time=float(values.get('t0', 0.0))
            ),
            horizon=float(values['horizon']),
            seed=args.seed,
            paths=args.paths,
            out_dir=Path(args.out)
        )
        scenario.validate()
        return scenario


class LobImpactCLI:
    """Main CLI class for the lob-impact pipeline."""

    def __init__(self, verbose: bool = False, debug_file: Optional[str] = None,
                 config_file: Optional[str] = None):
        self.logger = setup_logging(verbose, debug_file)
        self.verbose = verbose
        self.config_manager = ConfigManager(Path(config_file) if config_file else None)
        self.recorder = FlagRecorder()

    @property
    def config(self) -> AppConfig:
        return self.config_manager.get_config()

    def apply_overrides(self, args: argparse.Namespace) -> None:
        """Command-line flags take precedence over config files and the environment."""
        self.config_manager.update_config(**{
            'book.depth': getattr(args, 'depth', None),
            'book.buckets': getattr(args, 'buckets', None),
            'book.tick_size': getattr(args, 'tick_size', None),
            'book.tick_multiple': getattr(args, 'tick_multiple', None),
            'calibration.method': getattr(args, 'method', None),
            'calibration.workers': getattr(args, 'workers', None),
            'simulation.workers': getattr(args, 'workers', None),
        })
        issues = self.config_manager.validate_config()
        if issues:
            raise InputError("invalid configuration: " + "; ".join(issues), issues=issues)

    def header(self, seed: Optional[int] = None) -> Dict[str, Any]:
        header: Dict[str, Any] = {
            'tool': TOOL_NAME,
            'version': __version__,
            'config_hash': self.config.config_hash(),
        }
        header['seed'] = seed if seed is not None else 'none'
        return header

    def load_bundle(self, model: str) -> ModelBundle:
        if model == SYNTHETIC_MODEL:
            return synthetic_model(self.config.book.depth, self.config.book.buckets)
        return load_model(model)

    def progress_bar(self, total: int, description: str):
        """tqdm bar bound to a batch progress callback."""
        bar = tqdm(total=total, desc=description, unit='path', disable=None)

        def callback(current: int, total: int, message: str):
            bar.n = current
            bar.refresh()
            if current >= total:
                bar.close()

        return callback

    # ------------------------------------------------------------------
    # ingest
    # ------------------------------------------------------------------

    def classified_events(self, messages: str, orderbook: str, strict: bool = False):
        book = self.config.book
        parsed = parse_pair(messages, orderbook, book.depth * book.tick_multiple, strict, self.recorder)
        result = classify(parsed.records, book.tick_size, book.depth, book.buckets, recorder=self.recorder)
        events = dedup_and_order(result.events, self.recorder)
        events = renormalise_tick(events, book.tick_multiple, book.depth, book.buckets)
        if not events:
            raise InputError(f"no market events left after classifying {messages}")
        self.logger.info(f"✅ {len(events)} events from {len(parsed)} rows")
        return events, parsed, result

    def ingest(self, messages: str, orderbook: str, out_dir: str, strict: bool = False) -> Dict[str, Any]:
        self.logger.info(f"📥 Ingesting {messages}")
        events, parsed, result = self.classified_events(messages, orderbook, strict)
        out = Path(out_dir)
        header = self.header()
        events_path = write_events_csv(events, out / 'events.csv', header)
        volumes_path = write_volumes_csv(events, self.config.book.depth, out / 'volumes.csv', header)
        return {
            'events': str(events_path),
            'volumes': str(volumes_path),
            'rows': len(parsed),
            'n_events': len(events),
            'malformed_lines': [m.line_number for m in parsed.malformed],
            'dropped': result.dropped,
        }

    # ------------------------------------------------------------------
    # calibrate
    # ------------------------------------------------------------------

    def calibration_inputs(self, args: argparse.Namespace):
        K = self.config.book.buckets
        if args.messages and args.orderbook:
            events, _, _ = self.classified_events(args.messages, args.orderbook, args.strict)
            history, horizon = to_history(events, K)
            volumes, states = volume_matrix(events, self.config.book.depth)
        elif args.events and args.volumes:
            history, horizon = history_from_frame(read_events_csv(args.events), K)
            volumes, states = read_volumes_csv(args.volumes)
        else:
            raise InputError("calibrate needs --messages and --orderbook, or --events and --volumes")
        return history, horizon, volumes, states

    def calibrate(self, args: argparse.Namespace) -> Dict[str, Any]:
        history, horizon, volumes, states = self.calibration_inputs(args)
        config = self.config
        self.logger.info(f"🚀 Calibrating on {len(history)} events over {horizon:.3f}s")
        report = calibrate(history, horizon, volumes, states, config.book.buckets,
                           config.calibration, self.recorder)

        out = Path(args.out)
        header = self.header(config.calibration.seed)
        bundle = ModelBundle(report.params, report.transitions, report.gamma,
                             config.book.depth, config.book.buckets)
        save_model(bundle, out, meta=header)
        report_path = report.write_json(out.with_name(out.stem + '_report.json'), meta=header)
        qq_path = report.write_residual_csv(out.with_name(out.stem + '_residuals.csv'), header)
        return {
            'model': str(out),
            'report': str(report_path),
            'residuals': str(qq_path),
            'd_E': report.params.d_E,
            'd_S': report.params.d_S,
            'converged': all(report.converged.values()),
            'spectral_radius': report.params.spectral_radius(),
        }

    # ------------------------------------------------------------------
    # simulate / liquidate / stress
    # ------------------------------------------------------------------

    def simulate(self, args: argparse.Namespace) -> Dict[str, Any]:
        bundle = self.load_bundle(args.model)
        if args.horizon <= 0:
            raise InputError(f"--horizon must be positive, got {args.horizon}")
        initial = StateVariable(0, 0, bundle.K).index
        history = simulate(bundle.params, bundle.transitions, initial, args.horizon,
                           rng_seed=args.seed, tail_tolerance=self.config.simulation.kernel_tail_tolerance)
        path = write_history_csv(history, bundle.K, args.out, self.header(args.seed))
        return {'events': str(path), 'n_events': len(history)}

    def liquidate(self, scenario: ScenarioConfig) -> Dict[str, Any]:
        bundle = self.load_bundle(scenario.model)
        simulation = self.config.simulation
        header = self.header(scenario.seed)
        out = scenario.out_dir
        out.mkdir(parents=True, exist_ok=True)
        self.logger.info(f"💧 Liquidating Q0={scenario.liquidation.initial_inventory} "
                         f"over {scenario.paths} path(s)")

        if scenario.paths == 1:
            seed = path_seeds(scenario.seed, 1)[0]
            path = run_liquidation_path(bundle, scenario.liquidation, scenario.horizon,
                                        np.random.default_rng(seed), simulation=simulation,
                                        tick_size=self.config.book.tick_size)
            path.profile.write_csv(out / 'path_0000.csv', header)
            summary = {'schema_version': 1, **path.profile.summary(), 'meta': header}
        else:
            mc = monte_carlo_profiles(bundle, scenario.liquidation, scenario.paths, scenario.horizon,
                                      scenario.seed, simulation,
                                      self.progress_bar(scenario.paths, 'liquidate'))
            for index, path in enumerate(mc.paths):
                path.profile.write_csv(out / f'path_{index:04d}.csv', header)
            mc.write_quantiles_csv(out / 'quantiles.csv', header)
            export_path_results(mc.results, out / 'paths.csv', 'csv', header, include_timing=False)
            summary = mc.to_dict(meta=header)
            summary['flags'] = [f.to_dict() for p in mc.paths for f in p.profile.flags]

        with open(out / 'summary.json', 'w') as f:
            json.dump(summary, f, indent=2)
        return summary

    def stress(self, scenario: ScenarioConfig, shocks: Sequence[float]) -> Dict[str, Any]:
        bundle = self.load_bundle(scenario.model)
        header = self.header(scenario.seed)
        self.logger.info(f"📈 Stress test over shocks {list(shocks)}")
        report = stress_scores(bundle, scenario.liquidation, shocks, scenario.paths, scenario.horizon,
                               scenario.seed, self.config.simulation,
                               recorder=self.recorder)
        path = report.write_json(scenario.out_dir / 'stress.json', meta=header)
        return {'report': str(path), **report.to_dict()}

    # ------------------------------------------------------------------
    # diagnose
    # ------------------------------------------------------------------

    def diagnose(self, args: argparse.Namespace) -> Dict[str, Any]:
        bundle = self.load_bundle(args.model)
        frame = read_events_csv(args.events)
        history, horizon = history_from_frame(frame, bundle.K)
        diagnostics = residual_diagnostics(bundle.params, history, horizon,
                                           self.config.calibration.ks_min_events, self.recorder)
        out = Path(args.out)
        header = self.header()
        write_residual_csv(diagnostics, out / 'residuals.csv', header)
        mid = self.compare_midprice(frame, bundle.K, out / 'midprice.csv', header)

        report = {
            'schema_version': 1,
            'n_events': len(history),
            'ks': diagnostics.ks_table(),
            'spectral_radius': bundle.params.spectral_radius(),
            'norm_matrix': bundle.params.norm_matrix().tolist(),
            'midprice': mid,
            'flags': [f.to_dict() for f in diagnostics.flags],
            'meta': header,
        }
        out.mkdir(parents=True, exist_ok=True)
        with open(out / 'diagnose.json', 'w') as f:
            json.dump(report, f, indent=2)
        return report

    def compare_midprice(self, frame: pd.DataFrame, K: int, path: Path,
                         header: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """Mid-price proxy from x1 against the recorded mid; None when no mids were recorded."""
        recorded = frame['mid'].to_numpy(dtype=float)
        if not np.all(np.isfinite(recorded)):
            self.logger.info("ℹ️ Events carry no recorded mid-price; proxy comparison skipped")
            return None
        tick = self.config.book.tick_size * self.config.book.tick_multiple
        x1 = frame['x1'].to_numpy(dtype=np.int64)
        p0 = recorded[0] - tick / 2.0 * x1[0]
        index = np.arange(len(frame), dtype=float)
        proxy = mid_price_proxy(p0, tick, list(zip(index, x1.tolist()))).values
        difference = proxy - recorded

        table = pd.DataFrame({
            'time_ns': frame['time_ns'],
            'tie_rank': frame['tie_rank'],
            'recorded_mid': recorded,
            'proxy_mid': proxy,
            'difference': difference,
        })
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            for key, value in header.items():
                f.write(f"# {key}: {value}\n")
            table.to_csv(f, index=False, float_format='%.17g')
        return {
            'max_abs_difference': float(np.abs(difference).max()),
            # the proxy drifts only where the recorded mid jumped by more than half a tick
            'divergence_events': np.flatnonzero(np.diff(np.concatenate(([0.0], difference)))).tolist(),
        }


def _add_scenario_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--model', required=True, help=f"model JSON file, or '{SYNTHETIC_MODEL}'")
    parser.add_argument('--scenario', help='YAML/JSON file with Q0, nu0, a, c, t0, horizon')
    parser.add_argument('--Q0', type=float, help='inventory to liquidate')
    parser.add_argument('--nu0', type=float, help='liquidator base rate')
    parser.add_argument('--a', type=float, help='liquidator clustering rate')
    parser.add_argument('--c', type=float, help='order size as a fraction of visible bid depth')
    parser.add_argument('--t0', type=float, help='liquidation start time (s)')
    parser.add_argument('--horizon', type=float, help='simulation horizon (s)')
    parser.add_argument('--seed', type=int, default=0, help='base seed of the path seeds')
    parser.add_argument('--workers', type=int, help='worker threads for the paths')
    parser.add_argument('--out', required=True, help='output directory')


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser for CLI."""
    parser = argparse.ArgumentParser(
        description="State-dependent Hawkes models of the limit order book and liquidation impact",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Classify a LOBSTER pair into event and volume CSVs
  %(prog)s ingest --messages msg.csv --orderbook book.csv --out data/

  # Calibrate a model on a LOBSTER pair
  %(prog)s calibrate --messages msg.csv --orderbook book.csv --depth 2 --buckets 3 --out model.json

  # Liquidate 10 shares with 100 paths on the shipped synthetic model
  %(prog)s liquidate --model synthetic --Q0 10 --nu0 0.03 --c 0.075 --horizon 600 --paths 100 --seed 7 --out runs/

  # Stress the scenario with +-5%% shocks
  %(prog)s stress --model model.json --scenario scenario.yaml --paths 100 --out runs/

  # Goodness-of-fit diagnostics
  %(prog)s diagnose --model model.json --events data/events.csv --out diag/
        """
    )
    parser.add_argument('--config', help='YAML configuration file')
    parser.add_argument('--verbose', '-v', action='store_true', help='Verbose debug output')
    parser.add_argument('--debug-file', help='Save debug logs to specific file')

    book = argparse.ArgumentParser(add_help=False)
    book.add_argument('--depth', type=int, help='book levels n used for the imbalance')
    book.add_argument('--buckets', type=int, help='imbalance buckets K (odd)')
    book.add_argument('--tick-size', type=int, help='tick size in 1e-4 currency units')
    book.add_argument('--tick-multiple', type=int, help='coarse tick multiple m')

    commands = parser.add_subparsers(dest='command', required=True)

    ingest = commands.add_parser('ingest', parents=[book], help='LOBSTER pair -> event and volume CSVs')
    ingest.add_argument('--messages', required=True, help='LOBSTER message file')
    ingest.add_argument('--orderbook', required=True, help='LOBSTER orderbook file')
    ingest.add_argument('--strict', action='store_true', help='fail on the first malformed row')
    ingest.add_argument('--out', required=True, help='output directory')

    calib = commands.add_parser('calibrate', parents=[book], help='fit the model')
    calib.add_argument('--messages', help='LOBSTER message file')
    calib.add_argument('--orderbook', help='LOBSTER orderbook file')
    calib.add_argument('--events', help='event CSV written by ingest')
    calib.add_argument('--volumes', help='volume CSV written by ingest')
    calib.add_argument('--strict', action='store_true', help='fail on the first malformed row')
    calib.add_argument('--method', choices=['gradient-ascent', 'lbfgs'], help='optimiser')
    calib.add_argument('--workers', type=int, help='worker threads for the per-type fits')
    calib.add_argument('--out', required=True, help='model JSON path')

    sim = commands.add_parser('simulate', parents=[book], help='simulate the market without liquidator')
    sim.add_argument('--model', required=True, help=f"model JSON file, or '{SYNTHETIC_MODEL}'")
    sim.add_argument('--horizon', type=float, required=True, help='horizon (s)')
    sim.add_argument('--seed', type=int, default=0, help='random seed')
    sim.add_argument('--out', required=True, help='event CSV path')

    liquidate = commands.add_parser('liquidate', parents=[book], help='simulate liquidations and profile their impact')
    _add_scenario_arguments(liquidate)
    liquidate.add_argument('--paths', type=int, default=1, help='number of simulated paths')

    stress = commands.add_parser('stress', parents=[book], help='impact scores under parameter shocks')
    _add_scenario_arguments(stress)
    stress.add_argument('--paths', type=int, default=100, help='paths per shock')
    stress.add_argument('--shock-grid', '--shocks', dest='shocks', type=float, nargs='+',
                        default=list(DEFAULT_SHOCKS),
                        help='relative shocks applied jointly to nu, alpha and beta')

    diagnose = commands.add_parser('diagnose', parents=[book], help='residuals, KS table and mid-price check')
    diagnose.add_argument('--model', required=True, help=f"model JSON file, or '{SYNTHETIC_MODEL}'")
    diagnose.add_argument('--events', required=True, help='event CSV')
    diagnose.add_argument('--out', required=True, help='output directory')

    return parser


def run(cli: LobImpactCLI, args: argparse.Namespace) -> Dict[str, Any]:
    cli.apply_overrides(args)
    if args.command == 'ingest':
        return cli.ingest(args.messages, args.orderbook, args.out, args.strict)
    if args.command == 'calibrate':
        return cli.calibrate(args)
    if args.command == 'simulate':
        return cli.simulate(args)
    if args.command == 'liquidate':
        return cli.liquidate(ScenarioConfig.from_args(args))
    if args.command == 'stress':
        return cli.stress(ScenarioConfig.from_args(args), args.shocks)
    return cli.diagnose(args)


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = create_parser()
    args = parser.parse_args(argv)

    cli = LobImpactCLI(verbose=args.verbose, debug_file=args.debug_file, config_file=args.config)

    try:
        result = run(cli, args)
    except KeyboardInterrupt:
        print("\n⏹️ Interrupted by user", file=sys.stderr)
        return 1
    except Exception as e:
        context = describe_error(e, args.command)
        if args.verbose:
            import traceback
            traceback.print_exc()
        print(json.dumps(context.to_dict(), indent=2), file=sys.stderr)
        return context.exit_code

    if cli.recorder.flag_history:
        logging.getLogger(__name__).info(f"⚠️ Flags raised: {cli.recorder.get_flag_statistics()['flag_codes']}")
    print(json.dumps(result, indent=2, default=str))
    return EXIT_SUCCESS


if __name__ == '__main__':
    sys.exit(main())
