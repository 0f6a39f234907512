#!/usr/bin/env python3
"""
Batch Processing for Monte Carlo Liquidation Paths

Runs independent simulated paths sequentially or on a thread pool, with
per-path seeds, progress callbacks, deterministic result order and exportable
per-path analytics.
"""

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, Generic, List, Optional, Protocol, Sequence, TypeVar, Union

import numpy as np

logger = logging.getLogger(__name__)


class PathOutcome(Protocol):
    """What a path runner must report back."""
    score: float
    termination_time: Optional[float]
    completed: bool
    n_fills: int


OutcomeT = TypeVar('OutcomeT', bound=PathOutcome)
PathRunner = Callable[[int, np.random.SeedSequence], OutcomeT]


def path_seeds(seed: Union[int, Sequence[int], None], n_paths: int) -> List[np.random.SeedSequence]:
    """One independent seed per path.

    An integer is spawned into n_paths children; an explicit sequence gives each
    path its own entropy, so repeated values reproduce identical paths.
    """
    if n_paths < 1:
        raise ValueError(f"need at least one path, got {n_paths}")
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.SeedSequence(seed).spawn(n_paths)
    seeds = list(seed)
    if len(seeds) != n_paths:
        raise ValueError(f"got {len(seeds)} seeds for {n_paths} paths")
    return [np.random.SeedSequence(int(s)) for s in seeds]


def _seed_label(seed: np.random.SeedSequence) -> str:
    key = '/'.join(str(k) for k in seed.spawn_key)
    return f"{seed.entropy}" + (f":{key}" if key else "")


@dataclass
class PathResult:
    """Result of a single simulated path."""
    path_index: int
    seed: str
    success: bool
    processing_time: float
    score: Optional[float] = None
    termination_time: Optional[float] = None
    completed: bool = False
    n_fills: int = 0
    error: Optional[str] = None
    timestamp: str = ""

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now().isoformat()


@dataclass
class BatchSummary:
    """Summary of an entire batch of paths."""
    total_paths: int
    successful_paths: int
    failed_paths: int
    completed_liquidations: int
    total_processing_time: float
    average_processing_time: float
    mean_score: Optional[float]
    sd_score: Optional[float]
    start_time: str
    end_time: str
    errors: List[str]

    def success_rate(self) -> float:
        """Percentage of paths that ran without error."""
        if self.total_paths == 0:
            return 0.0
        return (self.successful_paths / self.total_paths) * 100

    def completion_rate(self) -> float:
        """Percentage of successful paths whose inventory was fully sold."""
        if self.successful_paths == 0:
            return 0.0
        return (self.completed_liquidations / self.successful_paths) * 100


class PathBatchProcessor(Generic[OutcomeT]):
    """Runs a path runner over a batch of seeds."""

    def __init__(self, runner: PathRunner, workers: int = 1):
        """
        Initialize batch processor.

        Args:
            runner: callable (path_index, seed_sequence) -> outcome
            workers: number of worker threads (1 runs sequentially)
        """
        self.runner = runner
        self.workers = max(1, int(workers))

        # Progress tracking
        self.progress_callback: Optional[Callable[[int, int, str], None]] = None
        self.results: List[PathResult] = []
        self.outcomes: Dict[int, OutcomeT] = {}

    def set_progress_callback(self, callback: Callable[[int, int, str], None]):
        """
        Set progress callback function.

        Args:
            callback: Function that receives (current, total, status_message)
        """
        self.progress_callback = callback

    def run(self, seeds: Sequence[np.random.SeedSequence]) -> BatchSummary:
        """Run every path; results are ordered by path index whatever the completion order."""
        start_time = time.time()
        start_timestamp = datetime.now().isoformat()
        total = len(seeds)

        logger.info(f"🚀 Starting batch of {total} paths on {self.workers} worker(s)")
        self.results = []
        self.outcomes = {}
        self._update_progress(0, total, "Starting batch...")

        if self.workers > 1 and total > 1:
            self._process_parallel(seeds)
        else:
            self._process_sequential(seeds)
        self.results.sort(key=lambda r: r.path_index)

        summary = self._summarise(start_time, start_timestamp)
        self._log_summary(summary)
        return summary

    def ordered_outcomes(self) -> List[OutcomeT]:
        """Outcomes of successful paths in path-index order."""
        return [self.outcomes[i] for i in sorted(self.outcomes)]

    def _process_sequential(self, seeds: Sequence[np.random.SeedSequence]):
        total = len(seeds)
        for index, seed in enumerate(seeds):
            self.results.append(self._process_single_path(index, seed))
            self._update_progress(index + 1, total, f"Completed path {index}")

    def _process_parallel(self, seeds: Sequence[np.random.SeedSequence]):
        total = len(seeds)
        completed = 0

        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            future_to_index = {
                executor.submit(self._process_single_path, index, seed): index
                for index, seed in enumerate(seeds)
            }
            for future in as_completed(future_to_index):
                completed += 1
                index = future_to_index[future]
                self.results.append(future.result())
                self._update_progress(completed, total, f"Completed path {index} ({completed}/{total})")

    def _process_single_path(self, index: int, seed: np.random.SeedSequence) -> PathResult:
        """Run one path and capture its outcome or its error."""
        start_time = time.time()
        try:
            outcome = self.runner(index, seed)
        except Exception as e:
            logger.error(f"❌ Path {index} failed: {e}")
            return PathResult(
                path_index=index,
                seed=_seed_label(seed),
                success=False,
                processing_time=time.time() - start_time,
                error=f"{type(e).__name__}: {e}"
            )

        self.outcomes[index] = outcome
        return PathResult(
            path_index=index,
            seed=_seed_label(seed),
            success=True,
            processing_time=time.time() - start_time,
            score=float(outcome.score),
            termination_time=outcome.termination_time,
            completed=bool(outcome.completed),
            n_fills=int(outcome.n_fills)
        )

    def _update_progress(self, current: int, total: int, message: str):
        """Update progress if callback is set."""
        if self.progress_callback:
            self.progress_callback(current, total, message)

    def _summarise(self, start_time: float, start_timestamp: str) -> BatchSummary:
        total_time = time.time() - start_time
        successful = [r for r in self.results if r.success]
        scores = np.array([r.score for r in successful], dtype=float)
        return BatchSummary(
            total_paths=len(self.results),
            successful_paths=len(successful),
            failed_paths=len(self.results) - len(successful),
            completed_liquidations=sum(1 for r in successful if r.completed),
            total_processing_time=total_time,
            average_processing_time=total_time / len(self.results) if self.results else 0.0,
            mean_score=float(scores.mean()) if scores.size else None,
            sd_score=float(scores.std(ddof=1)) if scores.size > 1 else None,
            start_time=start_timestamp,
            end_time=datetime.now().isoformat(),
            errors=[r.error for r in self.results if r.error]
        )

    def _log_summary(self, summary: BatchSummary):
        """Log batch summary."""
        logger.info("📊 Batch Summary:")
        logger.info(f"   📋 Total paths: {summary.total_paths}")
        logger.info(f"   ✅ Successful: {summary.successful_paths}")
        logger.info(f"   ❌ Failed: {summary.failed_paths}")
        logger.info(f"   🏁 Completed liquidations: {summary.completed_liquidations}")
        logger.info(f"   ⏱️ Total Time: {summary.total_processing_time:.2f}s")
        if summary.mean_score is not None:
            logger.info(f"   📈 Mean score: {summary.mean_score:.6f}")

        if summary.errors:
            logger.warning(f"   ⚠️ Errors: {len(summary.errors)}")

    def export_results(self, output_path: Union[str, Path], format: str = 'json',
                       header: Optional[Dict[str, Any]] = None, include_timing: bool = True) -> Optional[Path]:
        """Export per-path results to file."""
        return export_path_results(self.results, output_path, format, header, include_timing)

    def get_analytics(self) -> Dict[str, Any]:
        """Detailed analytics over the batch results."""
        if not self.results:
            return {}

        successful = [r for r in self.results if r.success]
        scores = np.array([r.score for r in successful], dtype=float)
        taus = np.array([r.termination_time for r in successful if r.termination_time is not None], dtype=float)
        times = np.array([r.processing_time for r in self.results])

        return {
            'performance': {
                'total_processing_time': float(times.sum()),
                'average_processing_time': float(times.mean()),
                'fastest_path': float(times.min()),
                'slowest_path': float(times.max()),
            },
            'scores': self._distribution(scores),
            'termination_times': self._distribution(taus),
            'success_metrics': {
                'success_rate': len(successful) / len(self.results) * 100,
                'completion_rate': (
                    sum(1 for r in successful if r.completed) / len(successful) * 100 if successful else 0.0
                ),
                'error_categories': self._categorize_errors(),
            }
        }

    @staticmethod
    def _distribution(values: np.ndarray) -> Dict[str, Any]:
        if values.size == 0:
            return {}
        return {
            'mean': float(values.mean()),
            'sd': float(values.std(ddof=1)) if values.size > 1 else 0.0,
            'min': float(values.min()),
            'median': float(np.median(values)),
            'max': float(values.max()),
        }

    def _categorize_errors(self) -> Dict[str, int]:
        """Count failed paths by exception type."""
        categories: Dict[str, int] = {}
        for result in self.results:
            if not result.success and result.error:
                category = result.error.split(':', 1)[0]
                categories[category] = categories.get(category, 0) + 1
        return categories


def export_path_results(results: Sequence[PathResult],
                        output_path: Union[str, Path],
                        format: str = 'json',
                        header: Optional[Dict[str, Any]] = None,
                        include_timing: bool = True) -> Optional[Path]:
    """
    Export per-path results to file.

    Args:
        results: path results in path-index order
        output_path: Path to save results
        format: Export format ('json', 'csv')
        header: key/value metadata ('meta' object in JSON, '# key: value' lines in CSV)
        include_timing: keep per-path processing times (off for reproducible artifacts)
    """
    if not results:
        logger.warning("No results to export")
        return None

    output_file = Path(output_path)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(result) for result in results]
    for row in rows:
        row.pop('timestamp')
        if not include_timing:
            row.pop('processing_time')

    if format.lower() == 'json':
        document: Dict[str, Any] = {'paths': rows}
        if header:
            document['meta'] = header
        with open(output_file, 'w') as f:
            json.dump(document, f, indent=2)

    elif format.lower() == 'csv':
        with open(output_file, 'w', newline='') as f:
            for key, value in (header or {}).items():
                f.write(f"# {key}: {value}\n")
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    else:
        raise ValueError(f"unsupported export format: {format}")

    logger.info(f"📁 Results exported to {output_file}")
    return output_file
