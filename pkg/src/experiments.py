"""
Multi-seed experiments built on the simulator: the oracle pipeline rate,
the comparison of rebalancing modes, and the stage-count scaling study.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.sim_engine import SimConfig, SimResult, ThroughputSeries, best_split, mode_name, run
from src.trace import TraceEvent, scale_for_stages

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))
DEFAULT_PERIODS = (300.0, 60.0)
DEFAULT_STAGE_COUNTS = (4, 8, 16, 32)
HOUR_S = 3600.0


def oracle_throughput(config: SimConfig, peer_counts_per_stage: Sequence[int],
                      rates: Optional[Sequence[float]] = None) -> float:
    """
    Best pipeline rate reachable by redistributing the same peers over the stages.

    Parameters:
        config (SimConfig): Supplies the stage count and the per-peer rate of a
            joining peer.
        peer_counts_per_stage (Sequence[int]): Current peers per stage; only the
            total matters.
        rates (Optional[Sequence[float]]): Per-peer rate of each stage, in
            microbatches per second. Defaults to the join peer's rate on every stage.

    Returns:
        float: max over integer splits of min_s(count_s * rate_s).

    Raises:
        ValueError: On a negative count or a rates vector of the wrong length.
    """
    if any(c < 0 for c in peer_counts_per_stage):
        raise ValueError(f"Peer counts must be nonnegative, got {list(peer_counts_per_stage)}")
    if rates is None:
        rates = [1.0 / config.service_seconds(config.join_peer)] * config.n_stages
    if len(rates) != config.n_stages:
        raise ValueError(f"Expected {config.n_stages} stage rates, got {len(rates)}")
    return best_split(list(rates), int(sum(peer_counts_per_stage)))[1]


@dataclass
class ModeSummary:
    mode: str
    overall_pct: float
    first_hour_pct: float
    last_hour_pct: float
    series: ThroughputSeries
    seed_pcts: List[float] = field(default_factory=list)

    def row(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "overall_pct": self.overall_pct,
            "first_hour_pct": self.first_hour_pct,
            "last_hour_pct": self.last_hour_pct,
        }


@dataclass
class Comparison:
    summaries: List[ModeSummary]
    # rebalanced mode -> share of buckets where the unbalanced pipeline did better
    unbalanced_wins: Dict[str, float]
    results: Dict[str, List[SimResult]]

    def rows(self) -> List[Dict[str, Any]]:
        return [summary.row() for summary in self.summaries]

    def summary(self, mode: str) -> ModeSummary:
        for summary in self.summaries:
            if summary.mode == mode:
                return summary
        raise KeyError(mode)


@dataclass
class ScalingPoint:
    n_stages: int
    rebalanced: ThroughputSeries
    baseline: ThroughputSeries
    oracle: ThroughputSeries
    rebalanced_pct: float
    baseline_pct: float


def run_seeds(tasks: Sequence[Tuple[SimConfig, int]], jobs: int = 1) -> List[SimResult]:
    """
    Run every (config, seed) task, in parallel processes when ``jobs`` > 1.

    Results come back in task order whatever the number of workers.
    """
    if jobs <= 1 or len(tasks) <= 1:
        return [run(config, seed) for config, seed in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(_run_task, tasks))


def _run_task(task: Tuple[SimConfig, int]) -> SimResult:
    config, seed = task
    return run(config, seed)


def compare_rebalancing_modes(trace: Optional[Sequence[TraceEvent]], n_stages: int = 4,
                              periods: Sequence[float] = DEFAULT_PERIODS,
                              seeds: Sequence[int] = DEFAULT_SEEDS, config: Optional[SimConfig] = None,
                              jobs: int = 1, **options: Any) -> Comparison:
    """
    Replay one trace without rebalancing and with every rebalancing period.

    Every mode runs once per seed; the per-mode series are averaged over seeds
    and compared with the averaged oracle series, overall and over the first
    and last hour.

    Parameters:
        trace (Optional[Sequence[TraceEvent]]): The preemption trace; when
            ``config`` is given and trace is None, the config's trace is used.
        n_stages (int): Pipeline stages (ignored when ``config`` is given).
        periods (Sequence[float]): Rebalancing periods to compare with ``none``.
        seeds (Sequence[int]): One run per seed and mode.
        config (Optional[SimConfig]): Base config; built from the trace when None.
        jobs (int): Worker processes.
        **options: SimConfig fields for the config built from the trace
            (granularity defaults to fluid).

    Returns:
        Comparison: One summary per mode (none, each T, then oracle).

    Raises:
        ConfigError: As ``run``.
    """
    if config is None:
        options.setdefault("granularity", "fluid")
        config = SimConfig.from_trace(n_stages, trace, **options)
    elif trace is not None:
        config = replace(config, trace=list(trace))
    modes = [None] + [float(p) for p in periods]
    by_mode = run_modes(config, modes, seeds, jobs)
    return summarize_modes(by_mode, config.duration_s)


def run_modes(config: SimConfig, modes: Sequence[Optional[float]], seeds: Sequence[int],
              jobs: int = 1) -> Dict[str, List[SimResult]]:
    """Run ``config`` under every rebalancing mode and seed; results keyed by mode name, in seed order."""
    seeds = list(seeds)
    tasks = [(config.with_mode(period), seed) for period in modes for seed in seeds]
    logger.info("running %d mode(s) over %d seed(s)", len(modes), len(seeds))
    results = run_seeds(tasks, jobs)
    by_mode: Dict[str, List[SimResult]] = {}
    for i, period in enumerate(modes):
        by_mode[mode_name(period)] = results[i * len(seeds):(i + 1) * len(seeds)]
    return by_mode


def summarize_modes(by_mode: Dict[str, List[SimResult]], duration: float) -> Comparison:
    """
    Average each mode's series over seeds and express it relative to the oracle.

    The oracle row averages the oracle series of every run. When ``none`` is
    among the modes, the share of buckets in which it beat each rebalanced
    mode (same seed) is reported too.
    """
    everything = [r for results in by_mode.values() for r in results]
    oracle = ThroughputSeries.mean([r.oracle for r in everything])
    summaries = []
    for mode, mode_results in by_mode.items():
        series = ThroughputSeries.mean([r.throughput for r in mode_results])
        # Skipped leaves can make live counts differ slightly between modes
        best = ThroughputSeries.mean([r.oracle for r in mode_results])
        summaries.append(ModeSummary(
            mode=mode,
            overall_pct=_pct(series, best, 0.0, None),
            first_hour_pct=_pct(series, best, 0.0, HOUR_S),
            last_hour_pct=_pct(series, best, max(duration - HOUR_S, 0.0), None),
            series=series,
            seed_pcts=[100.0 * r.relative_throughput() for r in mode_results],
        ))
    n_seeds = len(next(iter(by_mode.values()))) if by_mode else 0
    summaries.append(ModeSummary("oracle", 100.0, 100.0, 100.0, oracle, [100.0] * n_seeds))

    wins = {}
    unbalanced = by_mode.get("none")
    if unbalanced is not None:
        for mode, mode_results in by_mode.items():
            if mode == "none":
                continue
            shares = [_share_better(u.throughput, b.throughput) for u, b in zip(unbalanced, mode_results)]
            wins[mode] = float(np.mean(shares)) if shares else 0.0
    return Comparison(summaries, wins, by_mode)


def stage_scaling_experiment(trace: Sequence[TraceEvent], stage_counts: Sequence[int] = DEFAULT_STAGE_COUNTS,
                             period: float = 300.0, seeds: Sequence[int] = DEFAULT_SEEDS,
                             base_stages: int = 4, jobs: int = 1, **options: Any) -> List[ScalingPoint]:
    """
    Rebalanced versus unbalanced throughput for several stage counts.

    The trace's initial population is scaled with the stage count (it was
    written for ``base_stages`` stages); churn is kept, so the preemption
    rate stays the same.

    Returns:
        List[ScalingPoint]: One point per stage count, in the given order.
    """
    options.setdefault("granularity", "fluid")
    seeds = list(seeds)
    points = []
    for n_stages in stage_counts:
        scaled = scale_for_stages(trace, base_stages, n_stages)
        config = SimConfig.from_trace(n_stages, scaled, **options)
        tasks = [(config.with_mode(p), seed) for p in (period, None) for seed in seeds]
        results = run_seeds(tasks, jobs)
        rebalanced, baseline = results[:len(seeds)], results[len(seeds):]
        oracle = ThroughputSeries.mean([r.oracle for r in results])
        rebalanced_series = ThroughputSeries.mean([r.throughput for r in rebalanced])
        baseline_series = ThroughputSeries.mean([r.throughput for r in baseline])
        point = ScalingPoint(
            n_stages=n_stages,
            rebalanced=rebalanced_series,
            baseline=baseline_series,
            oracle=oracle,
            rebalanced_pct=_pct(rebalanced_series, ThroughputSeries.mean([r.oracle for r in rebalanced]), 0.0, None),
            baseline_pct=_pct(baseline_series, ThroughputSeries.mean([r.oracle for r in baseline]), 0.0, None),
        )
        logger.info("%d stages: rebalanced %.1f%%, baseline %.1f%%",
                    n_stages, point.rebalanced_pct, point.baseline_pct)
        points.append(point)
    return points


def _pct(series: ThroughputSeries, oracle: ThroughputSeries, start: float, end: Optional[float]) -> float:
    best = oracle.total(start, end)
    if best == 0:
        return 100.0
    return 100.0 * series.total(start, end) / best


def _share_better(unbalanced: ThroughputSeries, balanced: ThroughputSeries, tol: float = 1e-9) -> float:
    pairs = list(zip(unbalanced.counts, balanced.counts))
    if not pairs:
        return 0.0
    return sum(1 for u, b in pairs if u > b * (1 + tol) + tol) / len(pairs)
