"""
Tests for the oracle and the multi-seed experiments.
"""

import itertools
import os
import unittest

from src.experiments import (
    compare_rebalancing_modes,
    oracle_throughput,
    run_modes,
    run_seeds,
    stage_scaling_experiment,
    summarize_modes,
)
from src.sim_engine import SimConfig, best_split
from src.trace import TraceEvent, generate_stationary
from tests.sim_test_utils import simple_config


class TestOracleThroughput(unittest.TestCase):
    """Best rate reachable by moving peers between stages."""

    def test_equal_rates(self):
        """8 peers on 4 equal stages: (2, 2, 2, 2), twice the per-peer rate."""
        config = simple_config([1, 1, 1, 1], 10.0, service_seconds=0.5)
        self.assertEqual(oracle_throughput(config, [5, 1, 1, 1]), 4.0)
        self.assertEqual(oracle_throughput(config, [2, 2, 2, 2]), 4.0)

    def test_unequal_rates(self):
        """Rates (1, 2) and 3 peers: split (2, 1) gives 2."""
        config = simple_config([1, 1], 10.0)
        self.assertEqual(oracle_throughput(config, [3, 0], rates=[1.0, 2.0]), 2.0)

    def test_dominates_every_distribution(self):
        """No split of the same peers beats the oracle."""
        rates = [1.0, 0.5, 2.0]
        config = simple_config([1, 1, 1], 10.0)
        for split in itertools.product(range(5), repeat=3):
            with self.subTest(split=split):
                value = min(c * r for c, r in zip(split, rates))
                self.assertLessEqual(value, oracle_throughput(config, split, rates) + 1e-12)

    def test_invalid(self):
        """Negative counts and a wrong number of rates are rejected."""
        config = simple_config([1, 1], 10.0)
        with self.assertRaises(ValueError):
            oracle_throughput(config, [2, -1])
        with self.assertRaises(ValueError):
            oracle_throughput(config, [1, 1], rates=[1.0])


class TestCompareModes(unittest.TestCase):
    """Replaying one trace under every rebalancing mode."""

    def test_no_churn_is_optimal(self):
        """Without churn every mode runs at the oracle rate."""
        comparison = compare_rebalancing_modes([TraceEvent(0.0, 16)], n_stages=4, seeds=(0, 1),
                                               duration_s=1800.0)
        self.assertEqual([s.mode for s in comparison.summaries], ["none", "T=300", "T=60", "oracle"])
        for summary in comparison.summaries:
            with self.subTest(mode=summary.mode):
                self.assertAlmostEqual(summary.overall_pct, 100.0, places=6)
                self.assertAlmostEqual(summary.first_hour_pct, 100.0, places=6)
                self.assertAlmostEqual(summary.last_hour_pct, 100.0, places=6)
        self.assertEqual(set(comparison.unbalanced_wins), {"T=300", "T=60"})

    def test_rebalancing_beats_random_churn(self):
        """Under churn both rebalanced modes beat the unbalanced pipeline."""
        trace = generate_stationary(64, 20.0, 20.0, 6.0, seed=3, n_stages=4)
        comparison = compare_rebalancing_modes(trace, n_stages=4, seeds=(0, 1, 2))
        none = comparison.summary("none").overall_pct
        t300 = comparison.summary("T=300").overall_pct
        t60 = comparison.summary("T=60").overall_pct
        self.assertLess(none, t300)
        self.assertLess(none, t60)
        self.assertLessEqual(max(none, t300, t60), 100.0 + 1e-6)
        for share in comparison.unbalanced_wins.values():
            self.assertGreaterEqual(share, 0.0)
            self.assertLessEqual(share, 1.0)
        self.assertEqual(len(comparison.summary("none").seed_pcts), 3)

    def test_rows(self):
        """Rows carry the comparison table columns."""
        comparison = compare_rebalancing_modes([TraceEvent(0.0, 8)], n_stages=2, periods=(60.0,), seeds=(0,),
                                               duration_s=600.0)
        self.assertEqual(list(comparison.rows()[0]), ["mode", "overall_pct", "first_hour_pct", "last_hour_pct"])
        with self.assertRaises(KeyError):
            comparison.summary("T=300")

    def test_without_unbalanced_mode(self):
        """No 'none' runs, no win shares."""
        config = simple_config([2, 2], 600.0, granularity="fluid")
        by_mode = run_modes(config, [60.0], [0])
        self.assertEqual(list(by_mode), ["T=60"])
        self.assertEqual(summarize_modes(by_mode, 600.0).unbalanced_wins, {})


class TestRunSeeds(unittest.TestCase):
    """Parallel runs give the same results in the same order."""

    def test_parallel_matches_serial(self):
        """Two worker processes reproduce the serial results."""
        config = simple_config([2, 3], 900.0, trace=[TraceEvent(100.0, -1), TraceEvent(400.0, 2)],
                               granularity="fluid", rebalance_period_s=60.0)
        tasks = [(config, seed) for seed in range(4)]
        serial = run_seeds(tasks, jobs=1)
        parallel = run_seeds(tasks, jobs=2)
        self.assertEqual([r.seed for r in parallel], [0, 1, 2, 3])
        for a, b in zip(serial, parallel):
            self.assertEqual(a.throughput.counts, b.throughput.counts)
            self.assertEqual(a.event_log_lines(), b.event_log_lines())


class TestStageScaling(unittest.TestCase):
    """Rebalanced versus unbalanced throughput as the pipeline deepens."""

    def test_rebalancing_helps_at_every_depth(self):
        """Rebalanced >= baseline, and one stage makes both the same."""
        trace = generate_stationary(32, 15.0, 15.0, 6.0, seed=9, n_stages=4)
        points = stage_scaling_experiment(trace, stage_counts=(1, 4, 8), seeds=(0, 1))
        self.assertEqual([p.n_stages for p in points], [1, 4, 8])
        single = points[0]
        self.assertAlmostEqual(single.rebalanced_pct, single.baseline_pct, places=6)
        for point in points[1:]:
            with self.subTest(n_stages=point.n_stages):
                self.assertGreaterEqual(point.rebalanced_pct, point.baseline_pct)
                self.assertEqual(len(point.rebalanced.counts), len(point.oracle.counts))

    def test_oracle_series_uses_live_peers(self):
        """Each oracle bucket equals best_split of the live peers for a churn-free trace."""
        trace = [TraceEvent(0.0, 8)]
        points = stage_scaling_experiment(trace, stage_counts=(4,), seeds=(0,), duration_s=600.0)
        config = SimConfig.from_trace(4, trace, duration_s=600.0)
        rate = 1.0 / config.service_seconds(config.join_peer)
        expected = best_split([rate] * 4, 8)[1] * 60.0
        for count in points[0].oracle.counts:
            self.assertAlmostEqual(count, expected, places=6)


class TestLongRunReplication(unittest.TestCase):
    """Full-scale comparisons: 32 hours, 400 peers, 10 seeds."""

    def setUp(self):
        self.jobs = min(4, os.cpu_count() or 1)

    def test_rebalancing_modes_ordering(self):
        """Balanced churn of 20 leaves and 20 joins per hour on 4 stages: none < T=300 <= T=60 <= 100%."""
        trace = generate_stationary(400, 20.0, 20.0, 32.0, seed=0, n_stages=4)
        comparison = compare_rebalancing_modes(trace, n_stages=4, seeds=range(10), jobs=self.jobs)
        none, t300, t60 = (comparison.summary(mode) for mode in ("none", "T=300", "T=60"))
        self.assertLess(none.overall_pct, t300.overall_pct)
        self.assertLessEqual(t300.overall_pct, t60.overall_pct)
        self.assertLessEqual(t60.overall_pct, 100.0 + 1e-6)
        self.assertGreaterEqual(t60.overall_pct - none.overall_pct, 5.0)
        for summary in (none, t300, t60):
            with self.subTest(mode=summary.mode):
                self.assertGreaterEqual(summary.first_hour_pct, 95.0)
        self.assertGreaterEqual(t300.last_hour_pct - none.last_hour_pct, 10.0)

    def test_stage_scaling_at_every_depth(self):
        """4, 8, 16 and 32 stages with proportionally more peers: rebalanced >= unbalanced."""
        trace = generate_stationary(100, 20.0, 20.0, 16.0, seed=1, n_stages=4)
        points = stage_scaling_experiment(trace, stage_counts=(4, 8, 16, 32), seeds=range(10), jobs=self.jobs)
        self.assertEqual([p.n_stages for p in points], [4, 8, 16, 32])
        for point in points:
            with self.subTest(n_stages=point.n_stages):
                self.assertGreaterEqual(point.rebalanced_pct, point.baseline_pct)
                self.assertLessEqual(point.rebalanced_pct, 100.0 + 1e-6)


if __name__ == "__main__":
    unittest.main()
