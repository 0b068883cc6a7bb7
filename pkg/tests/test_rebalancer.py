"""
Tests for load collection, the rebalancing decision and migrations.
"""

import itertools
import unittest

from src.peer_registry import PeerRegistry
from src.rebalancer import (
    RebalanceDecision,
    StageLoadTable,
    StateTransfer,
    apply,
    collect_loads,
    complete_migration,
    complexity_probe,
    decide,
)


def best_single_move(members, n_stages):
    """
    Exhaustive search over every single-peer move that leaves each stage a peer.

    A move scores the load-weighted capacity sum_s load_s * peers_s of the
    placement it produces; requeued work (the mover's queue) breaks ties, then
    the peer id. Returns (mover, from, to), or None when no move is allowed.
    """
    loads = [sum(members[s].values()) for s in range(n_stages)]

    def weighted_capacity(counts):
        return sum(load * count for load, count in zip(loads, counts))

    best, best_key = None, None
    for a in range(n_stages):
        if len(members[a]) <= 1:
            continue
        for b in range(n_stages):
            if b == a:
                continue
            counts = [len(members[s]) for s in range(n_stages)]
            counts[a] -= 1
            counts[b] += 1
            for peer, q in members[a].items():
                key = (-weighted_capacity(counts), q, peer)
                if best_key is None or key < best_key:
                    best, best_key = (peer, a, b), key
    return best


class TestDecide(unittest.TestCase):
    """One peer moves from the least to the most loaded stage."""

    def test_moves_to_most_loaded(self):
        """Loads {0: 10, 1: 2}: the stage-1 peer moves 1 -> 0."""
        table = StageLoadTable({0: {"p0": 10.0}, 1: {"pA": 2.0}}, stage_sizes={1: 2})
        self.assertEqual(decide(table), RebalanceDecision("pA", 1, 0))

    def test_last_peer_guard(self):
        """A stage whose only peer would leave keeps it."""
        table = StageLoadTable({0: {"p0": 10.0}, 1: {"pA": 2.0}})
        decision = decide(table)
        self.assertIsNone(decision.mover)
        self.assertEqual(decision.from_stage, decision.to_stage)

    def test_guard_counts_announced_peers(self):
        """A peer that missed the deadline still counts towards the stage size."""
        table = StageLoadTable({0: {"p0": 10.0, "p1": 4.0}, 1: {"pA": 2.0}}, stage_sizes={0: 2, 1: 1})
        self.assertIsNone(decide(table).mover)
        table = StageLoadTable({0: {"p0": 10.0, "p1": 4.0}, 1: {"pA": 2.0}}, stage_sizes={0: 2, 1: 3})
        self.assertEqual(decide(table).mover, "pA")

    def test_balanced(self):
        """Uniform loads: no mover, and the first stage is both min and max."""
        table = StageLoadTable({0: {"a": 5.0}, 1: {"b": 2.0, "c": 3.0}})
        self.assertEqual(decide(table), RebalanceDecision(None, 0, 0))

    def test_smallest_queue_moves(self):
        """Within the least loaded stage the smallest queue moves."""
        table = StageLoadTable({0: {"x": 9.0}, 1: {"pA": 3.0, "pB": 1.0}})
        self.assertEqual(decide(table).mover, "pB")

    def test_first_peer_wins_queue_ties(self):
        """Equal queues go to the lowest id."""
        table = StageLoadTable({0: {"x": 9.0}, 1: {"pB": 1.0, "pA": 1.0}})
        self.assertEqual(decide(table).mover, "pA")

    def test_empty_least_loaded_stage(self):
        """A stage nobody reported from has load 0 but nobody to send."""
        table = StageLoadTable({0: {"a": 1.0, "b": 1.0}, 1: {}})
        self.assertIsNone(decide(table).mover)

    def test_state_transfer_bytes_carried(self):
        """The decision carries the download size."""
        table = StageLoadTable({0: {"x": 9.0}, 1: {"a": 0.0, "b": 1.0}})
        self.assertEqual(decide(table, state_transfer_bytes=1234).state_transfer_bytes, 1234)

    def test_agrees_with_exhaustive_search(self):
        """Every placement of up to 6 peers on up to 3 stages: same stage pair and mover as brute force."""
        for n_stages in (1, 2, 3):
            for n_peers in range(0, 7):
                patterns = [
                    [float(2 ** p) for p in range(n_peers)],
                    [float(2 ** (n_peers - 1 - p)) for p in range(n_peers)],
                    [1.0] * n_peers,
                    [float(p % 2) for p in range(n_peers)],
                ]
                for stages in itertools.product(range(n_stages), repeat=n_peers):
                    for queues in patterns:
                        members = {s: {} for s in range(n_stages)}
                        for peer, (s, q) in enumerate(zip(stages, queues)):
                            members[s][peer] = q
                        self.check_against_search(members, n_stages)

    def check_against_search(self, members, n_stages):
        decision = decide(StageLoadTable(members))
        loads = [sum(members[s].values()) for s in range(n_stages)]
        context = f"members={members}"
        if decision.mover is not None:
            self.assertGreaterEqual(len(members[decision.from_stage]), 2, context)
        elif decision.from_stage != loads.index(max(loads)):
            # Nothing moved although loads differ: only the guard may stop it
            self.assertLessEqual(len(members[decision.from_stage]), 1, context)
        if len(set(loads)) < n_stages or n_stages == 1:
            return
        s_min = loads.index(min(loads))
        expected = best_single_move(members, n_stages)
        if len(members[s_min]) <= 1:
            self.assertIsNone(decision.mover, context)
            return
        self.assertEqual((decision.from_stage, decision.to_stage), expected[1:], context)
        self.assertEqual(decision.mover, expected[0], context)

    def test_never_empties_a_stage(self):
        """Applying decisions repeatedly never leaves a stage without members."""
        members = {0: {0: 5.0}, 1: {1: 0.0, 2: 0.0, 3: 1.0}, 2: {4: 2.0}}
        for _ in range(20):
            decision = decide(StageLoadTable(members))
            if decision.mover is None:
                break
            q = members[decision.from_stage].pop(decision.mover)
            members[decision.to_stage][decision.mover] = q
            self.assertTrue(all(members[s] for s in members))
        self.assertEqual(sum(len(m) for m in members.values()), 5)

    def test_invalid_table(self):
        """Negative queues and stage indices are rejected."""
        with self.assertRaises(ValueError):
            StageLoadTable({0: {"a": -1.0}})
        with self.assertRaises(ValueError):
            StageLoadTable({-1: {}})

    def test_decision_consistency(self):
        """A mover is present exactly when the stages differ."""
        with self.assertRaises(ValueError):
            RebalanceDecision("a", 0, 0)
        with self.assertRaises(ValueError):
            RebalanceDecision(None, 0, 1)


class TestCollectLoads(unittest.TestCase):
    """Reading one round's publications from the registry."""

    def setUp(self):
        self.registry = PeerRegistry(n_stages=2, propagation_delay=1.0, ttl=300.0)
        for peer, stage in (("a", 0), ("b", 0), ("c", 1)):
            self.registry.announce(peer, stage, now=0.0)

    def test_reproduces_published_values(self):
        """Loads {0: 10, 1: 2} from three peers."""
        for peer, stage, q in (("a", 0, 6.0), ("b", 0, 4.0), ("c", 1, 2.0)):
            self.registry.publish_load(peer, stage, q, now=100.0)
        table = collect_loads(self.registry, now=105.0, straggler_timeout=5.0)
        self.assertEqual(table.loads, {0: 10.0, 1: 2.0})
        self.assertEqual(table.members[0], {"a": 6.0, "b": 4.0})
        self.assertEqual(table.stage_sizes, {0: 2, 1: 1})

    def test_late_and_stale_publications_omitted(self):
        """Writes not yet visible or from before the round are left out."""
        self.registry.publish_load("a", 0, 6.0, now=90.0)
        self.registry.publish_load("b", 0, 4.0, now=104.5)
        self.registry.publish_load("c", 1, 2.0, now=101.0)
        table = collect_loads(self.registry, now=105.0, straggler_timeout=5.0)
        self.assertEqual(table.members, {0: {}, 1: {"c": 2.0}})
        self.assertEqual(table.stage_size(0), 2)

    def test_no_publications(self):
        """An empty round gives an all-zero table."""
        table = collect_loads(self.registry, now=50.0)
        self.assertEqual(table.loads, {0: 0.0, 1: 0.0})


class TestMigration(unittest.TestCase):
    """Withdraw, download, announce."""

    def setUp(self):
        self.registry = PeerRegistry(n_stages=2, propagation_delay=0.0)
        for peer, stage in (("a", 0), ("b", 0), ("c", 1)):
            self.registry.announce(peer, stage, now=0.0)

    def test_zero_byte_transfer(self):
        """Nothing to download means the peer is ready immediately."""
        decision = RebalanceDecision("a", 0, 1, state_transfer_bytes=0)
        self.assertEqual(apply(decision, self.registry, StateTransfer(500e6), now=10.0), 10.0)

    def test_download_time(self):
        """1 Gbit over a 500 Mb/s link takes 2 s."""
        decision = RebalanceDecision("a", 0, 1, state_transfer_bytes=125_000_000)
        self.assertAlmostEqual(apply(decision, self.registry, StateTransfer(500e6), now=10.0), 12.0)

    def test_peer_serves_neither_stage_while_downloading(self):
        """During the download the mover is listed nowhere; afterwards only on its new stage."""
        decision = RebalanceDecision("a", 0, 1, state_transfer_bytes=125_000_000)
        done = apply(decision, self.registry, StateTransfer(500e6), now=10.0)
        self.assertEqual(self.registry.get_stage_peers(0, 11.0), {"b"})
        self.assertEqual(self.registry.get_stage_peers(1, 11.0), {"c"})
        complete_migration(decision, self.registry, done)
        self.assertEqual(self.registry.get_stage_peers(1, done), {"a", "c"})
        total = sum(len(self.registry.get_stage_peers(s, done)) for s in range(2))
        self.assertEqual(total, 3)

    def test_aborted_migration(self):
        """A mover preempted mid-transfer ends up on neither stage."""
        decision = RebalanceDecision("a", 0, 1, state_transfer_bytes=125_000_000)
        apply(decision, self.registry, StateTransfer(500e6), now=10.0)
        for stage in range(2):
            self.assertNotIn("a", self.registry.get_stage_peers(stage, 20.0))

    def test_no_mover_is_a_no_op(self):
        """Applying an empty decision changes nothing."""
        decision = RebalanceDecision(None, 0, 0)
        self.assertEqual(apply(decision, self.registry, StateTransfer(1e6), now=3.0), 3.0)
        complete_migration(decision, self.registry, 3.0)
        self.assertEqual(self.registry.get_stage_peers(0, 3.0), {"a", "b"})


class TestComplexity(unittest.TestCase):
    """decide is linear in peers times stages."""

    def test_minimum(self):
        """A single peer on a single stage still costs something."""
        self.assertGreaterEqual(complexity_probe(1, 1), 1)

    def test_doubling_peers(self):
        """Doubling M at most multiplies the count by 2.5, for M, S in {64, 128, 256}."""
        for m, s in itertools.product((64, 128), (64, 128, 256)):
            with self.subTest(M=m, S=s):
                self.assertLessEqual(complexity_probe(2 * m, s) / complexity_probe(m, s), 2.5)

    def test_doubling_stages(self):
        """Doubling S at most multiplies the count by 2.5, for M, S in {64, 128, 256}."""
        for m, s in itertools.product((64, 128, 256), (64, 128)):
            with self.subTest(M=m, S=s):
                self.assertLessEqual(complexity_probe(m, 2 * s) / complexity_probe(m, s), 2.5)

    def test_counts_every_queue_read(self):
        """The mover scan is counted: M * S queue reads, S stage totals, M candidates."""
        for m, s in ((2, 2), (64, 64), (256, 128)):
            with self.subTest(M=m, S=s):
                self.assertEqual(complexity_probe(m, s), m * s + s + m)

    def test_bounded_by_m_times_s(self):
        """The count stays within a constant factor of M * S."""
        for m, s in itertools.product((1, 4, 32), (1, 4, 32)):
            with self.subTest(M=m, S=s):
                self.assertLessEqual(complexity_probe(m, s), 3 * m * s)

    def test_invalid(self):
        """M and S must be positive."""
        with self.assertRaises(ValueError):
            complexity_probe(0, 1)


if __name__ == "__main__":
    unittest.main()
