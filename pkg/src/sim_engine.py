"""
Seeded discrete-event simulation of a swarm-parallel training pipeline.

Peers serve pipeline stages; trainers push microbatches through every stage
forward and back again, picking one peer per stage with stochastic wiring.
A preemption trace adds and removes peers, and (optionally) a rebalancing
round every T seconds moves one peer from the least to the most loaded
stage through the shared registry.

Two granularities share the churn, registry, rebalancing and oracle
machinery:

- ``microbatch``: every stage visit is an event; peers have FIFO queues,
  trainers route with IWRR, failures requeue work on other peers.
- ``fluid``: the pipeline runs at ``min_s sum(peer rates)``, integrated
  between events, with per-peer queue sizes estimated by approximate mean
  value analysis. Used for long multi-seed experiments.
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from heapq import heappop, heappush
from typing import Any, Deque, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from src import rebalancer
from src.compression import CompressionSpec
from src.cost_model import PRESET_COMPRESSION, PRESETS, DeviceProfile, LayerShape, stage_cost, stage_state_bytes
from src.errors import ConfigError, NoPeerAvailable
from src.peer_registry import (
    DEFAULT_PROPAGATION_DELAY_S,
    DEFAULT_STRAGGLER_TIMEOUT_S,
    DEFAULT_TTL_S,
    PeerRegistry,
)
from src.sim_events import EventKind, EventQueue, SimEvent, log_record, spawn_generators
from src.stochastic_wiring import DEFAULT_EPSILON, DEFAULT_GAMMA, RoutingState
from src.trace import TraceEvent, churn_events, initial_population

logger = logging.getLogger(__name__)

GRANULARITIES = ("microbatch", "fluid")
DEFAULT_BUCKET_S = 60.0
DEFAULT_PUBLISH_JITTER_S = 1.0
# Share of a microbatch's service time spent in the forward pass
FORWARD_SHARE = 1.0 / 3.0
TIME_SLACK = 1e-9


def parse_mode(text: str) -> Optional[float]:
    """
    Parse a rebalancing mode: ``none`` or ``T=<seconds>`` (a bare number also works).

    Raises:
        ConfigError: If the text is neither.
    """
    value = text.strip()
    if value.lower() == "none":
        return None
    if value.upper().startswith("T="):
        value = value[2:]
    try:
        period = float(value)
    except ValueError:
        raise ConfigError(f"Unknown rebalancing mode '{text}', expected 'none' or 'T=<seconds>'") from None
    if not period > 0 or math.isinf(period):
        raise ConfigError(f"Rebalancing period must be positive and finite, got '{text}'")
    return period


def mode_name(period: Optional[float]) -> str:
    return "none" if period is None else f"T={period:g}"


@dataclass(frozen=True)
class PeerSpec:
    device: DeviceProfile = DeviceProfile()
    # Fixed per-microbatch service time; the cost model is used when None
    service_seconds: Optional[float] = None

    def __post_init__(self):
        if self.service_seconds is not None and not self.service_seconds > 0:
            raise ValueError(f"service_seconds must be positive, got {self.service_seconds}")


@dataclass(frozen=True)
class KillEvent:
    """At time ``t``, kill all but ``keep_per_stage`` random active peers of every stage."""
    t: float
    keep_per_stage: int = 1


@dataclass
class SimConfig:
    n_stages: int
    initial_peers: List[List[PeerSpec]]
    duration_s: float
    trace: List[TraceEvent] = field(default_factory=list)
    shape: LayerShape = PRESETS["ours"]
    join_peer: PeerSpec = PeerSpec()
    rebalance_period_s: Optional[float] = None
    granularity: str = "microbatch"
    overlap: bool = True
    compression: Optional[CompressionSpec] = PRESET_COMPRESSION["ours"]
    bucket_s: float = DEFAULT_BUCKET_S
    trainers_per_peer: int = 1
    inflight_per_trainer: int = 4
    gamma: float = DEFAULT_GAMMA
    epsilon: float = DEFAULT_EPSILON
    propagation_delay_s: float = DEFAULT_PROPAGATION_DELAY_S
    announce_ttl_s: float = DEFAULT_TTL_S
    straggler_timeout_s: float = DEFAULT_STRAGGLER_TIMEOUT_S
    publish_jitter_s: float = DEFAULT_PUBLISH_JITTER_S
    allreduce_period_s: float = 0.0
    allreduce_pause_s: float = 0.0
    # None means the full stage state from the cost model
    state_transfer_bytes: Optional[float] = None
    kills: List[KillEvent] = field(default_factory=list)
    log_microbatches: bool = False

    @classmethod
    def from_trace(cls, n_stages: int, trace: Sequence[TraceEvent], duration_s: Optional[float] = None,
                   peer: Optional[PeerSpec] = None, **options: Any) -> "SimConfig":
        """
        Build a config whose initial peers are the trace's t=0 population, dealt round-robin over stages.

        Raises:
            ConfigError: If the initial population cannot cover every stage, or no
                duration is given for a trace without churn.
        """
        n0 = initial_population(trace)
        if n_stages < 1 or n0 < n_stages:
            raise ConfigError(f"Initial population {n0} cannot cover {n_stages} stage(s)")
        peer = peer or PeerSpec()
        initial = [[peer] * (n0 // n_stages + (1 if s < n0 % n_stages else 0)) for s in range(n_stages)]
        if duration_s is None:
            churn = churn_events(trace)
            if not churn:
                raise ConfigError("A duration is required for a trace without churn events")
            duration_s = churn[-1].t
        return cls(n_stages, initial, duration_s, trace=list(trace), join_peer=peer, **options)

    @property
    def mode(self) -> str:
        return mode_name(self.rebalance_period_s)

    @property
    def n_initial_peers(self) -> int:
        return sum(len(stage) for stage in self.initial_peers)

    def with_mode(self, period: Optional[float]) -> "SimConfig":
        return replace(self, rebalance_period_s=period)

    def service_seconds(self, spec: PeerSpec) -> float:
        """Per-microbatch service time of a peer on any stage (forward + backward)."""
        if spec.service_seconds is not None:
            return spec.service_seconds
        return stage_cost(self.shape, spec.device, self.overlap, self.compression).step_seconds

    def migration_bytes(self) -> float:
        if self.state_transfer_bytes is not None:
            return self.state_transfer_bytes
        return stage_state_bytes(self.shape)

    def validate(self) -> None:
        """
        Check the config before a run.

        Raises:
            ConfigError: On an empty stage or any out-of-range option.
        """
        if isinstance(self.n_stages, bool) or not isinstance(self.n_stages, int) or self.n_stages < 1:
            raise ConfigError(f"n_stages must be a positive integer, got {self.n_stages!r}")
        if len(self.initial_peers) != self.n_stages:
            raise ConfigError(f"initial_peers lists {len(self.initial_peers)} stage(s), expected {self.n_stages}")
        for stage, peers in enumerate(self.initial_peers):
            if not peers:
                raise ConfigError(f"Stage {stage} has no initial peers")
        if not self.duration_s > 0 or math.isinf(self.duration_s):
            raise ConfigError(f"duration_s must be positive and finite, got {self.duration_s}")
        if not self.bucket_s > 0:
            raise ConfigError(f"bucket_s must be positive, got {self.bucket_s}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {', '.join(GRANULARITIES)}, got '{self.granularity}'")
        if self.rebalance_period_s is not None and not self.rebalance_period_s > 0:
            raise ConfigError(f"rebalance_period_s must be positive, got {self.rebalance_period_s}")
        if self.trainers_per_peer < 1 or self.inflight_per_trainer < 1:
            raise ConfigError("trainers_per_peer and inflight_per_trainer must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.propagation_delay_s < 0 or not self.announce_ttl_s > 0:
            raise ConfigError("propagation_delay_s must be >= 0 and announce_ttl_s > 0")
        if self.straggler_timeout_s < 0 or self.publish_jitter_s < 0:
            raise ConfigError("straggler_timeout_s and publish_jitter_s must be >= 0")
        if self.allreduce_period_s < 0 or self.allreduce_pause_s < 0:
            raise ConfigError("allreduce_period_s and allreduce_pause_s must be >= 0")
        if self.allreduce_pause_s > 0 and not self.allreduce_pause_s < self.allreduce_period_s:
            raise ConfigError("allreduce_pause_s must be shorter than allreduce_period_s")
        if self.state_transfer_bytes is not None and self.state_transfer_bytes < 0:
            raise ConfigError(f"state_transfer_bytes must be >= 0, got {self.state_transfer_bytes}")
        for event in self.trace:
            if event.t < 0:
                raise ConfigError(f"Trace event at negative time {event.t}")
        for kill in self.kills:
            if kill.t < 0 or kill.keep_per_stage < 0:
                raise ConfigError(f"Invalid kill event {kill}")


@dataclass
class Microbatch:
    mb_id: int
    trainer: int
    stage: int = 0
    backward: bool = False
    # stage -> peer that ran the forward pass there
    route: Dict[int, int] = field(default_factory=dict)
    dispatched_at: float = 0.0


@dataclass
class Worker:
    peer: int
    stage: int
    spec: PeerSpec
    service_seconds: float
    queue: Deque[Microbatch] = field(default_factory=deque)
    current: Optional[Microbatch] = None
    busy_until: float = 0.0
    alive: bool = True
    migrating: bool = False

    @property
    def device(self) -> DeviceProfile:
        return self.spec.device

    @property
    def active(self) -> bool:
        return self.alive and not self.migrating

    @property
    def rate(self) -> float:
        return 1.0 / self.service_seconds

    def queue_size(self) -> int:
        return len(self.queue) + (self.current is not None)

    def drain(self) -> List[Microbatch]:
        """Take every queued and in-service microbatch off this worker."""
        tasks = ([self.current] if self.current is not None else []) + list(self.queue)
        self.current = None
        self.queue.clear()
        return tasks


@dataclass
class ThroughputSeries:
    bucket_s: float
    # Completed microbatches per bucket
    counts: List[float]

    def __post_init__(self):
        if not self.bucket_s > 0:
            raise ValueError(f"bucket_s must be positive, got {self.bucket_s}")
        if any(c < 0 for c in self.counts):
            raise ValueError("Bucket counts must be nonnegative")

    @property
    def samples(self) -> List[Tuple[float, float]]:
        return [(i * self.bucket_s, c) for i, c in enumerate(self.counts)]

    def total(self, start: float = 0.0, end: Optional[float] = None) -> float:
        """Sum of the buckets starting in [start, end)."""
        end = math.inf if end is None else end
        return float(sum(c for t, c in self.samples if start <= t < end))

    @classmethod
    def mean(cls, series: Sequence["ThroughputSeries"]) -> "ThroughputSeries":
        if not series:
            raise ValueError("Cannot average an empty list of series")
        width = min(len(s.counts) for s in series)
        counts = np.mean([s.counts[:width] for s in series], axis=0)
        return cls(series[0].bucket_s, counts.tolist())


@dataclass
class StarvationInterval:
    stage: int
    start: float
    end: float


@dataclass
class SimResult:
    seed: int
    mode: str
    granularity: str
    throughput: ThroughputSeries
    oracle: ThroughputSeries
    # Time-averaged live peers per bucket
    population: List[float]
    starvation: List[StarvationInterval]
    events: List[Dict[str, Any]]
    routing: List[Dict[str, Any]]
    counters: Dict[str, int]

    @property
    def starved(self) -> bool:
        return bool(self.starvation)

    def relative_throughput(self, start: float = 0.0, end: Optional[float] = None) -> float:
        """Completed work over oracle work for the buckets starting in [start, end)."""
        best = self.oracle.total(start, end)
        done = self.throughput.total(start, end)
        if best == 0:
            return 1.0 if done == 0 else math.inf
        return done / best

    def event_log_lines(self) -> List[str]:
        return [json.dumps(record, sort_keys=True) for record in self.events]

    def write_event_log(self, path: str) -> None:
        with open(path, "w") as f:
            for line in self.event_log_lines():
                f.write(line + "\n")


def best_split(rates: Sequence[float], total: int) -> Tuple[List[int], float]:
    """
    Spread ``total`` peers over stages to maximise min_s count_s * rates[s].

    Adding each peer to the current bottleneck is optimal for this objective;
    ties go to the lowest stage.

    Returns:
        Tuple[List[int], float]: Peers per stage and the resulting pipeline rate.
    """
    counts = [0] * len(rates)
    heap = [(0.0, s) for s in range(len(rates))]
    for _ in range(max(total, 0)):
        _, s = heappop(heap)
        counts[s] += 1
        heappush(heap, (counts[s] * rates[s], s))
    value = min(c * r for c, r in zip(counts, rates)) if rates else 0.0
    return counts, value


def mva_queue_sizes(counts: Sequence[int], capacities: Sequence[float], population: float,
                    tol: float = 1e-9, max_iter: int = 500) -> List[float]:
    """
    Per-peer mean number of microbatches on each stage of a closed pipeline.

    Every peer of stage s is a station with demand 1 / capacity_s (IWRR splits
    a stage's traffic in proportion to peer speed), and ``population``
    microbatches circulate. Solved with the Schweitzer approximation of mean
    value analysis.

    Returns:
        List[float]: Queue size of one peer of each stage (0 for empty stages).
    """
    n = np.asarray(counts, dtype=float)
    cap = np.asarray(capacities, dtype=float)
    if population <= 0 or np.any(n <= 0) or np.any(cap <= 0):
        return [0.0] * len(n)
    demand = 1.0 / cap
    q = np.full(len(n), population / n.sum())
    shrink = (population - 1.0) / population
    for _ in range(max_iter):
        r = demand * (1.0 + q * shrink)
        x = population / float(np.dot(n, r))
        q_next = x * r
        if np.max(np.abs(q_next - q)) <= tol * population:
            q = q_next
            break
        q = q_next
    return q.tolist()


class Simulation:
    def __init__(self, config: SimConfig, seed: int):
        """
        Prepare one run.

        Parameters:
            config (SimConfig): What to simulate.
            seed (int): Seed of every random stream in the run.

        Raises:
            ConfigError: If the config is invalid.
        """
        config.validate()
        self.config = config
        self.seed = seed
        self.n_stages = config.n_stages
        self.fluid = config.granularity == "fluid"
        self.churn_rng, self.chaos_rng, self.jitter_rng = spawn_generators(seed, 3)

        self.events = EventQueue()
        self.now = 0.0
        self.registry = PeerRegistry(config.n_stages, config.propagation_delay_s, config.announce_ttl_s)
        self.workers: Dict[int, Worker] = {}
        # Active (alive, not migrating) peers per stage
        self.members: List[Set[int]] = [set() for _ in range(config.n_stages)]
        self.migrations: Dict[int, rebalancer.RebalanceDecision] = {}
        self.trainers: List[RoutingState] = []
        self.pending: List[Deque[Microbatch]] = [deque() for _ in range(config.n_stages)]
        self.starving: Dict[int, float] = {}
        self.starvation: List[StarvationInterval] = []
        self.log: List[Dict[str, Any]] = []
        self.counters = {
            "dispatched": 0, "completed": 0, "failed": 0, "reroutes": 0,
            "joined": 0, "left": 0, "skipped_leaves": 0, "killed": 0,
            "migrations": 0, "aborted_migrations": 0, "skipped_rounds": 0,
        }
        self.last_announce: Dict[int, float] = {}
        # Starvation tracking starts once the initial peers are placed
        self.ready = False

        n_buckets = max(1, math.ceil(config.duration_s / config.bucket_s - TIME_SLACK))
        self.completed = np.zeros(n_buckets)
        self.oracle = np.zeros(n_buckets)
        self.population = np.zeros(n_buckets)
        self.integrated_to = 0.0
        self.alive_count = 0
        self.capacities: Optional[List[float]] = None
        self.oracle_cache: Dict[int, float] = {}
        self.reference_rate = 1.0 / config.service_seconds(config.join_peer)
        self.in_flight_limit = config.n_initial_peers * config.trainers_per_peer * config.inflight_per_trainer
        self.next_peer = 0
        self.next_mb = 0

        self.handlers = {
            EventKind.STAGE_COMPLETE: self._on_stage_complete,
            EventKind.MIGRATION_COMPLETE: self._on_migration_complete,
            EventKind.PEER_JOIN: self._on_peer_join,
            EventKind.PEER_LEAVE: self._on_peer_leave,
            EventKind.LOAD_PUBLISH: self._on_load_publish,
            EventKind.REBALANCE_TICK: self._on_rebalance_tick,
            EventKind.MICROBATCH_DISPATCH: self._on_microbatch_dispatch,
        }

    def run(self) -> SimResult:
        cfg = self.config
        logger.info("simulating %d stage(s), %d peer(s), mode %s, %s granularity, seed %d",
                    self.n_stages, cfg.n_initial_peers, cfg.mode, cfg.granularity, self.seed)
        if not self.fluid:
            n_trainers = cfg.n_initial_peers * cfg.trainers_per_peer
            self.trainers = [RoutingState(self.n_stages, cfg.gamma, cfg.epsilon) for _ in range(n_trainers)]
        for stage, specs in enumerate(cfg.initial_peers):
            for spec in specs:
                self._add_peer(stage, spec)
        self.ready = True
        self._schedule_churn()
        # Announcements are refreshed once they are half a TTL old, checked every quarter TTL
        self.events.push(cfg.announce_ttl_s / 4, EventKind.REBALANCE_TICK, phase="announce")
        if cfg.rebalance_period_s is not None:
            self.events.push(cfg.rebalance_period_s, EventKind.REBALANCE_TICK, phase="round")
        for trainer in range(len(self.trainers)):
            for _ in range(cfg.inflight_per_trainer):
                self.events.push(0.0, EventKind.MICROBATCH_DISPATCH, trainer=trainer)

        end = cfg.duration_s
        while self.events and self.events.peek_time() <= end + TIME_SLACK:
            event = self.events.pop()
            self._integrate(min(event.time, end))
            self.now = event.time
            self.handlers[event.kind](event)
        self._integrate(end)
        self.now = end
        for stage, start in sorted(self.starving.items()):
            self.starvation.append(StarvationInterval(stage, start, end))

        result = self._result()
        logger.info("seed %d mode %s: %.0f microbatches, %.1f%% of optimal",
                    self.seed, cfg.mode, result.throughput.total(), 100.0 * result.relative_throughput())
        return result

    def in_system(self) -> int:
        """Microbatches currently queued, in service or waiting for an empty stage."""
        queued = sum(w.queue_size() for w in self.workers.values())
        return queued + sum(len(p) for p in self.pending)

    # Event handlers

    def _on_microbatch_dispatch(self, event: SimEvent) -> None:
        mb = Microbatch(self.next_mb, event.payload["trainer"])
        self.next_mb += 1
        self.counters["dispatched"] += 1
        self._dispatch(mb)

    def _on_stage_complete(self, event: SimEvent) -> None:
        worker = self.workers[event.payload["peer"]]
        mb = event.payload["mb"]
        if worker.current is not mb or worker.busy_until != event.time:
            # Drained by a failure or migration
            return
        worker.current = None
        trainer = self.trainers[mb.trainer]
        elapsed = self.now - mb.dispatched_at
        if elapsed > 0 and worker.peer in trainer.ema:
            trainer.record_response(worker.peer, elapsed)
        if self.config.log_microbatches:
            self._log(EventKind.STAGE_COMPLETE.label, peer=worker.peer, mb=mb.mb_id,
                      stage=mb.stage, backward=mb.backward)

        finished = False
        if not mb.backward:
            if mb.stage < self.n_stages - 1:
                mb.stage += 1
            else:
                mb.backward = True
        elif mb.stage > 0:
            mb.stage -= 1
        else:
            finished = True

        self._start_next(worker)
        if finished:
            self.counters["completed"] += 1
            self.completed[self._bucket(self.now)] += 1
            self.events.push(self.now, EventKind.MICROBATCH_DISPATCH, trainer=mb.trainer)
        else:
            self._dispatch(mb)

    def _on_peer_join(self, event: SimEvent) -> None:
        for _ in range(event.payload["count"]):
            stage = self._join_stage()
            worker = self._add_peer(stage, self.config.join_peer)
            self.counters["joined"] += 1
            self._log(EventKind.PEER_JOIN.label, peer=worker.peer, stage=stage)

    def _on_peer_leave(self, event: SimEvent) -> None:
        if "keep" in event.payload:
            self._chaos_kill(event.payload["keep"])
            return
        for _ in range(event.payload["count"]):
            victim = self._pick_victim()
            if victim is None:
                self.counters["skipped_leaves"] += 1
                logger.warning("t=%.1f: no stage can lose a peer, skipping leave", self.now)
                self._log(EventKind.PEER_LEAVE.label, peer=None, skipped=True)
                continue
            self._log(EventKind.PEER_LEAVE.label, peer=victim.peer, stage=self._stage_of(victim),
                      migrating=victim.migrating)
            self._remove_peer(victim)
            self.counters["left"] += 1

    def _on_rebalance_tick(self, event: SimEvent) -> None:
        cfg = self.config
        phase = event.payload["phase"]
        if phase == "announce":
            for peer in sorted(p for s in self.members for p in s):
                if self.now - self.last_announce[peer] >= cfg.announce_ttl_s / 2:
                    self._announce(self.workers[peer])
            self.events.push(self.now + cfg.announce_ttl_s / 4, EventKind.REBALANCE_TICK, phase="announce")
            return
        if phase == "round":
            self.events.push(self.now + cfg.rebalance_period_s, EventKind.REBALANCE_TICK, phase="round")
            if self.migrations:
                # Loads published now would not count the peers still downloading
                logger.debug("t=%.1f: %d migration(s) pending, skipping round", self.now, len(self.migrations))
                self._log(EventKind.REBALANCE_TICK.label, skipped=True, reason="migration_pending",
                          pending=sorted(self.migrations))
                self.counters["skipped_rounds"] += 1
                return
            self.events.push(self.now, EventKind.LOAD_PUBLISH)
            self.events.push(self.now + cfg.straggler_timeout_s, EventKind.REBALANCE_TICK, phase="decide")
            return

        table = rebalancer.collect_loads(self.registry, self.now, cfg.straggler_timeout_s)
        decision = rebalancer.decide(table, int(cfg.migration_bytes()))
        loads = table.loads
        record = {"loads": [loads[s] for s in range(self.n_stages)], "mover": decision.mover,
                  "from_stage": decision.from_stage, "to_stage": decision.to_stage}
        if decision.mover is None:
            self._log(EventKind.REBALANCE_TICK.label, **record)
            return

        worker = self.workers.get(decision.mover)
        if (worker is None or not worker.active or worker.stage != decision.from_stage
                or len(self.members[decision.from_stage]) <= 1):
            logger.debug("t=%.1f: mover %r is no longer eligible", self.now, decision.mover)
            self._log(EventKind.REBALANCE_TICK.label, skipped=True, reason="mover_ineligible", **record)
            return

        self._log(EventKind.REBALANCE_TICK.label, **record)
        done = rebalancer.apply(decision, self.registry, rebalancer.StateTransfer(worker.device.download_bps),
                                self.now)
        worker.migrating = True
        self.members[worker.stage].discard(worker.peer)
        self.migrations[worker.peer] = decision
        self.counters["migrations"] += 1
        self._membership_changed()
        self._requeue(worker)
        self.events.push(done, EventKind.MIGRATION_COMPLETE, peer=worker.peer)

    def _on_load_publish(self, event: SimEvent) -> None:
        queues = self._fluid_queues() if self.fluid else None
        publishers = [(stage, peer) for stage in range(self.n_stages) for peer in sorted(self.members[stage])]
        jitter = self.jitter_rng.uniform(0.0, self.config.publish_jitter_s, size=len(publishers))
        for (stage, peer), delay in zip(publishers, jitter.tolist()):
            q = queues[peer] if queues is not None else self.workers[peer].queue_size()
            self.registry.publish_load(peer, stage, q, self.now + delay, self.config.announce_ttl_s)

    def _on_migration_complete(self, event: SimEvent) -> None:
        peer = event.payload["peer"]
        decision = self.migrations.pop(peer, None)
        if decision is None:
            # Preempted while downloading
            return
        worker = self.workers[peer]
        rebalancer.complete_migration(decision, self.registry, self.now, self.config.announce_ttl_s)
        self.last_announce[peer] = self.now
        worker.stage = decision.to_stage
        worker.migrating = False
        for trainer in self.trainers:
            trainer.remove_server(peer)
        self._log(EventKind.MIGRATION_COMPLETE.label, peer=peer, from_stage=decision.from_stage,
                  to_stage=decision.to_stage)
        self._activate(worker)

    # Peers

    def _add_peer(self, stage: int, spec: PeerSpec) -> Worker:
        worker = Worker(self.next_peer, stage, spec, self.config.service_seconds(spec))
        self.next_peer += 1
        self.workers[worker.peer] = worker
        self.alive_count += 1
        self._announce(worker)
        self._activate(worker)
        return worker

    def _announce(self, worker: Worker) -> None:
        self.registry.announce(worker.peer, worker.stage, self.now, self.config.announce_ttl_s)
        self.last_announce[worker.peer] = self.now

    def _activate(self, worker: Worker) -> None:
        self.members[worker.stage].add(worker.peer)
        for trainer in self.trainers:
            trainer.add_server(worker.peer, {worker.stage})
        self._membership_changed()
        pending = self.pending[worker.stage]
        while pending:
            self._dispatch(pending.popleft())

    def _remove_peer(self, worker: Worker) -> None:
        worker.alive = False
        self.alive_count -= 1
        if worker.migrating:
            self.migrations.pop(worker.peer, None)
            self.counters["aborted_migrations"] += 1
            logger.warning("t=%.1f: peer %d preempted while migrating", self.now, worker.peer)
        else:
            self.members[worker.stage].discard(worker.peer)
            self.registry.withdraw(worker.peer, worker.stage, self.now)
        self._membership_changed()
        self._requeue(worker)

    def _stage_of(self, worker: Worker) -> int:
        """The stage a peer counts towards: its migration target while it downloads."""
        if worker.migrating:
            return self.migrations[worker.peer].to_stage
        return worker.stage

    def _join_stage(self) -> int:
        if self.config.rebalance_period_s is None:
            return int(self.churn_rng.integers(self.n_stages))
        best, best_load = 0, -math.inf
        for stage in range(self.n_stages):
            if self.registry.get_stage_peers(stage, self.now):
                load = self.registry.stage_load(stage, self.now)
            else:
                load = math.inf
            if load > best_load:
                best, best_load = stage, load
        return best

    def _pick_victim(self) -> Optional[Worker]:
        stage = int(self.churn_rng.integers(self.n_stages))
        victim = self._victim_on(stage)
        if victim is None:
            for other in self.churn_rng.permutation(self.n_stages).tolist():
                if other != stage:
                    victim = self._victim_on(other)
                    if victim is not None:
                        break
        return victim

    def _victim_on(self, stage: int) -> Optional[Worker]:
        incoming = [p for p, d in self.migrations.items() if d.to_stage == stage]
        active = sorted(self.members[stage]) if len(self.members[stage]) > 1 else []
        eligible = sorted(active + incoming)
        if not eligible:
            return None
        return self.workers[eligible[int(self.churn_rng.integers(len(eligible)))]]

    def _chaos_kill(self, keep: int) -> None:
        victims = []
        for stage in range(self.n_stages):
            active = sorted(self.members[stage])
            survivors = set()
            if active and keep > 0:
                chosen = self.chaos_rng.choice(active, size=min(keep, len(active)), replace=False)
                survivors = set(chosen.tolist())
            victims.extend(p for p in active if p not in survivors)
            victims.extend(p for p, d in self.migrations.items() if d.to_stage == stage)
        for peer in sorted(victims):
            self._remove_peer(self.workers[peer])
        self.counters["killed"] += len(victims)
        logger.info("t=%.1f: chaos killed %d peer(s), keeping %d per stage", self.now, len(victims), keep)
        self._log("Kill", killed=len(victims), keep=keep)

    # Microbatch routing

    def _dispatch(self, mb: Microbatch) -> None:
        stage = mb.stage
        if mb.backward:
            worker = self.workers.get(mb.route.get(stage))
            if worker is not None and worker.active and worker.stage == stage:
                self._enqueue(worker, mb)
                return
        trainer = self.trainers[mb.trainer]
        while True:
            try:
                peer = trainer.choose_server(stage)
            except NoPeerAvailable:
                self.pending[stage].append(mb)
                return
            worker = self.workers[peer]
            if worker.active and worker.stage == stage:
                break
            # Stale view: the peer left or moved
            trainer.ban_server(peer)
            self.counters["reroutes"] += 1
        mb.route[stage] = peer
        self._enqueue(worker, mb)

    def _enqueue(self, worker: Worker, mb: Microbatch) -> None:
        mb.dispatched_at = self.now
        worker.queue.append(mb)
        self._start_next(worker)

    def _start_next(self, worker: Worker) -> None:
        if worker.current is not None or not worker.queue or not worker.active:
            return
        mb = worker.queue.popleft()
        share = (1.0 - FORWARD_SHARE) if mb.backward else FORWARD_SHARE
        worker.current = mb
        worker.busy_until = self._after_pause(self.now) + worker.service_seconds * share
        self.events.push(worker.busy_until, EventKind.STAGE_COMPLETE, peer=worker.peer, mb=mb)

    def _requeue(self, worker: Worker) -> None:
        for mb in worker.drain():
            self.counters["failed"] += 1
            trainer = self.trainers[mb.trainer]
            if worker.peer in trainer.served:
                trainer.ban_server(worker.peer)
            self._dispatch(mb)

    # Rates and bookkeeping

    def _membership_changed(self) -> None:
        self.capacities = None
        if not self.ready:
            return
        for stage in range(self.n_stages):
            if not self.members[stage]:
                if stage not in self.starving:
                    self.starving[stage] = self.now
                    logger.debug("t=%.1f: stage %d has no active peer", self.now, stage)
                    self._log("StarvationHalt", stage=stage, phase="start")
            elif stage in self.starving:
                start = self.starving.pop(stage)
                self.starvation.append(StarvationInterval(stage, start, self.now))
                self._log("StarvationHalt", stage=stage, phase="end")

    def _stage_capacities(self) -> List[float]:
        if self.capacities is None:
            self.capacities = [sum(self.workers[p].rate for p in sorted(members)) for members in self.members]
        return self.capacities

    def _fluid_queues(self) -> Dict[int, float]:
        capacities = self._stage_capacities()
        counts = [len(m) for m in self.members]
        per_peer = mva_queue_sizes(counts, capacities, self.in_flight_limit)
        return {peer: per_peer[s] for s in range(self.n_stages) for peer in self.members[s]}

    def _oracle_rate(self) -> float:
        if self.alive_count not in self.oracle_cache:
            rates = [self.reference_rate] * self.n_stages
            self.oracle_cache[self.alive_count] = best_split(rates, self.alive_count)[1]
        return self.oracle_cache[self.alive_count]

    def _integrate(self, t: float) -> None:
        t0 = self.integrated_to
        if t <= t0:
            return
        oracle_rate = self._oracle_rate()
        pipeline_rate = min(self._stage_capacities()) if self.fluid else 0.0
        for a, b in self._working_intervals(t0, t):
            self._spread(self.oracle, a, b, oracle_rate)
            if self.fluid:
                self._spread(self.completed, a, b, pipeline_rate)
        self._spread(self.population, t0, t, self.alive_count / self.config.bucket_s)
        self.integrated_to = t

    def _spread(self, buckets: np.ndarray, a: float, b: float, rate: float) -> None:
        width = self.config.bucket_s
        i = self._bucket(a)
        while a < b:
            edge = b if i == len(buckets) - 1 else min(b, (i + 1) * width)
            buckets[i] += rate * (edge - a)
            a = edge
            i += 1

    def _bucket(self, t: float) -> int:
        return min(int(t // self.config.bucket_s), len(self.completed) - 1)

    def _working_intervals(self, a: float, b: float) -> Iterator[Tuple[float, float]]:
        """Sub-intervals of [a, b) outside the periodic all-reduce pauses."""
        period, pause = self.config.allreduce_period_s, self.config.allreduce_pause_s
        if period <= 0 or pause <= 0:
            yield a, b
            return
        t = a
        k = int(t // period)
        while t < b:
            if k >= 1:
                t = max(t, min(k * period + pause, b))
            edge = min((k + 1) * period, b)
            if t < edge:
                yield t, edge
            t = max(t, edge)
            k += 1

    def _after_pause(self, t: float) -> float:
        period, pause = self.config.allreduce_period_s, self.config.allreduce_pause_s
        if period > 0 and pause > 0:
            k = int(t // period)
            if k >= 1 and t < k * period + pause:
                return k * period + pause
        return t

    def _schedule_churn(self) -> None:
        end = self.config.duration_s
        for event in churn_events(self.config.trace):
            if event.t > end or event.delta == 0:
                continue
            kind = EventKind.PEER_JOIN if event.delta > 0 else EventKind.PEER_LEAVE
            self.events.push(event.t, kind, count=abs(event.delta))
        for kill in self.config.kills:
            if kill.t <= end:
                self.events.push(kill.t, EventKind.PEER_LEAVE, keep=kill.keep_per_stage)

    def _log(self, kind: str, **fields: Any) -> None:
        self.log.append(log_record(self.now, kind, **fields))

    def _result(self) -> SimResult:
        counters = dict(self.counters)
        counters["in_flight"] = counters["dispatched"] - counters["completed"]
        counters["in_system"] = self.in_system()
        bucket = self.config.bucket_s
        return SimResult(
            seed=self.seed,
            mode=self.config.mode,
            granularity=self.config.granularity,
            throughput=ThroughputSeries(bucket, self.completed.tolist()),
            oracle=ThroughputSeries(bucket, self.oracle.tolist()),
            population=self.population.tolist(),
            starvation=self.starvation,
            events=self.log,
            routing=[trainer.snapshot() for trainer in self.trainers],
            counters=counters,
        )


def run(config: SimConfig, seed: int) -> SimResult:
    """
    Simulate ``config`` once.

    The result depends only on (config, seed).

    Raises:
        ConfigError: If the config is invalid (for example a stage without peers).
    """
    return Simulation(config, seed).run()
