"""
Adaptive rebalancing between pipeline stages.

Every period each peer publishes its queue size under its stage key. The
loads are then summed per stage. The peer with the smallest queue on the
least loaded stage moves to the most loaded stage, after downloading that
stage's parameters and optimizer statistics. Only one peer moves per round,
and a stage's last peer never moves.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, Optional

from src.peer_registry import DEFAULT_STRAGGLER_TIMEOUT_S, PeerRegistry

logger = logging.getLogger(__name__)

PeerId = Hashable

@dataclass
class StageLoadTable:
    # stage -> peer -> published queue size
    members: Dict[int, Dict[PeerId, float]]
    # stage -> peers announced on the stage, including ones that missed the deadline
    stage_sizes: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for stage, queues in self.members.items():
            if stage < 0:
                raise ValueError(f"Stage index must be nonnegative, got {stage}")
            for peer, q in queues.items():
                if q < 0:
                    raise ValueError(f"Queue size of {peer!r} on stage {stage} is negative ({q})")

    @classmethod
    def empty(cls, n_stages: int) -> "StageLoadTable":
        return cls({s: {} for s in range(n_stages)})

    @property
    def n_stages(self) -> int:
        return max(self.members) + 1 if self.members else 0

    @property
    def loads(self) -> Dict[int, float]:
        return {s: float(sum(self.members.get(s, {}).values())) for s in range(self.n_stages)}

    def stage_size(self, stage: int) -> int:
        """Peers known to serve ``stage``: announced count if known, else reported members."""
        reported = len(self.members.get(stage, {}))
        return max(self.stage_sizes.get(stage, reported), reported)


@dataclass(frozen=True)
class RebalanceDecision:
    mover: Optional[PeerId]
    from_stage: int
    to_stage: int
    state_transfer_bytes: int = 0

    def __post_init__(self):
        if (self.mover is not None) != (self.from_stage != self.to_stage):
            raise ValueError("A decision moves a peer exactly when from_stage != to_stage")


@dataclass(frozen=True)
class StateTransfer:
    """Download model for a migrating peer: state bytes over its download link."""
    download_bps: float

    def seconds(self, nbytes: float) -> float:
        return nbytes * 8.0 / self.download_bps


class OpCounter:
    """Counts elementary steps of ``decide`` for ``complexity_probe``."""

    def __init__(self):
        self.count = 0

    def tick(self, n: int = 1) -> None:
        self.count += n


def collect_loads(registry: PeerRegistry, now: float,
                  straggler_timeout: float = DEFAULT_STRAGGLER_TIMEOUT_S) -> StageLoadTable:
    """
    Read the queue sizes published during the current round.

    The round started ``straggler_timeout`` seconds before ``now``; entries
    written earlier, or not yet visible at ``now``, are left out.

    Parameters:
        registry (PeerRegistry): The shared registry.
        now (float): Collection time, the end of the waiting window.
        straggler_timeout (float): Length of the waiting window.

    Returns:
        StageLoadTable: Published loads plus announced stage sizes.
    """
    since = now - straggler_timeout
    members = {}
    sizes = {}
    for stage in range(registry.n_stages):
        members[stage] = registry.loads_between(stage, since, now)
        sizes[stage] = len(registry.get_stage_peers(stage, now))
        missing = sizes[stage] - len(members[stage])
        if missing > 0:
            logger.debug("stage %d: %d announced peer(s) missed the load deadline", stage, missing)
    return StageLoadTable(members, sizes)


def decide(table: StageLoadTable, state_transfer_bytes: int = 0,
           counter: Optional[OpCounter] = None) -> RebalanceDecision:
    """
    Pick at most one peer to move from the least to the most loaded stage.

    The first stage wins ties for both the minimum and the maximum load, and
    the first peer (in id order) wins ties for the smallest queue.

    Parameters:
        table (StageLoadTable): Loads collected this round.
        state_transfer_bytes (int): Size of the stage state the mover downloads.
        counter (Optional[OpCounter]): Receives one tick per elementary step.

    Returns:
        RebalanceDecision: mover None when balanced, when the least loaded
        stage has nobody to send, or when it would lose its last peer.
    """
    counter = counter or OpCounter()
    s_min = s_max = -1
    l_min, l_max = float("inf"), float("-inf")

    for s in range(table.n_stages):
        load = 0.0
        for q in table.members.get(s, {}).values():
            load += q
            counter.tick()
        counter.tick()
        if load > l_max:
            s_max, l_max = s, load
        if load < l_min:
            s_min, l_min = s, load

    if s_min == s_max or not table.members.get(s_min):
        return RebalanceDecision(None, s_min, s_min)
    if table.stage_size(s_min) <= 1:
        logger.debug("stage %d would lose its last peer; not moving", s_min)
        return RebalanceDecision(None, s_min, s_min)

    i_min, q_min = None, float("inf")
    for peer, q in table.members[s_min].items():
        counter.tick()
        if q < q_min or (q == q_min and peer < i_min):
            i_min, q_min = peer, q

    return RebalanceDecision(i_min, s_min, s_max, state_transfer_bytes)


def apply(decision: RebalanceDecision, registry: PeerRegistry, transfer: StateTransfer, now: float) -> float:
    """
    Start a migration: the mover withdraws from its stage and begins downloading.

    The caller announces the mover on ``to_stage`` at the returned time via
    ``complete_migration``, unless the mover is preempted first (aborted).

    Parameters:
        decision (RebalanceDecision): The round's decision.
        registry (PeerRegistry): The shared registry.
        transfer (StateTransfer): The mover's download model.
        now (float): Current time.

    Returns:
        float: When the mover can start serving ``to_stage``.
    """
    if decision.mover is None:
        return now
    registry.withdraw(decision.mover, decision.from_stage, now)
    done = now + transfer.seconds(decision.state_transfer_bytes)
    logger.debug("peer %r migrating %d -> %d, ready at t=%.1f",
                 decision.mover, decision.from_stage, decision.to_stage, done)
    return done


def complete_migration(decision: RebalanceDecision, registry: PeerRegistry, now: float,
                       ttl: Optional[float] = None) -> None:
    """Announce the mover on its new stage once its download finished."""
    if decision.mover is not None:
        registry.announce(decision.mover, decision.to_stage, now, ttl)


def complexity_probe(M: int, S: int) -> int:
    """
    Count the elementary steps ``decide`` takes with M peers on each of S stages.

    Raises:
        ValueError: If M or S is below 1.
    """
    if M < 1 or S < 1:
        raise ValueError(f"M and S must be >= 1, got M={M}, S={S}")
    members = {
        s: {s * M + j: float((s * 7 + j * 3) % 11) for j in range(M)}
        for s in range(S)
    }
    counter = OpCounter()
    decide(StageLoadTable(members), counter=counter)
    return counter.count
