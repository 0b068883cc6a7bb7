"""
In-memory stand-in for the DHT that peers use to find each other.

Each stage is a key. Under it every peer owns a subkey that holds either an
announcement ("I serve this stage") or its latest published queue size.
A write becomes visible ``propagation_delay`` seconds after it is made and
stays visible until it expires or a later write of the same subkey becomes
visible (last write wins).

Reads are made in nondecreasing time, as a simulation clock does; history
that no read at or after the latest one can see is dropped.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Hashable, List, Optional, Set

logger = logging.getLogger(__name__)

PeerId = Hashable

DEFAULT_PROPAGATION_DELAY_S = 1.0
DEFAULT_TTL_S = 300.0
DEFAULT_STRAGGLER_TIMEOUT_S = 5.0

ANNOUNCED = 1.0


@dataclass(frozen=True)
class RegistryEntry:
    stage: int
    subkey: PeerId
    # None marks a withdrawal
    value: Optional[float]
    written_at: float
    expires_at: float
    visible_at: float


class PeerRegistry:
    def __init__(self, n_stages: int, propagation_delay: float = DEFAULT_PROPAGATION_DELAY_S,
                 ttl: float = DEFAULT_TTL_S):
        """
        Create an empty registry.

        Parameters:
            n_stages (int): Number of pipeline stages (keys).
            propagation_delay (float): Seconds before a write becomes visible.
            ttl (float): Default lifetime of a write, in seconds.
        """
        if n_stages < 1:
            raise ValueError(f"n_stages must be >= 1, got {n_stages}")
        if propagation_delay < 0 or ttl <= 0:
            raise ValueError("propagation_delay must be >= 0 and ttl > 0")
        self.n_stages = n_stages
        self.propagation_delay = propagation_delay
        self.ttl = ttl
        # stage -> peer -> writes in time order
        self.announcements: List[Dict[PeerId, List[RegistryEntry]]] = [{} for _ in range(n_stages)]
        # stage -> peer -> writes in time order
        self.loads: List[Dict[PeerId, List[RegistryEntry]]] = [{} for _ in range(n_stages)]
        # Latest time anything was read; reads never go back before it
        self.read_horizon = float("-inf")

    def announce(self, peer: PeerId, stage: int, now: float, ttl: Optional[float] = None) -> None:
        """Declare that ``peer`` serves ``stage`` from now + delay until now + ttl."""
        self._write(self.announcements, peer, stage, ANNOUNCED, now, ttl)

    def withdraw(self, peer: PeerId, stage: int, now: float) -> None:
        """Remove the peer's announcement and load entry from ``stage`` (visible after the delay)."""
        self._write(self.announcements, peer, stage, None, now, None)
        if peer in self.loads[self._check_stage(stage)]:
            self._write(self.loads, peer, stage, None, now, None)

    def publish_load(self, peer: PeerId, stage: int, queue_size: float, now: float,
                     ttl: Optional[float] = None) -> None:
        """
        Write the peer's queue size under the stage key, replacing its previous value.

        Raises:
            ValueError: If queue_size is negative or the peer never announced on this stage.
        """
        if queue_size < 0:
            raise ValueError(f"queue_size must be nonnegative, got {queue_size}")
        if peer not in self.announcements[self._check_stage(stage)]:
            raise ValueError(f"Peer {peer!r} has not announced itself on stage {stage}")
        self._write(self.loads, peer, stage, float(queue_size), now, ttl)

    def get_stage_peers(self, stage: int, now: float) -> Set[PeerId]:
        """Peers whose announcement on ``stage`` is visible and unexpired at ``now``."""
        table = self.announcements[self._check_stage(stage)]
        self._observe(now)
        return {peer for peer, writes in table.items() if self._current(writes, now) is not None}

    def stage_load(self, stage: int, now: float) -> float:
        """Sum of the visible, unexpired queue sizes published on ``stage``."""
        return sum(self.loads_between(stage, float("-inf"), now).values())

    def loads_between(self, stage: int, since: float, now: float) -> Dict[PeerId, float]:
        """
        Queue sizes written at or after ``since`` that are visible and unexpired at ``now``.

        Parameters:
            stage (int): Stage key.
            since (float): Earliest accepted write time.
            now (float): Read time.

        Returns:
            Dict[PeerId, float]: peer -> published queue size.
        """
        self._observe(now)
        loads = {}
        for peer, writes in self.loads[self._check_stage(stage)].items():
            entry = self._current(writes, now)
            if entry is not None and entry.written_at >= since:
                loads[peer] = entry.value
        return loads

    def dump(self, now: float) -> Dict[str, Any]:
        """JSON-serialisable view of what a reader would see at ``now``."""
        stages = []
        for stage in range(self.n_stages):
            peers = sorted(self.get_stage_peers(stage, now), key=repr)
            loads = self.loads_between(stage, float("-inf"), now)
            stages.append({
                "stage": stage,
                "peers": [str(p) for p in peers],
                "loads": {str(p): loads[p] for p in sorted(loads, key=repr)},
            })
        return {"time": now, "stages": stages}

    def _write(self, table: List[Dict[PeerId, List[RegistryEntry]]], peer: PeerId, stage: int,
               value: Optional[float], now: float, ttl: Optional[float]) -> None:
        stage = self._check_stage(stage)
        ttl = self.ttl if ttl is None else ttl
        if ttl <= 0:
            raise ValueError(f"ttl must be positive, got {ttl}")
        entry = RegistryEntry(stage, peer, value, now, now + ttl, now + self.propagation_delay)
        writes = table[stage].setdefault(peer, [])
        writes.append(entry)
        self._prune(writes)

    def _prune(self, writes: List[RegistryEntry]) -> None:
        # Anything shadowed by a newer write that was already visible at the
        # latest read stays shadowed for every later read.
        keep_from = 0
        for i in range(len(writes) - 1, 0, -1):
            if writes[i].visible_at <= self.read_horizon:
                keep_from = i
                break
        if keep_from:
            del writes[:keep_from]

    def _current(self, writes: List[RegistryEntry], now: float) -> Optional[RegistryEntry]:
        for entry in reversed(writes):
            if entry.visible_at <= now:
                if entry.value is None or now >= entry.expires_at:
                    return None
                return entry
        return None

    def _observe(self, now: float) -> None:
        self.read_horizon = max(self.read_horizon, now)

    def _check_stage(self, stage: int) -> int:
        if not 0 <= stage < self.n_stages:
            raise ValueError(f"Stage {stage} out of range [0, {self.n_stages})")
        return stage
