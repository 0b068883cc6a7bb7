import enum
import heapq
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np


class EventKind(enum.IntEnum):
    """Event kinds; the value is the tie-break rank for events at the same time."""
    STAGE_COMPLETE = 0
    MIGRATION_COMPLETE = 1
    PEER_JOIN = 2
    PEER_LEAVE = 3
    LOAD_PUBLISH = 4
    REBALANCE_TICK = 5
    MICROBATCH_DISPATCH = 6

    @property
    def label(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))


@dataclass(order=True)
class SimEvent:
    time: float
    rank: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Dict[str, Any] = field(compare=False, default_factory=dict)


class EventQueue:
    """Min-heap of events ordered by (time, kind rank, insertion sequence)."""

    def __init__(self):
        self._heap: List[SimEvent] = []
        self._seq = 0

    def push(self, time: float, kind: EventKind, **payload: Any) -> SimEvent:
        event = SimEvent(time, int(kind), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def peek_time(self) -> Optional[float]:
        return self._heap[0].time if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


def spawn_generators(seed: int, n: int) -> List[np.random.Generator]:
    """
    Independent PRNG streams derived from one seed.

    Each stream drives one source of randomness (churn, chaos, jitter), so
    adding draws to one never shifts the others.
    """
    return [np.random.Generator(np.random.PCG64(stream)) for stream in np.random.SeedSequence(seed).spawn(n)]


def log_record(time: float, kind: str, **fields: Any) -> Dict[str, Any]:
    record = {"t": time, "kind": kind}
    record.update(fields)
    return record
