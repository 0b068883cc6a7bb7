"""
Stochastic wiring: how a trainer picks one peer per pipeline stage.

Every stage has a priority queue of the peers serving it, keyed by the
total expected processing time already assigned to each peer. The trainer
always sends the next microbatch to the peer with the smallest total and
then adds that peer's EMA response time to its priority on every stage it
serves (interleaved weighted round-robin). A peer that fails gets priority
+inf (banned) until it is added again.
"""

import heapq
import logging
import math
from typing import Any, Callable, Dict, Hashable, Iterable, List, Optional, Set, Tuple

from src.errors import NoPeerAvailable

logger = logging.getLogger(__name__)

PeerId = Hashable

DEFAULT_GAMMA = 0.1
DEFAULT_EPSILON = 1.0
INF = math.inf


class RoutingState:
    def __init__(self, n_stages: int, gamma: float = DEFAULT_GAMMA, epsilon: float = DEFAULT_EPSILON):
        """
        Create the routing state of one trainer.

        Parameters:
            n_stages (int): Number of pipeline stages N.
            gamma (float): EMA smoothing in (0, 1].
            epsilon (float): Initial priority and EMA of a newly added peer.

        Raises:
            ValueError: If an argument is out of range.
        """
        if n_stages < 1:
            raise ValueError(f"n_stages must be >= 1, got {n_stages}")
        if not 0 < gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {gamma}")
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.n_stages = n_stages
        self.gamma = gamma
        self.epsilon = epsilon
        self.ema: Dict[PeerId, float] = {}
        self.served: Dict[PeerId, Set[int]] = {}
        # Current priority of every queued peer, per stage
        self.priorities: List[Dict[PeerId, float]] = [{} for _ in range(n_stages)]
        # Heaps of (priority, peer); entries that disagree with self.priorities are stale
        self.queues: List[List[Tuple[float, PeerId]]] = [[] for _ in range(n_stages)]

    def add_server(self, peer: PeerId, stages_served: Iterable[int]) -> None:
        """
        Add (or re-add) a peer with priority and EMA epsilon on the given stages.

        Stages the peer served before but not in ``stages_served`` drop it.
        """
        stages = set(stages_served)
        for stage in stages:
            self._check_stage(stage)
        for stage in self.served.get(peer, set()) - stages:
            del self.priorities[stage][peer]
        self.served[peer] = stages
        self.ema[peer] = self.epsilon
        for stage in stages:
            self._update(stage, peer, self.epsilon)

    def remove_server(self, peer: PeerId) -> None:
        """Forget a peer entirely (all queues and its EMA)."""
        for stage in self.served.pop(peer, set()):
            self.priorities[stage].pop(peer, None)
        self.ema.pop(peer, None)

    def ban_server(self, peer: PeerId) -> None:
        """Give the peer priority +inf on every stage it serves."""
        if peer not in self.served:
            raise ValueError(f"Cannot ban unknown peer {peer!r}")
        for stage in self.served[peer]:
            self._update(stage, peer, INF)
        logger.debug("banned peer %r on stages %s", peer, sorted(self.served[peer]))

    def is_banned(self, peer: PeerId) -> bool:
        return any(self.priorities[s].get(peer) == INF for s in self.served.get(peer, ()))

    def choose_server(self, stage: int) -> PeerId:
        """
        Pick the peer with the smallest priority on ``stage`` (lowest id on ties)
        and charge its EMA to its priority on every stage it serves.

        Raises:
            NoPeerAvailable: If the stage has no peer or every peer is banned.
        """
        heap = self.queues[self._check_stage(stage)]
        current = self.priorities[stage]
        while heap:
            priority, peer = heap[0]
            if current.get(peer) != priority:
                heapq.heappop(heap)
                continue
            if priority == INF:
                break
            new_priority = priority + self.ema[peer]
            for served in self.served[peer]:
                self._update(served, peer, new_priority)
            return peer
        raise NoPeerAvailable(stage)

    def record_response(self, peer: PeerId, elapsed: float) -> None:
        """
        Fold an observed response time into the peer's EMA.

        Raises:
            ValueError: If elapsed is not positive or the peer is unknown.
        """
        if not elapsed > 0:
            raise ValueError(f"elapsed must be positive, got {elapsed}")
        if peer not in self.ema:
            raise ValueError(f"Unknown peer {peer!r}")
        self.ema[peer] = self.gamma * elapsed + (1 - self.gamma) * self.ema[peer]

    def priority(self, peer: PeerId, stage: int) -> float:
        return self.priorities[self._check_stage(stage)][peer]

    def stage_peers(self, stage: int) -> List[PeerId]:
        return sorted(self.priorities[self._check_stage(stage)])

    def snapshot(self) -> Dict[str, Any]:
        """JSON-serialisable dump of queues and EMAs, ordered by priority."""
        queues = []
        for stage in range(self.n_stages):
            entries = sorted(self.priorities[stage].items(), key=lambda kv: (kv[1], kv[0]))
            queues.append([{"peer": str(p), "priority": _json_number(v)} for p, v in entries])
        return {
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "ema": {str(p): self.ema[p] for p in sorted(self.ema)},
            "queues": queues,
        }

    def _update(self, stage: int, peer: PeerId, priority: float) -> None:
        self.priorities[stage][peer] = priority
        heap = self.queues[stage]
        heapq.heappush(heap, (priority, peer))
        if len(heap) > 4 * len(self.priorities[stage]) + 32:
            heap[:] = [(p, peer) for peer, p in self.priorities[stage].items()]
            heapq.heapify(heap)

    def _check_stage(self, stage: int) -> int:
        if not 0 <= stage < self.n_stages:
            raise ValueError(f"Stage {stage} out of range [0, {self.n_stages})")
        return stage


def route_forward(state: RoutingState, n_stages: int, fail_oracle: Callable[[PeerId, int], bool],
                  elapsed: Optional[Callable[[PeerId, int], float]] = None) -> List[PeerId]:
    """
    Route one microbatch through stages 0..N-1.

    A failing peer is banned and the same stage is retried with the next
    choice; the stage index only advances on success.

    Parameters:
        state (RoutingState): The trainer's routing state.
        n_stages (int): Number of stages to traverse.
        fail_oracle (Callable): Returns True if the peer fails (fault or timeout) at that stage.
        elapsed (Optional[Callable]): Response time of a successful call, fed to the EMA.

    Returns:
        List[PeerId]: The chosen peer for every stage, in order.

    Raises:
        NoPeerAvailable: If some stage runs out of unbanned peers.
    """
    route = []
    layer_index = 0
    while layer_index < n_stages:
        server = state.choose_server(layer_index)
        if fail_oracle(server, layer_index):
            state.ban_server(server)
            continue
        route.append(server)
        layer_index += 1
        if elapsed is not None:
            state.record_response(server, elapsed(server, layer_index - 1))
    return route


def _json_number(value: float) -> Any:
    return "inf" if value == INF else value
