"""
Preemption traces: timestamped changes in the number of live peers.

A trace file is JSON-lines, one ``{"t": seconds, "delta": int}`` object per
line, with nondecreasing timestamps. Events at t=0 carry the initial
population; later events are churn (peers joining or leaving).
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np

from src.errors import NegativePopulationError, TraceParseError

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class TraceEvent:
    t: float
    delta: int


def load(path: str, floor: int = 1) -> List[TraceEvent]:
    """
    Read and validate a JSON-lines trace.

    Blank lines and lines starting with ``#`` are skipped.

    Parameters:
        path (str): The trace file.
        floor (int): Smallest population allowed after any event (usually
            the number of stages).

    Returns:
        List[TraceEvent]: The events in file order.

    Raises:
        TraceParseError: On malformed lines, bad fields or out-of-order
            timestamps, with the line number.
        NegativePopulationError: If the initial population or the running
            population after any later event is below floor.
        OSError: If the file cannot be read.
    """
    with open(path) as f:
        code_lines = f.read().split("\n")

    events = []
    population = 0
    last_t = float("-inf")
    # The t=0 events together make the initial population; the floor applies to their sum
    initial_line = None
    for line, text in enumerate(code_lines, start=1):
        stripped = text.strip()
        if not stripped or stripped.startswith("#"):
            continue
        event = _parse_line(path, line, text)
        if event.t < last_t:
            raise TraceParseError(
                path, f"Timestamp {event.t:g} is earlier than the previous event at {last_t:g}",
                line, _column_of(text, '"t"'), text,
            )
        last_t = event.t
        if event.t == 0:
            initial_line = line
        elif initial_line is not None:
            _check_floor(0.0, population, floor, initial_line)
            initial_line = None
        population += event.delta
        if event.t > 0:
            _check_floor(event.t, population, floor, line)
        events.append(event)
    if initial_line is not None:
        _check_floor(0.0, population, floor, initial_line)

    logger.info("loaded %d trace events from %s", len(events), path)
    return events


def save(trace: Sequence[TraceEvent], path: str) -> None:
    """Write a trace as JSON-lines; ``load`` reads it back unchanged."""
    with open(path, "w") as f:
        for event in trace:
            f.write(json.dumps({"t": event.t, "delta": event.delta}) + "\n")


def generate_stationary(n0: int, preemption_rate: float, join_rate: float, duration: float,
                        seed: int, n_stages: int = 1, burst_size: int = 1) -> List[TraceEvent]:
    """
    Synthesise a churn trace with Poisson leave and join arrivals.

    The trace starts with ``(0, n0)``. Leave events remove ``burst_size``
    peers at once. A leave that would take the population below
    ``n_stages`` is dropped, so every generated trace is valid for that
    many stages.

    Parameters:
        n0 (int): Initial population.
        preemption_rate (float): Leave events per hour.
        join_rate (float): Join events per hour.
        duration (float): Trace length in hours.
        seed (int): PRNG seed.
        n_stages (int): Population floor.
        burst_size (int): Peers removed per leave event.

    Returns:
        List[TraceEvent]: The generated trace.

    Raises:
        ValueError: On negative rates, n0 < n_stages or burst_size < 1.
    """
    if preemption_rate < 0 or join_rate < 0:
        raise ValueError("Rates must be nonnegative")
    if n0 < n_stages:
        raise ValueError(f"n0={n0} must be at least n_stages={n_stages}")
    if burst_size < 1:
        raise ValueError(f"burst_size must be >= 1, got {burst_size}")

    rng = np.random.Generator(np.random.PCG64(seed))
    horizon = duration * SECONDS_PER_HOUR
    arrivals = []
    # Joins first on equal timestamps
    for order, (rate, delta) in enumerate(((join_rate, 1), (preemption_rate, -burst_size))):
        count = rng.poisson(rate * duration) if rate > 0 else 0
        for t in np.sort(rng.uniform(0.0, horizon, size=count)):
            arrivals.append((float(t), order, delta))
    arrivals.sort()

    trace = [TraceEvent(0.0, n0)]
    population = n0
    for t, _, delta in arrivals:
        if t <= 0.0:
            continue
        if population + delta < n_stages:
            logger.debug("dropping leave at t=%.1f: population would fall below %d", t, n_stages)
            continue
        population += delta
        trace.append(TraceEvent(t, delta))
    return trace


def scale_for_stages(trace: Sequence[TraceEvent], from_S: int, to_S: int) -> List[TraceEvent]:
    """
    Rescale the initial population for a different number of stages.

    The t=0 population is multiplied by to_S / from_S (rounded up); churn
    events are kept as they are, so the preemption rate is unchanged.

    Raises:
        ValueError: If either stage count is below 1.
    """
    if from_S < 1 or to_S < 1:
        raise ValueError(f"Stage counts must be >= 1, got {from_S} -> {to_S}")
    n0 = initial_population(trace)
    scaled = math.ceil(n0 * to_S / from_S)
    churn = churn_events(trace)
    if n0 == 0:
        return list(churn)
    return [TraceEvent(0.0, scaled)] + list(churn)


def initial_population(trace: Sequence[TraceEvent]) -> int:
    return sum(event.delta for event in trace if event.t == 0)


def churn_events(trace: Sequence[TraceEvent]) -> List[TraceEvent]:
    return [event for event in trace if event.t > 0]


def summarize(trace: Sequence[TraceEvent]) -> Dict[str, Any]:
    """Counts and population extremes of a trace."""
    population = 0
    lowest = None
    for event in trace:
        population += event.delta
        if event.t > 0:
            lowest = population if lowest is None else min(lowest, population)
    churn = churn_events(trace)
    return {
        "initial": initial_population(trace),
        "events": len(churn),
        "joined": sum(e.delta for e in churn if e.delta > 0),
        "left": -sum(e.delta for e in churn if e.delta < 0),
        "final": population,
        "min_population": population if lowest is None else lowest,
        "duration_s": trace[-1].t if trace else 0.0,
    }


def _parse_line(path: str, line: int, text: str) -> TraceEvent:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise TraceParseError(path, f"Invalid JSON: {e.msg}", line, e.colno, text) from None
    if not isinstance(data, dict):
        raise TraceParseError(path, "Expected a JSON object with 't' and 'delta'", line, 1, text)

    unknown = sorted(set(data) - {"t", "delta"})
    if unknown:
        raise TraceParseError(path, f"Unknown field '{unknown[0]}'", line,
                              _column_of(text, f'"{unknown[0]}"'), text)
    for key in ("t", "delta"):
        if key not in data:
            raise TraceParseError(path, f"Missing field '{key}'", line, 1, text)

    t, delta = data["t"], data["delta"]
    if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t) or t < 0:
        raise TraceParseError(path, f"Field 't' must be a nonnegative number, got {t!r}", line,
                              _column_of(text, '"t"'), text)
    if isinstance(delta, bool) or not isinstance(delta, int):
        raise TraceParseError(path, f"Field 'delta' must be an integer, got {delta!r}", line,
                              _column_of(text, '"delta"'), text)
    return TraceEvent(float(t), delta)


def _check_floor(t: float, population: int, floor: int, line: int) -> None:
    if population < floor:
        raise NegativePopulationError(t, population, floor, line)


def _column_of(text: str, needle: str) -> int:
    return text.find(needle) + 1 or 1
