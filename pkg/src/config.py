"""
Loading simulation configs from JSON.

A config document describes the pipeline (stages, initial peers and their
devices, layer shape), the churn (a trace file), the rebalancing modes and
the seeds to run. See docs/config_format.txt for every key.
"""

import json
import logging
import os
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Optional

from src.compression import NO_COMPRESSION, CompressionSpec
from src.cost_model import DeviceProfile, default_compression, get_preset, shape_from_dict
from src.errors import ConfigError
from src.sim_engine import KillEvent, PeerSpec, SimConfig, parse_mode
from src import trace as trace_io

logger = logging.getLogger(__name__)

DEFAULT_MODES = ("none", "T=300", "T=60")

# SimConfig fields that map one-to-one onto config keys
_SCALAR_OPTIONS = {
    "bucket_s": float,
    "granularity": str,
    "overlap": bool,
    "trainers_per_peer": int,
    "inflight_per_trainer": int,
    "gamma": float,
    "epsilon": float,
    "propagation_delay_s": float,
    "announce_ttl_s": float,
    "straggler_timeout_s": float,
    "publish_jitter_s": float,
    "allreduce_period_s": float,
    "allreduce_pause_s": float,
    "state_transfer_bytes": float,
    "log_microbatches": bool,
}
_KNOWN_KEYS = set(_SCALAR_OPTIONS) | {
    "stages", "initial_peers", "device", "trace", "shape", "modes", "seeds",
    "duration_s", "compression", "kills",
}


@dataclass
class ExperimentConfig:
    path: str
    sim: SimConfig
    modes: List[Optional[float]]
    seeds: List[int]
    trace_path: Optional[str]
    document: Dict[str, Any]


def load_config(path: str) -> ExperimentConfig:
    """
    Read a config file and everything it points to.

    Parameters:
        path (str): The JSON config file.

    Returns:
        ExperimentConfig: The simulation config plus modes, seeds and the raw document.

    Raises:
        ConfigError: If the file or its trace cannot be read, or any key is invalid.
        TraceParseError: If the trace file is malformed.
    """
    try:
        with open(path) as f:
            document = json.load(f)
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    return config_from_dict(document, path)


def config_from_dict(document: Any, path: str = "<config>") -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed document; trace paths are relative to ``path``."""
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")
    unknown = sorted(set(document) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: {unknown[0]}: unknown key")

    n_stages = _typed(document, "stages", int, path)
    if n_stages is None or n_stages < 1:
        raise ConfigError(f"{path}: stages: must be a positive integer")

    shape_value = document.get("shape", "ours")
    if isinstance(shape_value, str):
        try:
            shape = get_preset(shape_value)
        except ConfigError as e:
            raise ConfigError(f"{path}: shape: {e}") from None
    else:
        shape = shape_from_dict(shape_value, source=f"{path}: shape")

    default_peer = _peer_spec(document.get("device", {}), path, "device")

    trace_path = None
    trace = []
    if "trace" in document:
        trace_path = _typed(document, "trace", str, path)
        trace_path = os.path.join(os.path.dirname(path), trace_path)
        try:
            trace = trace_io.load(trace_path, floor=n_stages)
        except OSError as e:
            raise ConfigError(f"{path}: trace: cannot read {trace_path} ({e.strerror})") from None

    options = {}
    for key, kind in _SCALAR_OPTIONS.items():
        value = _typed(document, key, kind, path)
        if value is not None:
            options[key] = value
    if "compression" in document:
        text = _typed(document, "compression", str, path)
        try:
            options["compression"] = CompressionSpec.parse(text)
        except ValueError as e:
            raise ConfigError(f"{path}: compression: {e}") from None
    else:
        preset = shape_value if isinstance(shape_value, str) else shape_value.get("preset")
        options["compression"] = default_compression(preset) if preset is not None else NO_COMPRESSION
    options["kills"] = _kills(document.get("kills", []), path)

    duration = _typed(document, "duration_s", float, path)
    if "initial_peers" in document:
        initial = _initial_peers(document["initial_peers"], default_peer, n_stages, path)
        if duration is None:
            churn = trace_io.churn_events(trace)
            if not churn:
                raise ConfigError(f"{path}: duration_s: required when the trace has no churn")
            duration = churn[-1].t
        sim = SimConfig(n_stages, initial, duration, trace=trace, shape=shape, join_peer=default_peer, **options)
    else:
        if not trace:
            raise ConfigError(f"{path}: initial_peers: required when no trace gives the initial population")
        try:
            sim = SimConfig.from_trace(n_stages, trace, duration, peer=default_peer, shape=shape, **options)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from None

    try:
        sim.validate()
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None

    modes_value = document.get("modes", list(DEFAULT_MODES))
    if not isinstance(modes_value, list) or not all(isinstance(m, str) for m in modes_value) or not modes_value:
        raise ConfigError(f"{path}: modes: must be a nonempty list of strings")
    try:
        modes = [parse_mode(m) for m in modes_value]
    except ConfigError as e:
        raise ConfigError(f"{path}: modes: {e}") from None

    seeds = document.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(_is_int(s) for s in seeds):
        raise ConfigError(f"{path}: seeds: must be a nonempty list of integers")

    logger.debug("loaded config %s: %d stage(s), %d peer(s), %d trace event(s)",
                 path, n_stages, sim.n_initial_peers, len(trace))
    return ExperimentConfig(path, sim, modes, list(seeds), trace_path, document)


def _peer_spec(data: Any, path: str, where: str) -> PeerSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: {where}: must be a JSON object")
    data = dict(data)
    service = data.pop("service_seconds", None)
    known = {f.name for f in fields(DeviceProfile)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: {where}.{unknown[0]}: unknown key")
    try:
        return PeerSpec(DeviceProfile(**data), service)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {where}: {e}") from None


def _initial_peers(value: Any, default_peer: PeerSpec, n_stages: int, path: str) -> List[List[PeerSpec]]:
    if not isinstance(value, list) or len(value) != n_stages:
        raise ConfigError(f"{path}: initial_peers: must list exactly {n_stages} stage(s)")
    stages = []
    for s, entry in enumerate(value):
        where = f"initial_peers[{s}]"
        if _is_int(entry):
            stages.append([default_peer] * entry)
        elif isinstance(entry, list):
            stages.append([_peer_spec(d, path, f"{where}[{i}]") for i, d in enumerate(entry)])
        else:
            raise ConfigError(f"{path}: {where}: must be a peer count or a list of devices")
        if not stages[-1]:
            raise ConfigError(f"{path}: {where}: Stage {s} has no initial peers")
    return stages


def _kills(value: Any, path: str) -> List[KillEvent]:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: kills: must be a list")
    kills = []
    for i, entry in enumerate(value):
        if not isinstance(entry, dict) or "t" not in entry:
            raise ConfigError(f"{path}: kills[{i}]: must be an object with 't'")
        keep = entry.get("keep_per_stage", 1)
        if not _is_number(entry["t"]) or not _is_int(keep):
            raise ConfigError(f"{path}: kills[{i}]: 't' must be a number and 'keep_per_stage' an integer")
        kills.append(KillEvent(float(entry["t"]), keep))
    return kills


def _typed(document: Dict[str, Any], key: str, kind: type, path: str) -> Any:
    if key not in document:
        return None
    value = document[key]
    if kind is float and _is_number(value):
        return float(value)
    if kind is int and _is_int(value):
        return value
    if kind in (str, bool) and isinstance(value, kind):
        return value
    raise ConfigError(f"{path}: {key}: expected {kind.__name__}, got {json.dumps(value)}")


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)
