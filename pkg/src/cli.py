"""
Command-line front end.

    swarmsim simulate CONFIG [--seeds 0-9] [--modes none,T=300,T=60] [--out DIR]
    swarmsim costmodel [--preset NAME|all ...] [--rtt 0,10,50] [--bandwidth MBPS]
    swarmsim trace-gen --n0 N --leave-rate R --join-rate R --hours H --out FILE
    swarmsim payload [--compression none,int8,maxout:4]

Tables go to standard output as CSV; progress and diagnostics go to
standard error through logging.
"""

import argparse
import csv
import datetime
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, TextIO

from src import __version__
from src.compression import CompressionSpec
from src.config import load_config
from src.cost_model import (
    DEFAULT_BANDWIDTH_BPS,
    DEFAULT_EFFECTIVE_FLOPS,
    PRESETS,
    DeviceProfile,
    activation_payload_bits,
    get_preset,
    utilization_grid,
)
from src.errors import ConfigError, NegativePopulationError, SwarmSimError, TraceParseError
from src.experiments import run_modes, summarize_modes
from src.sim_engine import GRANULARITIES, ThroughputSeries, parse_mode
from src import trace as trace_io

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STARVED = 1
EXIT_ERROR = 2

OUT_ENV = "SWARMSIM_OUT"
DEFAULT_OUT = "swarmsim_out"
DEFAULT_RTTS_MS = "0,10,50,100,200"
DEFAULT_PAYLOAD_COMPRESSIONS = "none,int8,maxout:4,bottleneck:0.25"
COMPARISON_COLUMNS = ("mode", "overall_pct", "first_hour_pct", "last_hour_pct")


@dataclass
class RunManifest:
    config_path: str
    config: Dict[str, Any]
    seeds: List[int]
    modes: List[str]
    out_dir: str
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    argv: List[str] = field(default_factory=list)

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run a subcommand.

    Returns:
        int: 0 on success, 1 when a run starved (outputs still written),
        2 on a configuration or I/O error.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args, argv)
    except SwarmSimError as e:
        print(f"{_error_kind(e)} Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(f"IO Error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarmsim", description="Swarm-parallel training pipeline simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug details")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="Run a config under several modes and seeds")
    sim.add_argument("config", help="JSON config file")
    sim.add_argument("--seeds", type=_seed_list, help="Seeds, e.g. '7', '0,3,5' or '0-9' (default: from config)")
    sim.add_argument("--modes", type=_mode_list, help="Modes, e.g. 'none,T=300,T=60' (default: from config)")
    sim.add_argument("--out", help=f"Output directory (default: ${OUT_ENV} or {DEFAULT_OUT})")
    sim.add_argument("--jobs", type=_positive_int, default=1, help="Worker processes")
    sim.add_argument("--duration", type=float, help="Simulated seconds (overrides the config)")
    sim.add_argument("--granularity", choices=GRANULARITIES, help="Simulation granularity (overrides the config)")
    sim.add_argument("--inspect", action="store_true", help="Also write final routing-state snapshots")
    sim.set_defaults(handler=cmd_simulate)

    cost = commands.add_parser("costmodel", help="Print stage utilization per preset and RTT")
    cost.add_argument("--preset", action="append", help="Preset name or 'all' (repeatable, default all)")
    cost.add_argument("--rtt", type=_float_list, default=_float_list(DEFAULT_RTTS_MS), help="RTTs in ms")
    cost.add_argument("--bandwidth", type=_bandwidth, default=DEFAULT_BANDWIDTH_BPS / 1e6,
                      help="Upload and download bandwidth in Mb/s ('inf' allowed)")
    cost.add_argument("--flops", type=float, default=DEFAULT_EFFECTIVE_FLOPS, help="Effective FLOP/s")
    cost.add_argument("--no-overlap", action="store_true", help="Add compute and communication time")
    cost.add_argument("--compression", type=_compression,
                      help="none, int8, maxout:K or bottleneck:C (default: each preset's own)")
    cost.set_defaults(handler=cmd_costmodel)

    gen = commands.add_parser("trace-gen", help="Generate a stationary churn trace")
    gen.add_argument("--n0", type=_positive_int, required=True, help="Initial population")
    gen.add_argument("--leave-rate", type=float, default=0.0, help="Leave events per hour")
    gen.add_argument("--join-rate", type=float, default=0.0, help="Join events per hour")
    gen.add_argument("--hours", type=float, default=32.0, help="Trace length in hours")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--stages", type=_positive_int, default=1, help="Population floor")
    gen.add_argument("--burst", type=_positive_int, default=1, help="Peers removed per leave event")
    gen.add_argument("--out", required=True, help="Output .jsonl file")
    gen.set_defaults(handler=cmd_trace_gen)

    payload = commands.add_parser("payload", help="Print bits per microbatch for each preset and compression")
    payload.add_argument("--compression", type=lambda s: [_compression(c) for c in s.split(",")],
                         default=[CompressionSpec.parse(c) for c in DEFAULT_PAYLOAD_COMPRESSIONS.split(",")])
    payload.set_defaults(handler=cmd_payload)
    return parser


def cmd_simulate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    """Run every (mode, seed) pair of a config and write series, comparison, event logs and manifest."""
    started = _now()
    experiment = load_config(args.config)
    sim = experiment.sim
    if args.duration is not None:
        sim = replace(sim, duration_s=args.duration)
    if args.granularity is not None:
        sim = replace(sim, granularity=args.granularity)
    sim.validate()
    seeds = args.seeds if args.seeds is not None else experiment.seeds
    modes = args.modes if args.modes is not None else experiment.modes
    out_dir = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(out_dir, exist_ok=True)

    by_mode = run_modes(sim, modes, seeds, args.jobs)
    comparison = summarize_modes(by_mode, sim.duration_s)

    for summary in comparison.summaries:
        _write_series(os.path.join(out_dir, f"throughput_{_slug(summary.mode)}.csv"), summary.series)
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as f:
        _write_rows(f, COMPARISON_COLUMNS, comparison.rows())
    if comparison.unbalanced_wins:
        with open(os.path.join(out_dir, "unbalanced_wins.csv"), "w", newline="") as f:
            rows = [{"mode": m, "share": s} for m, s in comparison.unbalanced_wins.items()]
            _write_rows(f, ("mode", "share"), rows)

    starved = False
    for mode, results in by_mode.items():
        for result in results:
            stem = f"{_slug(mode)}_seed{result.seed}"
            result.write_event_log(os.path.join(out_dir, f"events_{stem}.jsonl"))
            if args.inspect:
                with open(os.path.join(out_dir, f"routing_{stem}.json"), "w") as f:
                    json.dump(result.routing, f, sort_keys=True)
            if result.starved:
                starved = True
                logger.warning("mode %s seed %d: %d starvation interval(s)", mode, result.seed,
                               len(result.starvation))

    RunManifest(
        config_path=os.path.abspath(args.config),
        config=experiment.document,
        seeds=list(seeds),
        modes=list(by_mode),
        out_dir=os.path.abspath(out_dir),
        started_at=started,
        finished_at=_now(),
        argv=["swarmsim"] + list(argv),
    ).write(os.path.join(out_dir, "manifest.json"))

    _write_rows(sys.stdout, COMPARISON_COLUMNS, comparison.rows())
    logger.info("wrote results to %s", out_dir)
    return EXIT_STARVED if starved else EXIT_OK


def cmd_costmodel(args: argparse.Namespace, argv: Sequence[str]) -> int:
    """Print the utilization grid (preset x RTT) as CSV."""
    presets = _preset_names(args.preset)
    bandwidth = args.bandwidth * 1e6
    device = DeviceProfile(args.flops, bandwidth, bandwidth)
    rows = utilization_grid(presets, [ms / 1000.0 for ms in args.rtt], device,
                            overlap=not args.no_overlap, compression=args.compression)
    _write_rows(sys.stdout, ("preset", "compression", "rtt_ms", "compute_s", "comm_s", "utilization"), rows)
    return EXIT_OK


def cmd_trace_gen(args: argparse.Namespace, argv: Sequence[str]) -> int:
    """Generate a trace with Poisson churn and write it as JSON-lines."""
    try:
        trace = trace_io.generate_stationary(args.n0, args.leave_rate, args.join_rate, args.hours,
                                             args.seed, n_stages=args.stages, burst_size=args.burst)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    trace_io.save(trace, args.out)
    summary = trace_io.summarize(trace)
    logger.info("wrote %s: %d initial peer(s), %d joined, %d left, final %d",
                args.out, summary["initial"], summary["joined"], summary["left"], summary["final"])
    return EXIT_OK


def cmd_payload(args: argparse.Namespace, argv: Sequence[str]) -> int:
    """Print the activation payload of every preset under every compression."""
    rows = []
    for name, shape in PRESETS.items():
        for spec in args.compression:
            rows.append({"preset": name, "compression": str(spec), "bits": activation_payload_bits(shape, spec)})
    _write_rows(sys.stdout, ("preset", "compression", "bits"), rows)
    return EXIT_OK


def _write_series(path: str, series: ThroughputSeries) -> None:
    with open(path, "w", newline="") as f:
        rows = [{"bucket_start_s": t, "completed": c} for t, c in series.samples]
        _write_rows(f, ("bucket_start_s", "completed"), rows)


def _write_rows(stream: TextIO, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> None:
    writer = csv.DictWriter(stream, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(v) for k, v in row.items()})


def _csv_value(value: Any) -> Any:
    return repr(value) if isinstance(value, float) else value


def _slug(mode: str) -> str:
    return mode.replace("=", "")


def _preset_names(requested: Optional[List[str]]) -> List[str]:
    if not requested or "all" in requested:
        return list(PRESETS)
    for name in requested:
        get_preset(name)
    return requested


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _error_kind(error: SwarmSimError) -> str:
    if isinstance(error, TraceParseError):
        return "Parse"
    if isinstance(error, NegativePopulationError):
        return "Trace"
    if isinstance(error, ConfigError):
        return "Config"
    return "Simulation"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _seed_list(text: str) -> List[int]:
    seeds = []
    try:
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                lo, hi = part.strip().split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list '{text}'") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _mode_list(text: str) -> List[Optional[float]]:
    try:
        return [parse_mode(part) for part in text.split(",")]
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list '{text}'") from None


def _bandwidth(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid bandwidth '{text}'") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return value


def _compression(text: str) -> CompressionSpec:
    try:
        return CompressionSpec.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer '{text}'") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value
