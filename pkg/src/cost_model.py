"""
Compute, communication and utilization model of one pipeline stage.

A Transformer stage does O(B*L*H^2) work per microbatch but only sends an
O(B*L*H) activation tensor to its neighbour, so the compute/communication
ratio grows linearly with the hidden size. Every function here is pure.
"""

import json
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence

from src.compression import NO_COMPRESSION, CompressionSpec, payload_bits
from src.errors import ConfigError

# Achievable FLOP/s of one accelerator running one Transformer stage. A
# calibration input: with it, GPT-3-sized layers at 500 Mb/s and zero
# latency sit near 80% utilization.
DEFAULT_EFFECTIVE_FLOPS = 1.7e13
DEFAULT_BANDWIDTH_BPS = 500e6
PARAM_BYTES = 2
# Adam keeps two statistics per parameter, each as large as the fp16 weights
OPTIMIZER_STATS = 2


@dataclass(frozen=True)
class LayerShape:
    d_model: int
    d_ffn: int
    n_heads: int
    seq_len: int = 512
    batch: int = 1
    layers_per_stage: int = 1
    # 4 for fp32, 2 for fp16, 1 for 8-bit
    activation_bytes_per_element: float = 2

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
                raise ValueError(f"LayerShape.{f.name} must be a positive number, got {value!r}")
        for name in ("d_model", "d_ffn", "n_heads", "seq_len", "batch", "layers_per_stage"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"LayerShape.{name} must be an integer, got {getattr(self, name)!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    @property
    def tokens(self) -> int:
        return self.batch * self.seq_len

    @property
    def activation_elements(self) -> int:
        return self.batch * self.seq_len * self.d_model


@dataclass(frozen=True)
class DeviceProfile:
    effective_flops: float = DEFAULT_EFFECTIVE_FLOPS
    upload_bps: float = DEFAULT_BANDWIDTH_BPS
    download_bps: float = DEFAULT_BANDWIDTH_BPS
    rtt_seconds: float = 0.0

    def __post_init__(self):
        if not self.effective_flops > 0:
            raise ValueError(f"effective_flops must be positive, got {self.effective_flops}")
        if not (self.upload_bps > 0 and self.download_bps > 0):
            raise ValueError("upload_bps and download_bps must be positive")
        if not self.rtt_seconds >= 0:
            raise ValueError(f"rtt_seconds must be nonnegative, got {self.rtt_seconds}")


@dataclass(frozen=True)
class CostBreakdown:
    compute_seconds: float
    comm_seconds: float
    idle_fraction: float
    utilization: float
    # Wall time of one microbatch on this stage under the overlap rule
    step_seconds: float


PRESETS: Dict[str, LayerShape] = {
    "base": LayerShape(d_model=768, d_ffn=3072, n_heads=12),
    "xxlarge": LayerShape(d_model=4096, d_ffn=16384, n_heads=32),
    "gpt3": LayerShape(d_model=12288, d_ffn=49152, n_heads=96),
    "ours": LayerShape(d_model=4096, d_ffn=16384, n_heads=32, layers_per_stage=3),
}

# Boundary compression a preset is trained with when none is asked for
PRESET_COMPRESSION: Dict[str, CompressionSpec] = {
    "ours": CompressionSpec("int8"),
}


def get_preset(name: str) -> LayerShape:
    """
    Look up a built-in architecture.

    Raises:
        ConfigError: If the name is not one of base, xxlarge, gpt3, ours.
    """
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"Unknown preset '{name}', expected one of {', '.join(PRESETS)}") from None


def default_compression(name: str) -> CompressionSpec:
    """The compression a preset uses unless told otherwise (none for most)."""
    get_preset(name)
    return PRESET_COMPRESSION.get(name, NO_COMPRESSION)


def shape_from_dict(data: Dict[str, Any], source: str = "<shape>") -> LayerShape:
    """
    Build a LayerShape from a mapping of LayerShape field names.

    A ``"preset"`` key selects a built-in shape that the other keys override.

    Raises:
        ConfigError: On unknown keys or invalid values, naming ``source``.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: a layer shape must be a JSON object or a preset name")
    data = dict(data)
    base = get_preset(data.pop("preset")) if "preset" in data else None
    known = {f.name for f in fields(LayerShape)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown layer shape field(s): {', '.join(unknown)}")
    try:
        if base is not None:
            return replace(base, **data)
        return LayerShape(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None


def load_shape(path: str) -> LayerShape:
    """
    Load a LayerShape from a JSON file.

    Parameters:
        path (str): File holding a JSON object with LayerShape fields.

    Returns:
        LayerShape: The parsed shape.

    Raises:
        ConfigError: If the file cannot be read or does not describe a valid shape.
    """
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"{path}: cannot read layer shape ({e.strerror})") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    return shape_from_dict(data, source=path)


def params_per_layer(shape: LayerShape) -> int:
    """Attention projections (4*H^2) plus the two FFN matrices (2*H*d_ffn); biases ignored."""
    return 4 * shape.d_model ** 2 + 2 * shape.d_model * shape.d_ffn


def flops_per_stage(shape: LayerShape, include_backward: bool = True) -> float:
    """
    FLOPs for one microbatch on one stage: 2 per parameter per token forward,
    and twice that again for the backward pass.

    Parameters:
        shape (LayerShape): Architecture and microbatch shape.
        include_backward (bool): Count forward + backward (3x forward) if True.

    Returns:
        float: FLOP count.
    """
    forward = 2.0 * params_per_layer(shape) * shape.tokens * shape.layers_per_stage
    return 3.0 * forward if include_backward else forward


def activation_payload_bits(shape: LayerShape, compression: Optional[CompressionSpec] = None) -> float:
    """Bits of one B x L x d_model activation tensor as it crosses a stage boundary."""
    return payload_bits(shape.activation_elements, shape.activation_bytes_per_element, compression)


def stage_cost(shape: LayerShape, device: DeviceProfile, overlap: bool = True,
               compression: Optional[CompressionSpec] = None) -> CostBreakdown:
    """
    Time split of one microbatch on a stage.

    Communication is the activation upload, the gradient download and two
    round trips of latency. With ``overlap`` a saturated stage runs compute
    and communication concurrently, so a microbatch costs max(compute, comm);
    otherwise they add up.

    Parameters:
        shape (LayerShape): Architecture and microbatch shape.
        device (DeviceProfile): Compute speed, bandwidth and RTT of the peer.
        overlap (bool): Whether communication is hidden behind queued compute.
        compression (Optional[CompressionSpec]): Boundary compression.

    Returns:
        CostBreakdown: Compute, communication, idle fraction and utilization.
    """
    compute = flops_per_stage(shape, include_backward=True) / device.effective_flops
    payload = activation_payload_bits(shape, compression)
    comm = payload / device.upload_bps + payload / device.download_bps + 2 * device.rtt_seconds

    step = max(compute, comm) if overlap else compute + comm
    idle = (step - compute) / step
    return CostBreakdown(
        compute_seconds=compute,
        comm_seconds=comm,
        idle_fraction=idle,
        utilization=compute / step,
        step_seconds=step,
    )


def square_cube_ratio(shape: LayerShape) -> float:
    """FLOPs per transmitted bit; doubles when d_model doubles with d_ffn = 4 * d_model."""
    return flops_per_stage(shape, include_backward=True) / activation_payload_bits(shape)


def stage_state_bytes(shape: LayerShape) -> int:
    """Bytes a peer downloads to start serving a stage: fp16 weights plus optimizer statistics."""
    weights = params_per_layer(shape) * shape.layers_per_stage * PARAM_BYTES
    return weights * (1 + OPTIMIZER_STATS)


def utilization_grid(presets: Sequence[str], rtts: Iterable[float], device: Optional[DeviceProfile] = None,
                     overlap: bool = True, compression: Optional[CompressionSpec] = None) -> List[Dict[str, Any]]:
    """
    Utilization for every (preset, RTT) pair, one row per pair.

    Parameters:
        presets (Sequence[str]): Preset names.
        rtts (Iterable[float]): Round-trip times in seconds.
        device (Optional[DeviceProfile]): Device template; its RTT is replaced by each grid value.
        overlap (bool): Overlap rule passed to ``stage_cost``.
        compression (Optional[CompressionSpec]): Boundary compression for every preset;
            None uses each preset's default.

    Returns:
        List[Dict[str, Any]]: Rows with preset, compression, rtt_ms, compute_s, comm_s and utilization.
    """
    device = device or DeviceProfile()
    rtts = list(rtts)
    rows = []
    for name in presets:
        shape = get_preset(name)
        spec = compression if compression is not None else default_compression(name)
        for rtt in rtts:
            cost = stage_cost(shape, replace(device, rtt_seconds=rtt), overlap, spec)
            rows.append({
                "preset": name,
                "compression": str(spec),
                "rtt_ms": rtt * 1000.0,
                "compute_s": cost.compute_seconds,
                "comm_s": cost.comm_seconds,
                "utilization": cost.utilization,
            })
    return rows
