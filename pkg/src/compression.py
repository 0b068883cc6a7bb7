"""
Activation compression operators applied at pipeline stage boundaries.

Three families shrink the tensors sent between stages: blockwise 8-bit
quantization, a linear bottleneck (LayerNorm, then an m x c projection) and
maxout over non-overlapping windows of k features. Each one is a pure numpy
function. ``payload_bits`` turns a ``CompressionSpec`` into the number of
bits that cross the link; the cost model uses it for every stage.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

DEFAULT_BLOCK_SIZE = 2048
LAYER_NORM_EPS = 1e-5
# Symmetric signed codes, so -x always encodes as -code(x)
CODE_MAX = 127
ABSMAX_BYTES = 4

COMPRESSION_KINDS = ("none", "int8", "bottleneck", "maxout")


@dataclass(frozen=True)
class CompressionSpec:
    """
    Which compression runs at a stage boundary.

    ``factor`` is c/m for ``bottleneck`` (0 < factor <= 1) and the window
    size k for ``maxout`` (integer >= 1). It is ignored for ``none`` and
    ``int8``.
    """
    kind: str = "none"
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in COMPRESSION_KINDS:
            raise ValueError(
                f"Unknown compression '{self.kind}', expected one of {', '.join(COMPRESSION_KINDS)}"
            )
        if self.kind == "bottleneck" and not 0 < self.factor <= 1:
            raise ValueError(f"Bottleneck factor c/m must be in (0, 1], got {self.factor}")
        if self.kind == "maxout" and (self.factor < 1 or self.factor != int(self.factor)):
            raise ValueError(f"Maxout factor k must be an integer >= 1, got {self.factor}")

    @classmethod
    def parse(cls, text: str) -> "CompressionSpec":
        """
        Parse the CLI form: ``none``, ``int8``, ``bottleneck:0.25`` or ``maxout:4``.

        Parameters:
            text (str): The textual spec.

        Returns:
            CompressionSpec: The parsed spec.

        Raises:
            ValueError: If the kind is unknown or the factor is missing or invalid.
        """
        kind, _, factor = text.strip().partition(":")
        if kind in ("bottleneck", "maxout"):
            if not factor:
                raise ValueError(f"Compression '{kind}' needs a factor, e.g. '{kind}:2'")
            try:
                value = float(factor)
            except ValueError:
                raise ValueError(f"Invalid compression factor '{factor}'") from None
            return cls(kind, value)
        if factor:
            raise ValueError(f"Compression '{kind}' takes no factor")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "bottleneck":
            return f"bottleneck:{self.factor:g}"
        if self.kind == "maxout":
            return f"maxout:{int(self.factor)}"
        return self.kind


NO_COMPRESSION = CompressionSpec()


def payload_bits(n_elements: float, bytes_per_element: float,
                 spec: Optional[CompressionSpec] = None) -> float:
    """
    Bits sent over the link for one activation (or gradient) tensor.

    int8 counts one byte per element. Block scales add ``4 / block_size``
    bytes per element on the wire (see ``quantized_nbytes``). They are left
    out here so that int8 is exactly half of an fp16 payload.

    Parameters:
        n_elements (float): Number of activation elements before compression.
        bytes_per_element (float): Width of an uncompressed element.
        spec (Optional[CompressionSpec]): Boundary compression, None for none.

    Returns:
        float: Payload size in bits.
    """
    spec = spec or NO_COMPRESSION
    raw = n_elements * bytes_per_element * 8
    if spec.kind == "int8":
        return n_elements * 8.0
    if spec.kind == "bottleneck":
        return raw * spec.factor
    if spec.kind == "maxout":
        return raw / spec.factor
    return float(raw)


@dataclass
class QuantizedBlock:
    codes: np.ndarray
    absmax: float
    block_size: int = DEFAULT_BLOCK_SIZE

    def __len__(self) -> int:
        return len(self.codes)


def quantize_blockwise(x: Sequence[float], block_size: int = DEFAULT_BLOCK_SIZE) -> List[QuantizedBlock]:
    """
    Encode a vector as signed 8-bit codes scaled per block by the block's absmax.

    Parameters:
        x (Sequence[float]): The values to encode; flattened if multi-dimensional.
        block_size (int): Elements per block; the last block may be shorter.

    Returns:
        List[QuantizedBlock]: One block per ``block_size`` elements.

    Raises:
        ValueError: If the input holds NaN/inf or block_size is not positive.
    """
    if block_size <= 0:
        raise ValueError(f"block_size must be positive, got {block_size}")
    values = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise ValueError("quantize_blockwise: input contains non-finite values")
    if values.size == 0:
        return []

    n_blocks = math.ceil(values.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[:values.size] = values
    grid = padded.reshape(n_blocks, block_size)

    absmax = np.abs(grid).max(axis=1)
    scale = np.divide(CODE_MAX, absmax, out=np.zeros_like(absmax), where=absmax > 0)
    codes = np.clip(np.rint(grid * scale[:, None]), -CODE_MAX, CODE_MAX).astype(np.int8)

    blocks = []
    for i in range(n_blocks):
        end = min(block_size, values.size - i * block_size)
        blocks.append(QuantizedBlock(codes[i, :end].copy(), float(absmax[i]), block_size))
    return blocks


def dequantize_blockwise(blocks: Sequence[QuantizedBlock]) -> np.ndarray:
    """
    Decode blocks produced by ``quantize_blockwise``.

    Parameters:
        blocks (Sequence[QuantizedBlock]): Encoded blocks, in order.

    Returns:
        np.ndarray: The reconstructed float64 vector.
    """
    if not blocks:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([
        block.codes.astype(np.float64) * (block.absmax / CODE_MAX) for block in blocks
    ])


def quantized_nbytes(blocks: Sequence[QuantizedBlock]) -> int:
    """Wire size of encoded blocks: one byte per code plus one float32 absmax per block."""
    return sum(len(block) for block in blocks) + ABSMAX_BYTES * len(blocks)


def layer_norm(x: np.ndarray, gain: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
               eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """
    Normalise over the last axis to zero mean and unit variance, then apply gain and bias.

    Parameters:
        x (np.ndarray): Input of shape (..., m).
        gain (Optional[np.ndarray]): Per-feature scale of shape (m,), ones if None.
        bias (Optional[np.ndarray]): Per-feature shift of shape (m,), zeros if None.
        eps (float): Added to the variance.

    Returns:
        np.ndarray: Normalised array of the same shape.

    Raises:
        ValueError: If gain or bias do not match the feature dimension.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[-1]
    for name, param in (("gain", gain), ("bias", bias)):
        if param is not None and np.shape(param) != (m,):
            raise ValueError(f"layer_norm: {name} has shape {np.shape(param)}, expected ({m},)")

    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def maxout_k(x: np.ndarray, k: int) -> np.ndarray:
    """
    Maximum over each non-overlapping window of k features.

    Parameters:
        x (np.ndarray): Input of shape (..., h).
        k (int): Window size; must divide h.

    Returns:
        np.ndarray: Output of shape (..., h // k).

    Raises:
        ValueError: If k < 1 or k does not divide h.
    """
    x = np.asarray(x)
    h = x.shape[-1]
    if k < 1 or h % k != 0:
        raise ValueError(f"maxout_k: window k={k} must be >= 1 and divide the feature size {h}")
    return x.reshape(x.shape[:-1] + (h // k, k)).max(axis=-1)


def maxout_compress(x: np.ndarray, k: int, gain_in=None, bias_in=None,
                    gain_out=None, bias_out=None) -> np.ndarray:
    """Sender side of maxout compression: LayerNorm, maxout_k, LayerNorm."""
    reduced = maxout_k(layer_norm(x, gain_in, bias_in), k)
    return layer_norm(reduced, gain_out, bias_out)


def maxout_decompress(y: np.ndarray, w_d: np.ndarray) -> np.ndarray:
    """Receiver side of maxout compression: project (..., m/k) back to (..., m) with w_d."""
    return _project(y, w_d, "maxout_decompress")


def bottleneck_forward(x: np.ndarray, w_c: np.ndarray, gain=None, bias=None) -> np.ndarray:
    """
    Sender side of the bottleneck: LayerNorm over m features, then project to c.

    Parameters:
        x (np.ndarray): Activations of shape (..., m).
        w_c (np.ndarray): Compression matrix of shape (m, c).
        gain (Optional[np.ndarray]): LayerNorm gain of shape (m,).
        bias (Optional[np.ndarray]): LayerNorm bias of shape (m,).

    Returns:
        np.ndarray: The transmitted tensor of shape (..., c).

    Raises:
        ValueError: On shape mismatch.
    """
    return _project(layer_norm(x, gain, bias), w_c, "bottleneck_forward")


def decompress(y: np.ndarray, w_d: np.ndarray, gain=None, bias=None) -> np.ndarray:
    """
    Receiver side of the bottleneck: LayerNorm over c features, then project back to m.

    Parameters:
        y (np.ndarray): Received tensor of shape (..., c).
        w_d (np.ndarray): Decompression matrix of shape (c, m).
        gain (Optional[np.ndarray]): LayerNorm gain of shape (c,).
        bias (Optional[np.ndarray]): LayerNorm bias of shape (c,).

    Returns:
        np.ndarray: Restored activations of shape (..., m).
    """
    return _project(layer_norm(y, gain, bias), w_d, "decompress")


def _project(x: np.ndarray, w: np.ndarray, where: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"{where}: input has {x.shape[-1]} features but weights have shape {w.shape}")
    return x @ w
