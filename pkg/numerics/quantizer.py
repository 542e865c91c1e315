# numerics/quantizer.py
"""
Tensor quantize / dequantize at three granularities.

per-tensor  one scale for the whole tensor
per-group   1 x G runs along the last axis (never crosses a token row)
per-block   B x B tiles on the last two axes (crosses the token axis)

Each group is scaled by absmax / delta_max of the target format, the scale is rounded
to its storage format (BF16 unless asked otherwise), and codes are computed against
the rounded scale so dequantize reproduces exactly what was encoded.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import GeometryMismatch, NonFiniteInput
from .fp8_codec import decode_array, encode_array, get_format, round_bf16

logger = logging.getLogger(__name__)

DEFAULT_ACTIVATION_GROUP_SIZE = 16
DEFAULT_OPTIMIZER_GROUP_SIZE = 128


class QuantMode(str, Enum):
    PER_TENSOR = 'per-tensor'
    PER_GROUP = 'per-group'
    PER_BLOCK = 'per-block'


class ScaleFormat(str, Enum):
    BF16 = 'bf16'
    FP32 = 'fp32'

    @property
    def nbytes(self):
        return 2 if self is ScaleFormat.BF16 else 4

    @property
    def smallest_positive(self):
        """Smallest positive scale this format stores: the least subnormal of BF16 or FP32"""
        if self is ScaleFormat.BF16:
            return float(np.array(0x00010000, dtype=np.uint32).view(np.float32))
        return float(np.finfo(np.float32).smallest_subnormal)


@dataclass(frozen=True)
class QuantGeometry:
    mode: QuantMode
    group_size: int = 0
    block_size: int = 0

    @classmethod
    def per_tensor(cls):
        return cls(QuantMode.PER_TENSOR)

    @classmethod
    def per_group(cls, group_size=DEFAULT_ACTIVATION_GROUP_SIZE):
        return cls(QuantMode.PER_GROUP, group_size=int(group_size))

    @classmethod
    def per_block(cls, block_size):
        return cls(QuantMode.PER_BLOCK, block_size=int(block_size))

    def __post_init__(self):
        object.__setattr__(self, 'mode', QuantMode(self.mode))
        if self.mode is QuantMode.PER_GROUP and self.group_size <= 0:
            raise GeometryMismatch(f"Group size must be positive, got {self.group_size}")
        if self.mode is QuantMode.PER_BLOCK and self.block_size <= 0:
            raise GeometryMismatch(f"Block size must be positive, got {self.block_size}")

    def __str__(self):
        if self.mode is QuantMode.PER_GROUP:
            return f"1x{self.group_size}"
        if self.mode is QuantMode.PER_BLOCK:
            return f"{self.block_size}x{self.block_size}"
        return self.mode.value

    @property
    def elements_per_scale(self):
        if self.mode is QuantMode.PER_GROUP:
            return self.group_size
        if self.mode is QuantMode.PER_BLOCK:
            return self.block_size ** 2
        return None

    def check(self, shape):
        shape = tuple(shape)
        if self.mode is QuantMode.PER_GROUP and shape[-1] % self.group_size:
            raise GeometryMismatch(
                f"Last dimension {shape[-1]} is not divisible by group size {self.group_size}"
            )
        if self.mode is QuantMode.PER_BLOCK:
            if len(shape) < 2:
                raise GeometryMismatch("Per-block quantization needs at least two axes")
            rows, cols = shape[-2:]
            if rows % self.block_size or cols % self.block_size:
                raise GeometryMismatch(
                    f"Trailing dims {rows}x{cols} are not divisible by block size {self.block_size}"
                )

    def group_count(self, shape):
        self.check(shape)
        if self.mode is QuantMode.PER_TENSOR:
            return 1
        return math.prod(shape) // self.elements_per_scale

    def to_groups(self, array):
        """(n_groups, elements_per_group) view of `array`, one row per scale"""
        self.check(array.shape)
        if self.mode is QuantMode.PER_TENSOR:
            return array.reshape(1, -1)
        if self.mode is QuantMode.PER_GROUP:
            return array.reshape(-1, self.group_size)
        b = self.block_size
        rows, cols = array.shape[-2:]
        tiles = array.reshape(-1, rows // b, b, cols // b, b).transpose(0, 1, 3, 2, 4)
        return tiles.reshape(-1, b * b)

    def from_groups(self, groups, shape):
        """Inverse of to_groups"""
        shape = tuple(shape)
        if self.mode is not QuantMode.PER_BLOCK:
            return groups.reshape(shape)
        b = self.block_size
        rows, cols = shape[-2:]
        tiles = groups.reshape(-1, rows // b, cols // b, b, b).transpose(0, 1, 3, 2, 4)
        return tiles.reshape(shape)


@dataclass(frozen=True)
class QuantizedTensor:
    """
    FP8 codes (uint8 bytes in the source shape) with one positive scale per group.
    Scales live in float32 storage; with ScaleFormat.BF16 every scale is BF16-exact.
    """
    codes: np.ndarray
    scales: np.ndarray
    geometry: QuantGeometry
    format: object
    scale_format: ScaleFormat = ScaleFormat.BF16

    @property
    def source_shape(self):
        return self.codes.shape

    @property
    def nbytes(self):
        """Storage cost: one byte per code plus the scale payload"""
        return self.codes.size + self.scales.size * self.scale_format.nbytes


def round_scales(scales, scale_format):
    scales = np.asarray(scales, dtype=np.float32)
    if ScaleFormat(scale_format) is ScaleFormat.BF16:
        return np.asarray(round_bf16(scales), dtype=np.float32).reshape(scales.shape)
    return scales


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("Quantizer input contains NaN or infinity")


def quantize(x, geometry, fmt, scale_format=ScaleFormat.BF16, absmax=None):
    """
    Quantize `x` under `geometry` into `fmt`.

    `absmax` optionally supplies the per-group maxima (e.g. from group_scale_max)
    instead of reducing again.
    """
    fmt = get_format(fmt)
    scale_format = ScaleFormat(scale_format)
    x = np.asarray(x, dtype=np.float32)
    _check_finite(x)
    groups = geometry.to_groups(x).astype(np.float64)

    if absmax is None:
        absmax = np.max(np.abs(groups), axis=1)
    absmax = np.asarray(absmax, dtype=np.float64).reshape(-1)
    if absmax.size != groups.shape[0]:
        raise GeometryMismatch(f"Expected {groups.shape[0]} group maxima, got {absmax.size}")

    scales = round_scales(absmax / fmt.delta_max, scale_format)
    # subnormal groups underflow to a zero scale; only all-zero groups take delta_min
    scales[(absmax > 0) & ~(scales > 0)] = scale_format.smallest_positive
    empty = ~(absmax > 0)
    if np.any(empty):
        scales[empty] = fmt.delta_min
        logger.debug("%d all-zero group(s) given scale %g", int(empty.sum()), fmt.delta_min)

    scaled = np.clip(groups / scales.astype(np.float64)[:, None], -fmt.delta_max, fmt.delta_max)
    codes = geometry.from_groups(encode_array(scaled, fmt), x.shape)
    logger.debug("Quantized %s as %s %s (%d scales)", x.shape, geometry, fmt, scales.size)
    return QuantizedTensor(codes, scales, geometry, fmt, scale_format)


def dequantize(q):
    values = decode_array(q.geometry.to_groups(q.codes), q.format).astype(np.float64)
    values *= q.scales.astype(np.float64)[:, None]
    return q.geometry.from_groups(values.astype(np.float32), q.source_shape)


def group_scale_max(x, group_size):
    """
    Two-stage absmax reduction: per 1 x G partial maxima, then the global maximum.
    Returns (intermediate, global_max); max is exact so global_max equals np.abs(x).max().
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 0 or x.shape[-1] % group_size:
        raise GeometryMismatch(
            f"Last dimension of {x.shape} is not divisible by group size {group_size}"
        )
    partial = np.abs(x).reshape(*x.shape[:-1], x.shape[-1] // group_size, group_size)
    intermediate = partial.max(axis=-1)
    return intermediate, float(intermediate.max())


def quantization_error(x, geometry, fmt, scale_format=ScaleFormat.BF16):
    """Mean squared error of a quantize/dequantize round trip"""
    x = np.asarray(x, dtype=np.float32)
    restored = dequantize(quantize(x, geometry, fmt, scale_format))
    diff = x.astype(np.float64) - restored.astype(np.float64)
    return float(np.mean(diff * diff))
