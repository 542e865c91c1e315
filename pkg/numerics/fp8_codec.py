# numerics/fp8_codec.py
"""
Bit-exact 8-bit floating point codecs.

E4M3 follows the OCP "fn" convention (no infinity, S.1111.111 is NaN), E5M2 keeps
IEEE specials. DE8 is the dynamic-exponent map used by 8-bit optimizers: a normalized
format covering [-1, 1] whose leading zero bits pick a power-of-ten decade.

Every format is driven by a 256-entry decode table; encoding rounds to the nearest
table entry with ties going to the even code (E4M3/E5M2) so results match hardware
casts.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .exceptions import NonFiniteInput, OutOfRange

logger = logging.getLogger(__name__)


class FormatTag(str, Enum):
    E4M3 = 'E4M3'
    E5M2 = 'E5M2'
    DE8 = 'DE8'


@dataclass(frozen=True)
class Fp8Format:
    """
    Descriptor of an 8-bit format.
    delta_max / delta_min are the largest finite and smallest positive magnitudes.
    """
    tag: FormatTag
    exponent_bits: int
    mantissa_bits: int
    bias: int
    delta_max: float
    delta_min: float
    max_code: int
    ieee_specials: bool = False

    def __str__(self):
        return self.tag.value

    @property
    def dynamic_range(self):
        return self.delta_max / self.delta_min


def _decode_de8_byte(byte):
    body = byte & 0x7F
    if body == 0:
        # 0x80 would be a second zero; the map spends it on the maximum instead
        return 1.0 if byte & 0x80 else 0.0
    zeros = 7 - body.bit_length()
    fraction_bits = 6 - zeros
    index = body & ((1 << fraction_bits) - 1)
    bins = 1 << fraction_bits
    midpoint = 0.1 + 0.9 * (index + 0.5) / bins
    value = 10.0 ** (-zeros) * midpoint
    return -value if byte & 0x80 else value


E4M3 = Fp8Format(FormatTag.E4M3, exponent_bits=4, mantissa_bits=3, bias=7,
                 delta_max=448.0, delta_min=2.0 ** -9, max_code=0x7E)
E5M2 = Fp8Format(FormatTag.E5M2, exponent_bits=5, mantissa_bits=2, bias=15,
                 delta_max=57344.0, delta_min=2.0 ** -16, max_code=0x7B, ieee_specials=True)
DE8 = Fp8Format(FormatTag.DE8, exponent_bits=7, mantissa_bits=6, bias=0,
                delta_max=1.0, delta_min=float(np.float32(_decode_de8_byte(0x01))), max_code=0x80)

FORMATS = {fmt.tag: fmt for fmt in (E4M3, E5M2, DE8)}

# Ratio between E4M3's largest and smallest positive magnitude: 448 * 512
R_E4M3 = E4M3.dynamic_range


def get_format(fmt):
    """Resolve a tag, its string name, or a descriptor to the Fp8Format"""
    if isinstance(fmt, Fp8Format):
        return fmt
    if isinstance(fmt, FormatTag):
        return FORMATS[fmt]
    try:
        return FORMATS[FormatTag(str(fmt).upper())]
    except ValueError:
        raise ValueError(f"Unknown FP8 format: {fmt!r}") from None


@dataclass(frozen=True)
class Fp8Code:
    byte: int
    format: FormatTag

    def __post_init__(self):
        if not 0 <= self.byte <= 0xFF:
            raise ValueError(f"FP8 code must fit in one byte, got {self.byte}")


def _decode_byte(byte, fmt):
    if fmt.tag is FormatTag.DE8:
        return _decode_de8_byte(byte)

    sign = -1.0 if byte & 0x80 else 1.0
    mantissa_mask = (1 << fmt.mantissa_bits) - 1
    exponent_max = (1 << fmt.exponent_bits) - 1
    exponent = (byte >> fmt.mantissa_bits) & exponent_max
    mantissa = byte & mantissa_mask

    if exponent == exponent_max:
        if fmt.ieee_specials:
            return sign * math.inf if mantissa == 0 else math.nan
        if mantissa == mantissa_mask:
            return math.nan

    if exponent == 0:
        return sign * math.ldexp(mantissa, 1 - fmt.bias - fmt.mantissa_bits)
    return sign * math.ldexp((1 << fmt.mantissa_bits) | mantissa,
                             exponent - fmt.bias - fmt.mantissa_bits)


@lru_cache(maxsize=None)
def _table(fmt):
    values = np.array([_decode_byte(byte, fmt) for byte in range(256)], dtype=np.float32)
    values.setflags(write=False)
    logger.debug("Built decode table for %s", fmt)
    return values


def decode_table(fmt):
    """All 256 decoded values of a format, indexed by code byte (read-only float32)"""
    return _table(get_format(fmt))


@lru_cache(maxsize=None)
def _de8_sorted():
    table = _table(DE8).astype(np.float64)
    order = np.argsort(table, kind='stable')
    return table[order], order.astype(np.uint8)


def _encode_minifloat(x, fmt):
    # Positive codes 0..max_code decode to a strictly increasing ramp
    ramp = _table(fmt)[:fmt.max_code + 1].astype(np.float64)
    magnitude = np.abs(x)
    index = np.clip(np.searchsorted(ramp, magnitude, side='left'), 1, len(ramp) - 1)
    below = ramp[index - 1]
    above = ramp[index]
    twice = 2.0 * magnitude
    midpoint = below + above
    pick_above = (twice > midpoint) | ((twice == midpoint) & (index % 2 == 0))
    codes = np.where(pick_above, index, index - 1).astype(np.uint8)
    return codes | (np.signbit(x).astype(np.uint8) << 7)


def _encode_de8(x):
    if np.any(np.abs(x) > 1.0):
        raise OutOfRange("DE8 only encodes values in [-1, 1]; normalize the group first")
    values, order = _de8_sorted()
    index = np.clip(np.searchsorted(values, x, side='left'), 1, len(values) - 1)
    below = values[index - 1]
    above = values[index]
    pick_above = (x - below) > (above - x)
    return order[np.where(pick_above, index, index - 1)]


def encode_array(values, fmt):
    """
    Vectorized encode. Returns uint8 codes with the shape of `values`.
    Magnitudes above delta_max saturate; NaN and infinity are rejected.
    """
    fmt = get_format(fmt)
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"Cannot encode non-finite values as {fmt}")
    if fmt.tag is FormatTag.DE8:
        return _encode_de8(x)
    return _encode_minifloat(x, fmt)


def decode_array(codes, fmt):
    """Vectorized decode to float32"""
    return decode_table(fmt)[np.asarray(codes, dtype=np.uint8)]


def encode(value, fmt):
    fmt = get_format(fmt)
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteInput(f"Cannot encode {value} as {fmt}")
    byte = int(encode_array(np.array([value]), fmt)[0])
    return Fp8Code(byte, fmt.tag)


def decode(code):
    return float(decode_table(code.format)[code.byte])


def encode_de8(value):
    return encode(value, DE8)


def decode_de8(code):
    if isinstance(code, int):
        code = Fp8Code(code, FormatTag.DE8)
    return decode(code)


def finite_codes(fmt):
    """Code bytes whose decoded value is finite"""
    return np.flatnonzero(np.isfinite(decode_table(fmt))).astype(np.uint8)


def round_bf16(value):
    """
    Round to the nearest BF16 value (ties to even), kept in float32 storage.
    Scalars come back as Python floats, arrays as float32 arrays.
    """
    x = np.asarray(value, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) & 0xFFFF0000).astype(np.uint32).view(np.float32)
    result = np.where(np.isnan(x), x, rounded)
    if result.ndim == 0:
        return float(result)
    return result
