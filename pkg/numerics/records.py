# numerics/records.py
"""
Binary records for quantized tensors. Little-endian throughout.

CQT8  magic | version u16 | format u8 | axis u8 | group size u32 | rank u16 | dims u64...
      | scales f32 per group | codes u8 per element

The axis byte holds the geometry in its low bits (0 per-tensor, 1 per-group along the
last axis, 2 per-block over the last two axes); bit 7 marks FP32 scale storage. The
group size field carries G for per-group and B for per-block.

EXPK  magic | group count u32 | k f32 per group | c f32 per group
      follows a CQT8 record when the tensor was expanded before quantization.
"""

import math
import struct

import numpy as np

from .exceptions import BadMagic, ShapeMismatch, TensorIOError
from .fp8_codec import FormatTag, get_format
from .quantizer import QuantGeometry, QuantizedTensor, QuantMode, ScaleFormat
from .range_expansion import ExpandedQuantState, ExpansionParams

QUANT_MAGIC = b'CQT8'
EXPANSION_MAGIC = b'EXPK'
QUANT_VERSION = 1

_FORMAT_IDS = {FormatTag.E4M3: 0, FormatTag.E5M2: 1, FormatTag.DE8: 2}
_MODE_IDS = {QuantMode.PER_TENSOR: 0, QuantMode.PER_GROUP: 1, QuantMode.PER_BLOCK: 2}
_FP32_SCALES = 0x80


def _lookup(table, value, what):
    for key, ident in table.items():
        if ident == value:
            return key
    raise ShapeMismatch(f"Unknown {what} id {value}")


def _need(blob, end):
    if len(blob) < end:
        raise ShapeMismatch(f"Record truncated: needs {end} bytes, has {len(blob)}")


def quantized_to_bytes(q):
    geometry = q.geometry
    axis = _MODE_IDS[geometry.mode]
    if q.scale_format is ScaleFormat.FP32:
        axis |= _FP32_SCALES
    size = geometry.group_size or geometry.block_size
    shape = q.source_shape
    parts = [
        QUANT_MAGIC,
        struct.pack('<HBBIH', QUANT_VERSION, _FORMAT_IDS[q.format.tag], axis, size, len(shape)),
        struct.pack(f'<{len(shape)}Q', *shape),
        q.scales.astype('<f4').tobytes(),
        q.codes.astype(np.uint8).tobytes(),
    ]
    return b''.join(parts)


def quantized_from_bytes(blob, offset=0):
    """Parse one CQT8 record; returns (QuantizedTensor, offset after the record)"""
    if blob[offset:offset + 4] != QUANT_MAGIC:
        raise BadMagic(f"Expected {QUANT_MAGIC!r} at byte {offset}")
    _need(blob, offset + 14)
    _version, fmt_id, axis, size, rank = struct.unpack_from('<HBBIH', blob, offset + 4)
    cursor = offset + 14
    _need(blob, cursor + 8 * rank)
    shape = struct.unpack_from(f'<{rank}Q', blob, cursor)
    cursor += 8 * rank

    mode = _lookup(_MODE_IDS, axis & ~_FP32_SCALES, 'geometry')
    if mode is QuantMode.PER_GROUP:
        geometry = QuantGeometry.per_group(size)
    elif mode is QuantMode.PER_BLOCK:
        geometry = QuantGeometry.per_block(size)
    else:
        geometry = QuantGeometry.per_tensor()

    groups = geometry.group_count(shape)
    count = math.prod(shape)
    _need(blob, cursor + 4 * groups + count)
    scales = np.frombuffer(blob, dtype='<f4', count=groups, offset=cursor).astype(np.float32)
    cursor += 4 * groups
    codes = np.frombuffer(blob, dtype=np.uint8, count=count, offset=cursor).reshape(shape).copy()
    cursor += count

    q = QuantizedTensor(
        codes=codes,
        scales=scales,
        geometry=geometry,
        format=get_format(_lookup(_FORMAT_IDS, fmt_id, 'format')),
        scale_format=ScaleFormat.FP32 if axis & _FP32_SCALES else ScaleFormat.BF16,
    )
    return q, cursor


def expanded_to_bytes(state):
    params = state.params
    return b''.join([
        quantized_to_bytes(state.quantized),
        EXPANSION_MAGIC,
        struct.pack('<I', len(params)),
        params.k.astype('<f4').tobytes(),
        params.c.astype('<f4').tobytes(),
    ])


def expanded_from_bytes(blob, offset=0):
    """
    Parse CQT8 + EXPK. The measured range is not stored, so it comes back as NaN;
    groups stored with k = 1 are reported as degenerate.
    """
    quantized, cursor = quantized_from_bytes(blob, offset)
    if blob[cursor:cursor + 4] != EXPANSION_MAGIC:
        raise BadMagic(f"Expected {EXPANSION_MAGIC!r} at byte {cursor}")
    _need(blob, cursor + 8)
    (groups,) = struct.unpack_from('<I', blob, cursor + 4)
    if groups != quantized.scales.size:
        raise ShapeMismatch(f"EXPK holds {groups} groups, CQT8 holds {quantized.scales.size}")
    cursor += 8
    _need(blob, cursor + 8 * groups)
    k = np.frombuffer(blob, dtype='<f4', count=groups, offset=cursor).astype(np.float32)
    c = np.frombuffer(blob, dtype='<f4', count=groups, offset=cursor + 4 * groups).astype(np.float32)
    params = ExpansionParams(
        k=k,
        c=c,
        measured_range=np.full(groups, np.nan),
        degenerate=k == 1.0,
    )
    return ExpandedQuantState(quantized, params), cursor + 8 * groups


def to_bytes(state):
    if isinstance(state, ExpandedQuantState):
        return expanded_to_bytes(state)
    return quantized_to_bytes(state)


def from_bytes(blob):
    """QuantizedTensor, or ExpandedQuantState when an EXPK section follows"""
    quantized, cursor = quantized_from_bytes(blob)
    if cursor == len(blob):
        return quantized
    state, cursor = expanded_from_bytes(blob)
    if cursor != len(blob):
        raise ShapeMismatch(f"{len(blob) - cursor} trailing bytes after record")
    return state


def save(state, path):
    try:
        with open(path, 'wb') as handle:
            handle.write(to_bytes(state))
    except OSError as exc:
        raise TensorIOError(f"Could not write record to {path}: {exc}") from exc


def load(path):
    try:
        with open(path, 'rb') as handle:
            blob = handle.read()
    except OSError as exc:
        raise TensorIOError(f"Could not read record from {path}: {exc}") from exc
    return from_bytes(blob)
