# numerics/range_expansion.py
"""
Dynamic range expansion for quantization groups.

A group whose magnitudes only span a ratio R wastes most of the FP8 grid. Raising the
c-normalized values to the power k = log(target) / log(R) stretches the group's range
to the format's full range before quantization; contract undoes it after dequantization.
c = sqrt(absmin * absmax) centres the group around 1 so |x / c|^k neither underflows
nor overflows.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import AllZeroGroup, DegenerateRange, InvalidSpec, NonFiniteInput
from .fp8_codec import R_E4M3, get_format
from .quantizer import (
    DEFAULT_OPTIMIZER_GROUP_SIZE,
    QuantGeometry,
    ScaleFormat,
    dequantize,
    quantize,
)

logger = logging.getLogger(__name__)

K_MAX = 20.0


def dynamic_range(group):
    """absmax / absmin over the nonzero magnitudes of a group"""
    magnitudes = np.abs(np.asarray(group, dtype=np.float64)).ravel()
    magnitudes = magnitudes[magnitudes > 0]
    if magnitudes.size == 0:
        raise AllZeroGroup("Dynamic range is undefined for an all-zero group")
    return float(magnitudes.max() / magnitudes.min())


def optimal_k(range_, target_range=R_E4M3, k_max=K_MAX):
    """
    Exponent that maps `range_` onto `target_range`, clamped to [1, k_max].
    A constant-magnitude group (range <= 1) raises DegenerateRange; callers use k = 1.
    """
    if not range_ > 1.0:
        raise DegenerateRange(f"Cannot expand a group with dynamic range {range_}")
    k = math.log(target_range) / math.log(range_)
    return float(min(max(k, 1.0), k_max))


@dataclass(frozen=True)
class ExpansionParams:
    """
    Per-group expansion parameters, all indexed by group.
    k, c: float32 exponent and stabilizer
    measured_range: float64 R_X before expansion (1.0 for all-zero groups)
    degenerate: groups that could not be expanded (constant magnitude or all zero)
    """
    k: np.ndarray
    c: np.ndarray
    measured_range: np.ndarray
    degenerate: np.ndarray

    def __len__(self):
        return self.k.size

    @property
    def nbytes(self):
        return self.k.size * 4 + self.c.size * 4


def expansion_params(x, geometry, target_range=R_E4M3, k_max=K_MAX):
    """Measure every group of `x` and pick its k and c"""
    groups = np.abs(geometry.to_groups(np.asarray(x, dtype=np.float32)).astype(np.float64))
    nonzero = groups > 0
    has_values = nonzero.any(axis=1)
    absmax = groups.max(axis=1)
    absmin = np.where(nonzero, groups, np.inf).min(axis=1)
    absmin = np.where(has_values, absmin, 1.0)
    absmax = np.where(has_values, absmax, 1.0)

    measured = absmax / absmin
    degenerate = ~(measured > 1.0)
    safe_log = np.log(np.where(degenerate, 2.0, measured))
    k = np.clip(math.log(target_range) / safe_log, 1.0, k_max)
    k = np.where(degenerate | (measured >= target_range), 1.0, k).astype(np.float32)

    # nothing to stabilize without an exponent; keeping c = 1 leaves k = 1 groups untouched
    c = np.where(k > 1.0, np.sqrt(absmin * absmax), 1.0)

    if np.any(degenerate & has_values):
        logger.warning("%d constant-magnitude group(s) left unexpanded",
                       int((degenerate & has_values).sum()))
    if k.size:
        logger.debug("Expansion k over %d groups: min %.3f median %.3f max %.3f",
                     k.size, k.min(), float(np.median(k)), k.max())
    return ExpansionParams(
        k=k,
        c=c.astype(np.float32),
        measured_range=measured,
        degenerate=degenerate,
    )


def _apply(x, k, c, geometry, transform):
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("Expansion input contains NaN or infinity")
    k = np.asarray(k, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(k < 1.0) or np.any(~(c > 0)):
        raise InvalidSpec("Expansion needs k >= 1 and c > 0")

    if geometry is None:
        out = transform(x.astype(np.float64), k, c)
    else:
        groups = geometry.to_groups(x).astype(np.float64)
        out = transform(groups, k.reshape(-1, 1), c.reshape(-1, 1))
        out = geometry.from_groups(out, x.shape)

    with np.errstate(over='ignore'):
        out = out.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise NonFiniteInput("Expansion overflowed float32; lower k or normalize with c")
    return out


def _expand(values, k, c):
    return np.sign(values) * np.abs(values / c) ** k


def _contract(values, k, c):
    return np.sign(values) * np.abs(values) ** (1.0 / k) * c


def expand(x, k, c=1.0, geometry=None):
    """
    f(x) = sign(x) |x / c|^k. Without a geometry, k and c broadcast against x;
    with one they hold one value per group.
    """
    return _apply(x, k, c, geometry, _expand)


def contract(y, k, c=1.0, geometry=None):
    return _apply(y, k, c, geometry, _contract)


@dataclass(frozen=True)
class ExpandedQuantState:
    quantized: object
    params: ExpansionParams

    @property
    def geometry(self):
        return self.quantized.geometry

    @property
    def nbytes(self):
        return self.quantized.nbytes + self.params.nbytes


def expand_quantize(x, group_size=DEFAULT_OPTIMIZER_GROUP_SIZE, fmt='E4M3',
                    scale_format=ScaleFormat.BF16, target_range=R_E4M3, k_max=K_MAX,
                    geometry=None):
    """Q(f(x)); k and c are measured on `x` itself on every call"""
    geometry = geometry or QuantGeometry.per_group(group_size)
    params = expansion_params(x, geometry, target_range, k_max)
    expanded = expand(x, params.k, params.c, geometry)
    quantized = quantize(expanded, geometry, get_format(fmt), scale_format)
    return ExpandedQuantState(quantized, params)


def dequantize_contract(state):
    """f^-1(DQ(codes, scales))"""
    return contract(dequantize(state.quantized), state.params.k, state.params.c, state.geometry)


def code_histogram(state):
    """Count of each code byte (length 256) in a QuantizedTensor or ExpandedQuantState"""
    quantized = getattr(state, 'quantized', state)
    return np.bincount(quantized.codes.ravel(), minlength=256)
