# numerics/tensors.py
"""
Dense float32 tensors, the CTEN binary format, and synthetic data generators.

Tensors are plain C-contiguous float32 numpy arrays. Random streams come from
numpy's PCG64 generator seeded through SeedSequence, so a (spec, seed) pair fully
determines a tensor and child streams can be split off deterministically.
"""

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import BadMagic, InvalidSpec, ShapeMismatch, TensorIOError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b'CTEN'
TENSOR_VERSION = 1


def as_tensor(data, shape=None):
    """Coerce to a C-contiguous float32 array, optionally reshaped"""
    array = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != array.size:
            raise ShapeMismatch(f"Cannot view {array.size} values as shape {shape}")
        array = array.reshape(shape)
    if array.ndim == 0 or any(d <= 0 for d in array.shape):
        raise ShapeMismatch(f"Tensor shape must be a list of positive integers, got {array.shape}")
    return array


def frozen(array):
    array.setflags(write=False)
    return array


def rng_for(seed):
    """Seeded PCG64 generator"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


# ============================================
# SYNTHETIC DATA
# ============================================

class SyntheticKind(str, Enum):
    OPTIMIZER_LIKE = 'optimizer-like'
    ACTIVATION_WITH_OUTLIERS = 'activation-with-outliers'
    UNIFORM_LOG = 'uniform-log'


@dataclass(frozen=True)
class SyntheticSpec:
    """
    kind: which distribution to draw
    size: element count, or a shape; activation tensors need (..., tokens, channels)
    outlier_fraction: share of elements (optimizer-like) or token rows (activation) that are outliers
    outlier_scale: multiplier for optimizer-like outliers, magnitude of activation outlier rows
    sigma: standard deviation of the narrow Gaussian / base magnitude for uniform-log
    dynamic_range: max/min magnitude ratio for uniform-log
    """
    kind: SyntheticKind
    size: object
    outlier_fraction: float = 0.0
    outlier_scale: float = 100.0
    seed: int = 0
    sigma: float = 1.0
    dynamic_range: float = 1e4

    @property
    def shape(self):
        if isinstance(self.size, (int, np.integer)):
            return (int(self.size),)
        return tuple(int(d) for d in self.size)

    def validate(self):
        kind = SyntheticKind(self.kind)
        if not self.shape or any(d <= 0 for d in self.shape):
            raise InvalidSpec(f"size must be positive, got {self.size!r}")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise InvalidSpec(f"outlier_fraction must lie in [0, 1), got {self.outlier_fraction}")
        if not self.outlier_scale > 0 or not self.sigma > 0:
            raise InvalidSpec("outlier_scale and sigma must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidSpec(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if kind is SyntheticKind.ACTIVATION_WITH_OUTLIERS and len(self.shape) < 2:
            raise InvalidSpec("activation tensors need a (tokens, channels) shape")
        if kind is SyntheticKind.UNIFORM_LOG and not self.dynamic_range > 1:
            raise InvalidSpec(f"dynamic_range must exceed 1, got {self.dynamic_range}")
        return kind


def _optimizer_like(spec, rng):
    n = math.prod(spec.shape)
    values = rng.normal(0.0, spec.sigma, n)
    outliers = int(round(spec.outlier_fraction * n))
    if outliers:
        values[rng.choice(n, outliers, replace=False)] *= spec.outlier_scale
    return values.reshape(spec.shape)


def _activation_with_outliers(spec, rng):
    """Gaussian activations where a few whole token rows are massive (constant magnitude, random sign)"""
    channels = spec.shape[-1]
    tokens = math.prod(spec.shape[:-1])
    values = rng.normal(0.0, spec.sigma, (tokens, channels))
    if spec.outlier_fraction > 0:
        rows = max(1, int(round(spec.outlier_fraction * tokens)))
        picked = rng.choice(tokens, rows, replace=False)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(rows, channels))
        values[picked] = signs * spec.outlier_scale
    return values.reshape(spec.shape)


def _uniform_log(spec, rng):
    n = math.prod(spec.shape)
    exponents = rng.uniform(0.0, math.log(spec.dynamic_range), n)
    signs = rng.choice(np.array([-1.0, 1.0]), size=n)
    return (signs * spec.sigma * np.exp(exponents)).reshape(spec.shape)


_GENERATORS = {
    SyntheticKind.OPTIMIZER_LIKE: _optimizer_like,
    SyntheticKind.ACTIVATION_WITH_OUTLIERS: _activation_with_outliers,
    SyntheticKind.UNIFORM_LOG: _uniform_log,
}


def generate(spec):
    """Draw a read-only float32 tensor; identical (spec, seed) gives identical bits"""
    kind = spec.validate()
    values = _GENERATORS[kind](spec, rng_for(spec.seed))
    logger.debug("Generated %s tensor %s (seed=%d)", kind.value, spec.shape, spec.seed)
    return frozen(as_tensor(values))


# ============================================
# CTEN FILES
# ============================================

def tensor_to_bytes(tensor):
    tensor = as_tensor(tensor)
    header = TENSOR_MAGIC + struct.pack('<HH', TENSOR_VERSION, tensor.ndim)
    header += struct.pack(f'<{tensor.ndim}Q', *tensor.shape)
    return header + tensor.astype('<f4').tobytes()


def tensor_from_bytes(blob):
    if blob[:4] != TENSOR_MAGIC:
        raise BadMagic(f"Expected {TENSOR_MAGIC!r}, found {bytes(blob[:4])!r}")
    if len(blob) < 8:
        raise ShapeMismatch("Truncated tensor header")
    _version, rank = struct.unpack_from('<HH', blob, 4)
    dims_end = 8 + 8 * rank
    if rank == 0 or len(blob) < dims_end:
        raise ShapeMismatch(f"Header declares rank {rank} but the file is too short")
    shape = struct.unpack_from(f'<{rank}Q', blob, 8)
    payload = blob[dims_end:]
    expected = math.prod(shape) * 4
    if len(payload) != expected:
        raise ShapeMismatch(
            f"Header declares {math.prod(shape)} elements, payload holds {len(payload) / 4:g}"
        )
    return as_tensor(np.frombuffer(payload, dtype='<f4'), shape)


def save(tensor, path):
    try:
        with open(path, 'wb') as handle:
            handle.write(tensor_to_bytes(tensor))
    except OSError as exc:
        raise TensorIOError(f"Could not write tensor to {path}: {exc}") from exc


def load(path):
    try:
        with open(path, 'rb') as handle:
            blob = handle.read()
    except OSError as exc:
        raise TensorIOError(f"Could not read tensor from {path}: {exc}") from exc
    return tensor_from_bytes(blob)
