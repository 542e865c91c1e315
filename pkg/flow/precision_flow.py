# flow/precision_flow.py
"""
One Llama-style decoder layer run under a precision policy.

    FP32  reference: no rounding anywhere
    BF16  every operator output and gradient rounded to BF16, residual stream in FP32
    TE    BF16 plus FP8 per-tensor linear inputs and weights
    COAT  TE plus FP8 per-group saves for the non-linear operators

What gets saved for backward, and at which width, is read from memory_model.SAVES so
the tape and the analytic table describe the same tensors. Matmuls multiply decoded
FP8 values and accumulate in float32.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from numerics.exceptions import (
    InvalidSpec,
    NonFiniteGradient,
    NonFiniteInput,
    ShapeMismatch,
    TapeMismatch,
)
from numerics.fp8_codec import get_format, round_bf16
from numerics.quantizer import (
    DEFAULT_ACTIVATION_GROUP_SIZE,
    QuantGeometry,
    QuantizedTensor,
    QuantMode,
    ScaleFormat,
    dequantize,
    group_scale_max,
    quantize,
)
from numerics.tensors import rng_for

from .memory_model import SAVES, MemorySpec, Policy

logger = logging.getLogger(__name__)

LINEAR_WEIGHTS = ('wq', 'wk', 'wv', 'wo', 'w_gate', 'w_up', 'w_down')
NONLINEAR_MODES = (QuantMode.PER_GROUP, QuantMode.PER_BLOCK)
LINEAR_MODES = (QuantMode.PER_TENSOR, QuantMode.PER_GROUP)


class GradPrecision(str, Enum):
    """Width of the gradients backward hands between operators"""
    BF16 = 'bf16'
    FP32 = 'fp32'


@dataclass(frozen=True)
class LayerSpec:
    """
    Dimensions and precision policy of the simulated layer.
    intermediate_size defaults to 8/3 of hidden_size rounded up to a multiple of the group size.
    Per-block non-linear quantization uses sqrt(group_size) x sqrt(group_size) tiles.
    """
    hidden_size: int = 64
    intermediate_size: int = None
    num_heads: int = 4
    seq_len: int = 32
    batch: int = 1
    group_size: int = DEFAULT_ACTIVATION_GROUP_SIZE
    policy: Policy = Policy.COAT
    nonlinear_granularity: QuantMode = QuantMode.PER_GROUP
    linear_granularity: QuantMode = QuantMode.PER_TENSOR
    format: str = 'E4M3'
    scale_format: ScaleFormat = ScaleFormat.BF16
    norm_eps: float = 1e-6
    rope_base: float = 10000.0
    compute_dtype: str = 'float32'
    grad_precision: GradPrecision = GradPrecision.BF16

    def __post_init__(self):
        try:
            object.__setattr__(self, 'policy', Policy(self.policy))
            object.__setattr__(self, 'nonlinear_granularity', QuantMode(self.nonlinear_granularity))
            object.__setattr__(self, 'linear_granularity', QuantMode(self.linear_granularity))
            object.__setattr__(self, 'scale_format', ScaleFormat(self.scale_format))
            object.__setattr__(self, 'format', get_format(self.format).tag.value)
            object.__setattr__(self, 'grad_precision', GradPrecision(self.grad_precision))
        except (KeyError, ValueError) as exc:
            raise InvalidSpec(str(exc)) from exc

        for name in ('hidden_size', 'num_heads', 'seq_len', 'batch', 'group_size'):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive, got {getattr(self, name)}")
        if self.intermediate_size is None:
            default = math.ceil(8 * self.hidden_size / 3 / self.group_size) * self.group_size
            object.__setattr__(self, 'intermediate_size', default)
        if self.intermediate_size <= 0:
            raise InvalidSpec("intermediate_size must be positive")
        if self.hidden_size % self.num_heads or self.head_dim % 2:
            raise InvalidSpec("hidden_size must split into heads of even width")
        if self.norm_eps < 0:
            raise InvalidSpec("norm_eps must be non-negative")
        if self.compute_dtype not in ('float32', 'float64'):
            raise InvalidSpec(f"Unsupported compute dtype {self.compute_dtype!r}")
        if self.nonlinear_granularity not in NONLINEAR_MODES:
            raise InvalidSpec("Non-linear saves are quantized per-group or per-block")
        if self.linear_granularity not in LINEAR_MODES:
            raise InvalidSpec("Linear inputs are quantized per-tensor or per-group")
        if self.quantized:
            self._check_divisible(self.group_size, "group size")
        if self.nonlinear_granularity is QuantMode.PER_BLOCK:
            if math.isqrt(self.group_size) ** 2 != self.group_size:
                raise InvalidSpec(f"Per-block tiles need a square group size, got {self.group_size}")
            self._check_divisible(self.block_size, "block side")

    def _check_divisible(self, size, what):
        for name in ('hidden_size', 'intermediate_size'):
            if getattr(self, name) % size:
                raise InvalidSpec(f"{name} {getattr(self, name)} is not divisible by {what} {size}")

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads

    @property
    def dtype(self):
        return np.dtype(self.compute_dtype)

    @property
    def quantized(self):
        return self.policy in (Policy.TE, Policy.COAT)

    @property
    def block_size(self):
        return math.isqrt(self.group_size)

    @property
    def padded_len(self):
        """Per-block tiles span block_size tokens; 1 x G runs never leave a token row"""
        if self.nonlinear_granularity is QuantMode.PER_BLOCK and self.policy is Policy.COAT:
            return -(-self.seq_len // self.block_size) * self.block_size
        return self.seq_len

    @property
    def nonlinear_geometry(self):
        if self.nonlinear_granularity is QuantMode.PER_BLOCK:
            return QuantGeometry.per_block(self.block_size)
        return QuantGeometry.per_group(self.group_size)

    @property
    def linear_geometry(self):
        if self.linear_granularity is QuantMode.PER_GROUP:
            return QuantGeometry.per_group(self.group_size)
        return QuantGeometry.per_tensor()

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        if 'hidden_size' in changes or 'group_size' in changes:
            values['intermediate_size'] = None
        values.update(changes)
        return LayerSpec(**values)


@dataclass
class LayerWeights:
    """FP32 master weights; linear weights are (in_features, out_features)"""
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    norm1: np.ndarray
    norm2: np.ndarray

    @classmethod
    def random(cls, spec, seed=0):
        rng = rng_for(seed)
        hidden, inter = spec.hidden_size, spec.intermediate_size

        def dense(n_in, n_out):
            return (rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)).astype(np.float32)

        return cls(
            wq=dense(hidden, hidden), wk=dense(hidden, hidden),
            wv=dense(hidden, hidden), wo=dense(hidden, hidden),
            w_gate=dense(hidden, inter), w_up=dense(hidden, inter),
            w_down=dense(inter, hidden),
            norm1=np.ones(hidden, dtype=np.float32),
            norm2=np.ones(hidden, dtype=np.float32),
        )

    @classmethod
    def zeros(cls, spec):
        hidden, inter = spec.hidden_size, spec.intermediate_size
        shapes = {'wq': (hidden, hidden), 'wk': (hidden, hidden), 'wv': (hidden, hidden),
                  'wo': (hidden, hidden), 'w_gate': (hidden, inter), 'w_up': (hidden, inter),
                  'w_down': (inter, hidden)}
        arrays = {name: np.zeros(shape, dtype=np.float32) for name, shape in shapes.items()}
        return cls(norm1=np.ones(hidden, dtype=np.float32),
                   norm2=np.ones(hidden, dtype=np.float32), **arrays)

    def copy(self):
        return LayerWeights(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def with_outlier_channels(self, channels, source=0, magnitude=2.0 ** 10):
        """
        Route hidden channel `source` through a norm gain of `magnitude` into the up
        projection columns `channels` only. Those intermediate channels become outliers
        about magnitude^2 / sqrt(hidden) times their neighbours, while their gate columns
        are zeroed so the outliers never reach the down projection.
        """
        weights = self.copy()
        hidden = weights.norm2.size
        weights.norm2[source] = magnitude
        weights.w_gate[source, :] = 0.0
        weights.w_up[source, :] = 0.0
        for channel in channels:
            weights.w_up[source, channel] = magnitude / math.sqrt(hidden)
            weights.w_gate[:, channel] = 0.0
        return weights


class WeightScaleCache:
    """
    Per-tensor weight maxima, computed once per gradient-accumulation cycle.
    FP8 weight codes are recomputed on every use; only the maxima are kept.
    """

    def __init__(self):
        self._maxima = {}
        self.computations = 0

    def absmax(self, name, weight):
        if name not in self._maxima:
            self._maxima[name] = float(np.max(np.abs(weight)))
            self.computations += 1
        return self._maxima[name]

    def reset(self):
        """Call after the optimizer step that ends an accumulation cycle"""
        self._maxima.clear()

    def __len__(self):
        return len(self._maxima)


@dataclass(eq=False)
class SavedActivation:
    """
    A tensor kept for backward. FP8 saves hold only codes and scales; plain saves hold
    values accounted at element_bytes per element. `scales` on a plain save are the
    ones its FP8 consumer quantized with, kept so backward can re-quantize identically.
    """
    name: str
    operator: str
    quantized: QuantizedTensor = None
    values: np.ndarray = None
    element_bytes: int = 0
    scales: np.ndarray = None
    scale_format: ScaleFormat = ScaleFormat.BF16

    @property
    def shape(self):
        return self.quantized.source_shape if self.quantized is not None else self.values.shape

    @property
    def payload_bytes(self):
        if self.quantized is not None:
            return int(self.quantized.codes.size)
        return int(self.values.size * self.element_bytes)

    @property
    def scale_bytes(self):
        if self.quantized is not None:
            return int(self.quantized.scales.size * self.quantized.scale_format.nbytes)
        if self.scales is not None:
            return int(self.scales.size * self.scale_format.nbytes)
        return 0

    @property
    def nbytes(self):
        return self.payload_bytes + self.scale_bytes

    def dequantize(self):
        if self.quantized is not None:
            return dequantize(self.quantized)
        return self.values

    def transposed(self):
        """
        Transposed FP8 codes of a per-tensor save (same scale, no extra storage);
        None for anything else.
        """
        q = self.quantized
        if q is None or q.geometry.mode is not QuantMode.PER_TENSOR:
            return None
        return QuantizedTensor(q.codes.T, q.scales, q.geometry, q.format, q.scale_format)

    def transposed_values(self):
        codes = self.transposed()
        if codes is not None:
            return dequantize(codes)
        return self.dequantize().T


@dataclass(eq=False)
class LayerTape:
    """Saves of one forward in execution order; aliases name shared records"""
    spec: LayerSpec
    weights_id: int
    cache: WeightScaleCache
    records: list = field(default_factory=list)
    aliases: dict = field(default_factory=dict)

    def add(self, record):
        self.records.append(record)
        self.aliases[record.name] = record
        return record

    def alias(self, name, existing):
        self.aliases[name] = self.aliases[existing]

    def __getitem__(self, name):
        try:
            return self.aliases[name]
        except KeyError:
            raise TapeMismatch(f"Tape has no saved tensor {name!r}") from None

    def __iter__(self):
        return iter(self.records)

    @property
    def payload_bytes(self):
        return sum(record.payload_bytes for record in self.records)

    @property
    def scale_bytes(self):
        return sum(record.scale_bytes for record in self.records)

    def operator_bytes(self):
        totals = {}
        for record in self.records:
            totals[record.operator] = totals.get(record.operator, 0) + record.nbytes
        return totals

    def memory_spec(self, include_scales=False):
        """The analytic counterpart of this tape"""
        spec = self.spec
        if not spec.policy.modelled or spec.linear_granularity is not QuantMode.PER_TENSOR:
            raise InvalidSpec("Only BF16, TE and COAT with per-tensor linear inputs are modelled")
        return MemorySpec(
            batch=spec.batch,
            seq_len=spec.padded_len,
            hidden=spec.hidden_size,
            policy=spec.policy,
            intermediate=spec.intermediate_size,
            include_scales=include_scales,
            group_size=spec.group_size,
            scale_format=spec.scale_format,
        )


def tape_bytes(tape):
    """Saved codes, scales and higher-precision values; a shared record counts once"""
    return sum(record.nbytes for record in tape.records)


class StraightThrough:
    """
    Rounding offsets of one forward, replayed around nearby inputs.

    The first forward given a trace records rounded - raw at every point where the
    policy rounds to BF16 or quantizes to FP8. Later forwards with the same trace add
    the recorded offsets to their raw values instead of rounding, which turns the
    layer into the smooth composition that backward differentiates.
    """

    def __init__(self):
        self.offsets = []
        self.recorded = False
        self._cursor = 0

    def start(self):
        self._cursor = 0

    def finish(self):
        if self.recorded and self._cursor != len(self.offsets):
            raise TapeMismatch("Replayed forward rounded fewer tensors than the recorded one")
        self.recorded = True

    def settle(self, raw, rounded):
        raw = np.asarray(raw, dtype=np.float64)
        if not self.recorded:
            self.offsets.append(np.asarray(rounded, dtype=np.float64) - raw)
            return rounded
        if self._cursor >= len(self.offsets) or self.offsets[self._cursor].shape != raw.shape:
            raise TapeMismatch("Replayed forward does not match the recorded one")
        offset = self.offsets[self._cursor]
        self._cursor += 1
        return raw + offset


# ============================================
# OPERATORS
# ============================================

def _rmsnorm(x, gain, eps):
    mean_square = np.mean(x * x, axis=-1, keepdims=True)
    rms = np.sqrt(mean_square + eps)
    inv = np.divide(1.0, rms, out=np.zeros_like(rms), where=rms > 0)
    return x * inv * gain


def _rmsnorm_backward(x, gain, eps, grad):
    mean_square = np.mean(x * x, axis=-1, keepdims=True)
    rms = np.sqrt(mean_square + eps)
    inv = np.divide(1.0, rms, out=np.zeros_like(rms), where=rms > 0)
    normed = x * inv
    scaled = grad * gain
    dx = inv * (scaled - normed * np.mean(scaled * normed, axis=-1, keepdims=True))
    dgain = np.sum(grad * normed, axis=0)
    return dx, dgain


def _sigmoid(x):
    with np.errstate(over='ignore'):
        return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    sig = _sigmoid(x)
    return sig * (1.0 + x * (1.0 - sig))


def _rope_tables(spec, dtype):
    half = spec.head_dim // 2
    inv_freq = spec.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / spec.head_dim)
    angles = np.outer(np.arange(spec.padded_len, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate_half(x):
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_transposed(x):
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


def _rope(x, cos, sin):
    return x * cos + _rotate_half(x) * sin


def _rope_backward(grad, cos, sin):
    return grad * cos + _rotate_half_transposed(grad * sin)


def _causal_probs(q, k):
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1]).astype(q.dtype)
    length = scores.shape[-1]
    mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=-1, keepdims=True)


def _attention_backward(q, k, v, grad):
    probs = _causal_probs(q, k)
    dv = np.swapaxes(probs, -1, -2) @ grad
    dprobs = grad @ np.swapaxes(v, -1, -2)
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores = dscores / np.sqrt(q.shape[-1]).astype(q.dtype)
    return dscores @ k, np.swapaxes(dscores, -1, -2) @ q, dv


# ============================================
# PRECISION POLICY
# ============================================

class _Flow:
    """Rounding, quantization and saving rules of one policy for one layer call"""

    def __init__(self, spec, weights, cache, trace=None):
        self.spec = spec
        self.weights = weights
        self.cache = cache
        self.trace = trace
        self.saves = SAVES[spec.policy]
        self.fmt = get_format(spec.format)
        self.cos, self.sin = _rope_tables(spec, spec.dtype)

    # -- precision ------------------------------------------------------

    def settle(self, raw, rounded):
        """What the next operator sees in place of `raw`"""
        if self.trace is None:
            return rounded
        return self.trace.settle(raw, rounded)

    def act(self, values):
        """Operator output handed to the next operator"""
        if self.spec.policy is Policy.FP32:
            return np.asarray(values, dtype=self.spec.dtype)
        return self.settle(values, round_bf16(values))

    def grad(self, values):
        """Gradient handed to the next operator in backward"""
        if self.spec.policy is Policy.FP32 or self.spec.grad_precision is GradPrecision.FP32:
            return np.asarray(values, dtype=self.spec.dtype)
        return round_bf16(values)

    def residual(self, stream, branch):
        total = stream + branch
        if self.spec.policy in (Policy.TE, Policy.COAT):
            return self.settle(total, round_bf16(total))
        return total.astype(self.spec.dtype)

    def quantize(self, values, geometry):
        absmax = None
        if geometry.mode is QuantMode.PER_TENSOR:
            # partial maxima per 1 x G run, then one global maximum
            _, global_max = group_scale_max(values, self.spec.group_size)
            absmax = [global_max]
        return quantize(values, geometry, self.fmt, self.spec.scale_format, absmax=absmax)

    def weight(self, name):
        """The weight as the matmul sees it"""
        master = getattr(self.weights, name)
        if self.spec.quantized:
            absmax = self.cache.absmax(name, master)
            q = quantize(master, QuantGeometry.per_tensor(), self.fmt,
                         self.spec.scale_format, absmax=[absmax])
            return dequantize(q)
        if self.spec.policy is Policy.BF16:
            return round_bf16(master)
        return master.astype(self.spec.dtype)

    def matmul(self, inputs, name):
        return self.act(inputs @ self.weight(name))

    # -- saving ---------------------------------------------------------

    def _geometry(self, save):
        return self.spec.linear_geometry if save.operator == 'Linear' else self.spec.nonlinear_geometry

    def save(self, tape, name, values):
        """Record `values` for backward; returns what the consuming operator computes with"""
        save = self.saves[name]
        if save.quantized is not None:
            q = self.quantize(values, self._geometry(save))
            record = tape.add(SavedActivation(name, save.operator, quantized=q))
            return self.settle(values, record.dequantize())

        if save.element_bytes == 2 and self.spec.policy is not Policy.FP32:
            stored = round_bf16(values)
        else:
            stored = np.array(values, copy=True)
        stored.setflags(write=False)
        record = SavedActivation(name, save.operator, values=stored,
                                 element_bytes=save.element_bytes,
                                 scale_format=self.spec.scale_format)
        tape.add(record)
        if save.keeps_scale:
            q = self.quantize(values, self._geometry(save))
            record.scales = q.scales
            return self.settle(values, dequantize(q))
        return self.settle(values, stored)

    def requantized(self, record):
        """Re-quantize a plain save with the scales its consumer used in forward"""
        if record.scales is None:
            return record.values
        geometry = self.spec.linear_geometry
        absmax = record.scales.astype(np.float64) * self.fmt.delta_max
        return dequantize(quantize(record.values, geometry, self.fmt,
                                   self.spec.scale_format, absmax=absmax))

    # -- layout ---------------------------------------------------------

    def heads(self, flat):
        spec = self.spec
        shaped = flat.reshape(spec.batch, spec.padded_len, spec.num_heads, spec.head_dim)
        return shaped.transpose(0, 2, 1, 3)

    def merge(self, heads):
        spec = self.spec
        return heads.transpose(0, 2, 1, 3).reshape(spec.batch * spec.padded_len, spec.hidden_size)

    def pad(self, tensor):
        spec = self.spec
        padded = np.zeros((spec.batch, spec.padded_len, spec.hidden_size), dtype=spec.dtype)
        padded[:, :spec.seq_len] = tensor
        return padded.reshape(-1, spec.hidden_size)

    def strip(self, flat):
        spec = self.spec
        return flat.reshape(spec.batch, spec.padded_len, spec.hidden_size)[:, :spec.seq_len]

    def mask_padding(self, heads):
        heads[:, :, self.spec.seq_len:, :] = 0.0
        return heads


def _check_input(tensor, spec, what):
    tensor = np.asarray(tensor)
    expected = (spec.batch, spec.seq_len, spec.hidden_size)
    if tensor.shape != expected:
        raise ShapeMismatch(f"{what} has shape {tensor.shape}, expected {expected}")
    return tensor


def forward(x, weights, spec, cache=None, trace=None):
    """
    Returns (y, tape). y has the shape of x; the tape holds what backward needs under
    spec.policy and nothing else. A StraightThrough trace records the rounding offsets
    of its first forward and replays them on later ones.
    """
    x = _check_input(x, spec, "Input")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("Layer input contains NaN or infinity")
    cache = cache if cache is not None else WeightScaleCache()
    flow = _Flow(spec, weights, cache, trace)
    tape = LayerTape(spec, id(weights), cache)
    if trace is not None:
        trace.start()

    stream = flow.pad(x)
    normed_in = flow.save(tape, 'rmsnorm1.input', stream)
    normed = flow.act(_rmsnorm(normed_in, weights.norm1, spec.norm_eps))
    qkv_in = flow.save(tape, 'qkv.input', normed)
    q = flow.matmul(qkv_in, 'wq')
    k = flow.matmul(qkv_in, 'wk')
    v = flow.matmul(qkv_in, 'wv')

    flow.save(tape, 'rope.q', q)
    flow.save(tape, 'rope.k', k)
    q_rot = flow.act(_rope(flow.heads(q), flow.cos, flow.sin))
    k_rot = flow.act(_rope(flow.heads(k), flow.cos, flow.sin))
    flow.save(tape, 'attention.q', flow.merge(q_rot))
    flow.save(tape, 'attention.k', flow.merge(k_rot))
    flow.save(tape, 'attention.v', v)

    attended = _causal_probs(q_rot, k_rot) @ flow.heads(v)
    attended = flow.act(flow.merge(flow.mask_padding(attended)))
    out_in = flow.save(tape, 'attention.output', attended)
    tape.alias('o_proj.input', 'attention.output')
    hidden = flow.residual(stream, flow.matmul(out_in, 'wo'))

    normed_in = flow.save(tape, 'rmsnorm2.input', hidden)
    normed = flow.act(_rmsnorm(normed_in, weights.norm2, spec.norm_eps))
    gate_up_in = flow.save(tape, 'gate_up.input', normed)
    gate = flow.save(tape, 'silu.input', flow.matmul(gate_up_in, 'w_gate'))
    up = flow.save(tape, 'mul.up', flow.matmul(gate_up_in, 'w_up'))
    silu = flow.save(tape, 'mul.silu', flow.act(_silu(gate)))
    down_in = flow.save(tape, 'down.input', flow.act(silu * up))
    out = flow.residual(hidden, flow.matmul(down_in, 'w_down'))
    if trace is not None:
        trace.finish()

    logger.debug("%s forward: %d saved tensors, %d bytes", spec.policy.value,
                 len(tape.records), tape_bytes(tape))
    return flow.strip(out), tape


def backward(dy, tape, weights, spec):
    """
    Returns (dx, dweights) with dweights keyed like LayerWeights fields. Gradients
    between operators are rounded to BF16 under every policy but FP32, unless
    spec.grad_precision keeps them in FP32.
    """
    if tape.spec != spec or tape.weights_id != id(weights):
        raise TapeMismatch("Tape was recorded for a different layer spec or weight set")
    dy = _check_input(dy, spec, "Output gradient")
    if not np.all(np.isfinite(dy)):
        raise NonFiniteGradient("Output gradient contains NaN or infinity")
    flow = _Flow(spec, weights, tape.cache)
    grad = flow.grad
    dweights = {}

    dout = grad(flow.pad(dy))
    down_in = tape['down.input'].transposed_values()
    dweights['w_down'] = grad(down_in @ dout)
    dproduct = grad(dout @ flow.weight('w_down').T)

    silu = tape['mul.silu'].dequantize()
    up = tape['mul.up'].dequantize()
    dsilu = grad(dproduct * up)
    dup = grad(dproduct * silu)
    dgate = grad(dsilu * _silu_grad(tape['silu.input'].dequantize()))

    gate_up_in = tape['gate_up.input'].transposed_values()
    dweights['w_gate'] = grad(gate_up_in @ dgate)
    dweights['w_up'] = grad(gate_up_in @ dup)
    dnormed = grad(dgate @ flow.weight('w_gate').T + dup @ flow.weight('w_up').T)
    dnorm_in, dweights['norm2'] = _rmsnorm_backward(
        tape['rmsnorm2.input'].dequantize(), weights.norm2, spec.norm_eps, dnormed)
    dhidden = grad(dout + grad(dnorm_in))

    out_in = flow.requantized(tape['o_proj.input'])
    dweights['wo'] = grad(out_in.T @ dhidden)
    dattended = flow.mask_padding(flow.heads(grad(dhidden @ flow.weight('wo').T)).copy())

    q_rot = flow.heads(tape['attention.q'].dequantize())
    k_rot = flow.heads(tape['attention.k'].dequantize())
    v = flow.heads(tape['attention.v'].dequantize())
    dq_rot, dk_rot, dv = _attention_backward(q_rot, k_rot, v, dattended)
    dq = grad(flow.merge(_rope_backward(grad(dq_rot), flow.cos, flow.sin)))
    dk = grad(flow.merge(_rope_backward(grad(dk_rot), flow.cos, flow.sin)))
    dv = grad(flow.merge(dv))

    qkv_in = tape['qkv.input'].transposed_values()
    dweights['wq'] = grad(qkv_in @ dq)
    dweights['wk'] = grad(qkv_in @ dk)
    dweights['wv'] = grad(qkv_in @ dv)
    dnormed = grad(dq @ flow.weight('wq').T + dk @ flow.weight('wk').T
                   + dv @ flow.weight('wv').T)
    dnorm_in, dweights['norm1'] = _rmsnorm_backward(
        tape['rmsnorm1.input'].dequantize(), weights.norm1, spec.norm_eps, dnormed)
    dx = grad(dhidden + grad(dnorm_in))

    dweights['norm1'] = grad(dweights['norm1'])
    dweights['norm2'] = grad(dweights['norm2'])
    return flow.strip(dx), dweights


def output_mse(spec, weights, x, relative=False):
    """
    Mean squared difference between `spec`'s forward and the FP32 forward of the same
    layer; relative=True divides by the reference output's mean square.
    """
    y, _ = forward(x, weights, spec)
    y_ref, _ = forward(x, weights, spec.replace(policy=Policy.FP32))
    y_ref = y_ref.astype(np.float64)
    mse = float(np.mean((y.astype(np.float64) - y_ref) ** 2))
    if relative:
        return mse / float(np.mean(y_ref * y_ref))
    return mse


def sample_input(spec, seed=0):
    rng = rng_for(seed)
    shape = (spec.batch, spec.seq_len, spec.hidden_size)
    return rng.standard_normal(shape).astype(np.float32)
