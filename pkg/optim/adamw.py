# optim/adamw.py
"""
AdamW with 8-bit optimizer states.

Each step dequantizes m and v to FP32 (contracting expanded groups), runs the plain
AdamW update in FP32, then requantizes both moments under their policy. States are
flattened and zero-padded to a multiple of the group size, so groups never couple
and a shard split on group boundaries steps exactly like the joint tensor.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from numerics import records, tensors
from numerics.exceptions import InvalidSpec, NonFiniteGradient, ShapeMismatch, TensorIOError
from numerics.fp8_codec import R_E4M3, get_format
from numerics.quantizer import (
    DEFAULT_OPTIMIZER_GROUP_SIZE,
    QuantGeometry,
    ScaleFormat,
    dequantize,
    quantize,
)
from numerics.range_expansion import K_MAX, dequantize_contract, expand_quantize

logger = logging.getLogger(__name__)

FP32 = 'FP32'
STATE_FORMATS = ('E4M3', 'E5M2', 'DE8', FP32)


@dataclass(frozen=True)
class AdamWConfig:
    """
    Hyperparameters of the update. `step` is the counter t a fresh slot starts from
    and the value written into checkpoints; the slot advances it on every update.
    """
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-3
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise InvalidSpec("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise InvalidSpec("eps must be positive")
        if self.step < 0:
            raise InvalidSpec("step must be non-negative")


@dataclass(frozen=True)
class MomentPolicy:
    """How one moment is stored between steps"""
    format: str = 'E4M3'
    expand: bool = False
    group_size: int = DEFAULT_OPTIMIZER_GROUP_SIZE
    scale_format: ScaleFormat = ScaleFormat.BF16
    target_range: float = R_E4M3
    k_max: float = K_MAX

    def __post_init__(self):
        fmt = str(self.format).upper()
        if fmt not in STATE_FORMATS:
            raise InvalidSpec(f"Unknown state format {self.format!r}")
        if self.group_size <= 0:
            raise InvalidSpec("group_size must be positive")
        object.__setattr__(self, 'format', fmt)
        object.__setattr__(self, 'scale_format', ScaleFormat(self.scale_format))
        if fmt == FP32:
            object.__setattr__(self, 'expand', False)

    @classmethod
    def parse(cls, text, **options):
        """'E4M3', 'e5m2+expand', 'DE8+Expand' or 'FP32'"""
        name, _, suffix = str(text).strip().partition('+')
        if suffix and suffix.strip().lower() != 'expand':
            raise InvalidSpec(f"Unknown policy modifier in {text!r}")
        return cls(format=name.strip(), expand=bool(suffix), **options)

    @property
    def label(self):
        return f"{self.format}+Expand" if self.expand else self.format

    @property
    def lossless(self):
        return self.format == FP32

    def padded_size(self, size):
        return -(-size // self.group_size) * self.group_size

    def encode(self, values):
        """Flatten, pad with zeros to whole groups, and store"""
        flat = np.asarray(values, dtype=np.float32).ravel()
        if self.lossless:
            return flat.copy()
        padded = np.zeros(self.padded_size(flat.size), dtype=np.float32)
        padded[:flat.size] = flat
        fmt = get_format(self.format)
        if self.expand:
            return expand_quantize(padded, self.group_size, fmt, self.scale_format,
                                   self.target_range, self.k_max)
        return quantize(padded, QuantGeometry.per_group(self.group_size), fmt, self.scale_format)

    def decode(self, state, shape):
        if self.lossless:
            flat = state
        elif self.expand:
            flat = dequantize_contract(state)
        else:
            flat = dequantize(state)
        size = int(np.prod(shape))
        return np.asarray(flat[:size], dtype=np.float32).reshape(shape)

    def round_trip(self, values):
        values = np.asarray(values, dtype=np.float32)
        return self.decode(self.encode(values), values.shape)


@dataclass(frozen=True)
class SlotPolicy:
    first: MomentPolicy = field(default_factory=MomentPolicy)
    second: MomentPolicy = field(default_factory=MomentPolicy)

    @classmethod
    def parse(cls, text, **options):
        """'E4M3+Expand/E4M3+Expand' (first/second); a single name applies to both"""
        first, _, second = str(text).partition('/')
        return cls(MomentPolicy.parse(first, **options),
                   MomentPolicy.parse(second or first, **options))

    @property
    def label(self):
        return f"{self.first.label}/{self.second.label}"


def _nbytes(state):
    return int(state.nbytes)


@dataclass(frozen=True)
class OptimizerSlot:
    m_state: object
    v_state: object
    policy: SlotPolicy
    shape: tuple
    step: int = 0

    @classmethod
    def zeros(cls, shape, policy, step=0):
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(d) for d in shape)
        zeros = np.zeros(shape, dtype=np.float32)
        return cls(policy.first.encode(zeros), policy.second.encode(zeros), policy, shape, step)

    @property
    def m(self):
        return self.policy.first.decode(self.m_state, self.shape)

    @property
    def v(self):
        return self.policy.second.decode(self.v_state, self.shape)

    def state_bytes(self):
        """Bytes held between steps: codes, scales, and per-group k and c"""
        return _nbytes(self.m_state) + _nbytes(self.v_state)


def _check(params, grads, shape):
    if params.shape != grads.shape or params.shape != tuple(shape):
        raise ShapeMismatch(
            f"params {params.shape}, grads {grads.shape} and slot {tuple(shape)} disagree"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("Gradient contains NaN or infinity")


def _adamw_update(w, g, m, v, t, cfg):
    """One AdamW update in float32; returns (w, m, v)"""
    f32 = np.float32
    m = f32(cfg.beta1) * m + f32(1.0 - cfg.beta1) * g
    v = f32(cfg.beta2) * v + f32(1.0 - cfg.beta2) * (g * g)
    m_hat = m / f32(1.0 - cfg.beta1 ** t)
    v_hat = v / f32(1.0 - cfg.beta2 ** t)
    direction = m_hat / (np.sqrt(v_hat) + f32(cfg.eps))
    w = w - f32(cfg.lr) * (direction + f32(cfg.weight_decay) * w)
    return w.astype(np.float32), m.astype(np.float32), v.astype(np.float32)


def reference_adamw_step(params, grads, m, v, t, cfg):
    """
    FP32 oracle: (params, m, v) after update number t (t >= 1).
    """
    params = np.asarray(params, dtype=np.float32)
    grads = np.asarray(grads, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if not params.shape == grads.shape == m.shape == v.shape:
        raise ShapeMismatch("params, grads, m and v must share one shape")
    return _adamw_update(params, grads, m, v, t, cfg)


def step(params, grads, slot, cfg):
    """Dequantize, update in FP32, requantize. Returns (new params, new slot)."""
    params = np.asarray(params, dtype=np.float32)
    grads = np.asarray(grads, dtype=np.float32)
    _check(params, grads, slot.shape)
    t = slot.step + 1
    new_params, m, v = _adamw_update(params, grads, slot.m, slot.v, t, cfg)
    new_slot = replace(
        slot,
        m_state=slot.policy.first.encode(m),
        v_state=slot.policy.second.encode(v),
        step=t,
    )
    return new_params, new_slot


def update_direction_mse(policy, m, v, eps=1e-8):
    """MSE between m/(sqrt(v)+eps) on FP32 states and on states round-tripped by `policy`"""
    m = np.asarray(m, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
        raise NonFiniteGradient("Reference states contain NaN or infinity")
    if np.any(v < 0):
        raise InvalidSpec("Second moment must be non-negative")
    return direction_mse_matrix([policy.first], [policy.second], m, v, eps)[
        (policy.first.label, policy.second.label)]


def direction_mse_matrix(firsts, seconds, m, v, eps=1e-8):
    """
    update_direction_mse for every (first, second) pair, keyed by policy labels.
    Each moment is round-tripped once per policy.
    """
    m = np.asarray(m, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    exact = m.astype(np.float64) / (np.sqrt(v.astype(np.float64)) + eps)
    m_trips = {p.label: p.round_trip(m).astype(np.float64) for p in firsts}
    root_trips = {p.label: np.sqrt(p.round_trip(v).astype(np.float64)) + eps for p in seconds}
    matrix = {}
    for first, m_q in m_trips.items():
        for second, root in root_trips.items():
            matrix[(first, second)] = float(np.mean((m_q / root - exact) ** 2))
    return matrix


# ============================================
# CHECKPOINTS
# ============================================

def _moment_to_bytes(policy, state):
    if policy.lossless:
        return tensors.tensor_to_bytes(state)
    return records.to_bytes(state)


def _moment_from_bytes(policy, blob):
    if policy.lossless:
        return tensors.tensor_from_bytes(blob)
    return records.from_bytes(blob)


def _policy_header(policy):
    header = asdict(policy)
    header['scale_format'] = policy.scale_format.value
    return header


def save_slot(slot, cfg, path):
    """
    One JSON header line, then the m and v records back to back.
    Header keys: beta1, beta2, lr, weight_decay, eps, step, policy, shape, m_bytes, v_bytes.
    """
    m_blob = _moment_to_bytes(slot.policy.first, slot.m_state)
    v_blob = _moment_to_bytes(slot.policy.second, slot.v_state)
    header = asdict(replace(cfg, step=slot.step))
    header.update(
        policy={'first': _policy_header(slot.policy.first),
                'second': _policy_header(slot.policy.second)},
        shape=list(slot.shape),
        m_bytes=len(m_blob),
        v_bytes=len(v_blob),
    )
    try:
        with open(path, 'wb') as handle:
            handle.write(json.dumps(header, sort_keys=True).encode() + b'\n')
            handle.write(m_blob)
            handle.write(v_blob)
    except OSError as exc:
        raise TensorIOError(f"Could not write optimizer slot to {path}: {exc}") from exc
    logger.debug("Saved %s slot (%d state bytes) to %s", slot.policy.label, slot.state_bytes(), path)


def load_slot(path):
    """Returns (slot, cfg)"""
    try:
        with open(path, 'rb') as handle:
            header_line = handle.readline()
            body = handle.read()
    except OSError as exc:
        raise TensorIOError(f"Could not read optimizer slot from {path}: {exc}") from exc

    try:
        header = json.loads(header_line)
    except ValueError as exc:
        raise ShapeMismatch(f"Unreadable checkpoint header: {exc}") from exc
    if len(body) != header['m_bytes'] + header['v_bytes']:
        raise ShapeMismatch("Checkpoint body length disagrees with its header")

    policy = SlotPolicy(MomentPolicy(**header['policy']['first']),
                        MomentPolicy(**header['policy']['second']))
    m_state = _moment_from_bytes(policy.first, body[:header['m_bytes']])
    v_state = _moment_from_bytes(policy.second, body[header['m_bytes']:])
    cfg = AdamWConfig(**{key: header[key] for key in
                         ('beta1', 'beta2', 'lr', 'weight_decay', 'eps', 'step')})
    slot = OptimizerSlot(m_state, v_state, policy, tuple(header['shape']), cfg.step)
    return slot, cfg
