# flow/memory_model.py
"""
Activation memory of one decoder layer, in U = batch * seq_len * hidden * 2 bytes.

Each policy is described by the tensors it saves for backward (SAVES); the per-operator
rows are sums over those saves, kept as exact fractions. The precision-flow simulator
saves exactly these tensors, so measured tape bytes can be reconciled against the table.
"""

import logging
import math
from dataclasses import dataclass
from decimal import ROUND_DOWN, Decimal
from enum import Enum
from fractions import Fraction

from numerics.exceptions import InvalidSpec, MismatchBeyondBound
from numerics.quantizer import DEFAULT_ACTIVATION_GROUP_SIZE, QuantMode, ScaleFormat

logger = logging.getLogger(__name__)

LLAMA_INTERMEDIATE_RATIO = Fraction(8, 3)
OPERATORS = ('RMSNorm', 'ActFunc', 'RoPE', 'FlashAttn', 'Linear')
CSV_COLUMNS = ('operator', 'policy', 'U', 'bytes', 'ratio')


class Policy(str, Enum):
    FP32 = 'FP32'
    BF16 = 'BF16'
    TE = 'TE'
    COAT = 'COAT'

    @property
    def modelled(self):
        return self is not Policy.FP32


@dataclass(frozen=True)
class Save:
    """
    One tensor kept for backward.
    width: 'H' for hidden-sized rows, 'I' for intermediate-sized rows
    quantized: None for a plain save, else the granularity of its FP8 codes
    keeps_scale: a plain save that also keeps the per-tensor scale its consumer quantized with
    """
    operator: str
    name: str
    width: str
    element_bytes: int
    quantized: QuantMode = None
    keeps_scale: bool = False


def _attention_saves():
    return [
        Save('RoPE', 'rope.q', 'H', 2),
        Save('RoPE', 'rope.k', 'H', 2),
        Save('FlashAttn', 'attention.q', 'H', 2),
        Save('FlashAttn', 'attention.k', 'H', 2),
        Save('FlashAttn', 'attention.v', 'H', 2),
    ]


def _linear_saves(fp8):
    """QKV, up/gate and down inputs; the output projection shares the attention output"""
    if not fp8:
        plain = [Save('Linear', name, width, 2) for name, width in
                 (('qkv.input', 'H'), ('gate_up.input', 'H'), ('down.input', 'I'))]
    else:
        tensor = QuantMode.PER_TENSOR
        plain = [Save('Linear', name, width, 1, tensor) for name, width in
                 (('qkv.input', 'H'), ('gate_up.input', 'H'), ('down.input', 'I'))]
    return plain + [Save('Linear', 'attention.output', 'H', 2, keeps_scale=fp8)]


def _policy_saves(policy):
    group = QuantMode.PER_GROUP
    if policy is Policy.COAT:
        norm = [Save('RMSNorm', name, 'H', 1, group)
                for name in ('rmsnorm1.input', 'rmsnorm2.input')]
        act = [Save('ActFunc', name, 'I', 1, group)
               for name in ('silu.input', 'mul.silu', 'mul.up')]
        return norm + act + _attention_saves() + _linear_saves(fp8=True)

    act = [Save('ActFunc', name, 'I', 2) for name in ('silu.input', 'mul.silu', 'mul.up')]
    if policy is Policy.TE:
        norm = [Save('RMSNorm', name, 'H', 2) for name in ('rmsnorm1.input', 'rmsnorm2.input')]
        return norm + act + _attention_saves() + _linear_saves(fp8=True)
    # BF16 keeps the residual stream, and so the norm inputs, in FP32
    norm = [Save('RMSNorm', name, 'H', 4) for name in ('rmsnorm1.input', 'rmsnorm2.input')]
    saves = norm + act + _attention_saves() + _linear_saves(fp8=False)
    if policy is Policy.FP32:
        return [Save(s.operator, s.name, s.width, 4) for s in saves]
    return saves


SAVES = {policy: {save.name: save for save in _policy_saves(policy)} for policy in Policy}


@dataclass(frozen=True)
class MemorySpec:
    batch: int = 1
    seq_len: int = 2048
    hidden: int = 4096
    policy: Policy = Policy.COAT
    intermediate: int = None
    include_scales: bool = False
    group_size: int = DEFAULT_ACTIVATION_GROUP_SIZE
    scale_format: ScaleFormat = ScaleFormat.BF16

    def __post_init__(self):
        try:
            object.__setattr__(self, 'policy', Policy(self.policy))
            object.__setattr__(self, 'scale_format', ScaleFormat(self.scale_format))
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from exc
        if not self.policy.modelled:
            raise InvalidSpec("The memory model covers BF16, TE and COAT")
        for name in ('batch', 'seq_len', 'hidden', 'group_size'):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if self.intermediate is not None and self.intermediate <= 0:
            raise InvalidSpec("intermediate must be positive")

    @property
    def ratio(self):
        """Intermediate / hidden; Llama's 8/3 when no intermediate size is given"""
        if self.intermediate is None:
            return LLAMA_INTERMEDIATE_RATIO
        return Fraction(self.intermediate, self.hidden)

    @property
    def tokens(self):
        return self.batch * self.seq_len

    @property
    def unit_bytes(self):
        return self.batch * self.seq_len * self.hidden * 2

    def units(self, save):
        width = 1 if save.width == 'H' else self.ratio
        return width * Fraction(save.element_bytes, 2)

    def elements(self, save):
        width = self.hidden if save.width == 'H' else self.ratio * self.hidden
        return width * self.tokens

    def scale_bytes(self, save):
        if save.quantized is None:
            return Fraction(self.scale_format.nbytes if save.keeps_scale else 0)
        if save.quantized is QuantMode.PER_TENSOR:
            return Fraction(self.scale_format.nbytes)
        return self.elements(save) / self.group_size * self.scale_format.nbytes


@dataclass(frozen=True)
class MemoryRow:
    """
    units and bytes are exact; ratio is BF16 units over this row's units.
    The rendered ratio divides the two-decimal totals, so 68/3 over 40/3 prints as 1.69.
    """
    operator: str
    policy: Policy
    units: Fraction
    bytes: Fraction
    baseline: Fraction

    @property
    def ratio(self):
        return self.baseline / self.units

    def as_dict(self):
        shown = _truncate(self.baseline) / _truncate(self.units)
        return {
            'operator': self.operator,
            'policy': self.policy.value,
            'U': format_units(self.units),
            'bytes': str(self.bytes) if self.bytes.denominator == 1 else format_units(self.bytes),
            'ratio': str(shown.quantize(Decimal('0.01'), rounding=ROUND_DOWN)),
        }


def _truncate(value):
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return exact.quantize(Decimal('0.01'), rounding=ROUND_DOWN)


def format_units(value):
    """Two decimals, truncated: 68/3 renders as 22.66"""
    return str(_truncate(value))


def _operator_units(spec, policy):
    units = {operator: Fraction(0) for operator in OPERATORS}
    for save in SAVES[policy].values():
        units[save.operator] += spec.units(save)
    return units


def _operator_scale_bytes(spec, policy):
    scales = {operator: Fraction(0) for operator in OPERATORS}
    for save in SAVES[policy].values():
        scales[save.operator] += spec.scale_bytes(save)
    return scales


def predict(spec):
    """Per-operator rows and a Total row for spec.policy; ratio is BF16 / policy"""
    baseline = _operator_units(spec, Policy.BF16)
    units = _operator_units(spec, spec.policy)
    scales = _operator_scale_bytes(spec, spec.policy) if spec.include_scales else None

    rows = []
    for operator in OPERATORS:
        size = units[operator] * spec.unit_bytes
        if scales is not None:
            size += scales[operator]
        rows.append(MemoryRow(operator, spec.policy, units[operator], size, baseline[operator]))

    total = MemoryRow(
        'Total', spec.policy,
        units=sum(units.values(), Fraction(0)),
        bytes=sum((row.bytes for row in rows), Fraction(0)),
        baseline=sum(baseline.values(), Fraction(0)),
    )
    rows.append(total)
    logger.debug("%s: %s U total, %s x vs BF16", spec.policy.value,
                 format_units(total.units), format_units(total.ratio))
    return rows


@dataclass(frozen=True)
class Reconciliation:
    policy: Policy
    analytic_bytes: int
    measured_bytes: int
    quantized_payload_bytes: int
    bound_bytes: int
    achieved_ratio: float

    @property
    def overhead_bytes(self):
        return self.measured_bytes - self.analytic_bytes

    @property
    def overhead_fraction(self):
        """Scale bytes relative to the FP8 payload they describe"""
        if not self.quantized_payload_bytes:
            return 0.0
        return self.overhead_bytes / self.quantized_payload_bytes


def _whole(value):
    if value.denominator != 1:
        raise InvalidSpec("Dimensions give a fractional byte count; pass an integer intermediate size")
    return value.numerator


def reconcile(spec, tape_bytes):
    """
    Compare measured tape bytes with the analytic payload. The difference must be
    non-negative and at most the scale bytes: payload * scale_bytes / G for grouped saves
    plus one scale per per-tensor save.
    """
    analytic = _whole(sum(_operator_units(spec, spec.policy).values(), Fraction(0))
                      * spec.unit_bytes)
    payload = 0
    bound = Fraction(0)
    for save in SAVES[spec.policy].values():
        bound += spec.scale_bytes(save)
        if save.quantized is not None:
            payload += _whole(spec.elements(save)) * save.element_bytes
    bound = math.ceil(bound)

    baseline = _whole(sum(_operator_units(spec, Policy.BF16).values(), Fraction(0))
                      * spec.unit_bytes)
    report = Reconciliation(
        policy=spec.policy,
        analytic_bytes=analytic,
        measured_bytes=int(tape_bytes),
        quantized_payload_bytes=payload,
        bound_bytes=bound,
        achieved_ratio=baseline / tape_bytes if tape_bytes else 0.0,
    )
    if not 0 <= report.overhead_bytes <= bound:
        raise MismatchBeyondBound(
            f"{spec.policy.value}: measured {tape_bytes} B vs analytic {analytic} B, "
            f"allowed scale overhead {bound} B"
        )
    logger.info("%s reconciled: %d B measured, overhead %.2f%% of FP8 payload, achieved %.2fx",
                spec.policy.value, tape_bytes, 100 * report.overhead_fraction,
                report.achieved_ratio)
    return report
