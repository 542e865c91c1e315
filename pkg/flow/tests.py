from fractions import Fraction

import numpy as np
from django.test import SimpleTestCase

from numerics.exceptions import (
    InvalidSpec,
    MismatchBeyondBound,
    NonFiniteInput,
    ShapeMismatch,
    TapeMismatch,
)
from numerics.fp8_codec import round_bf16
from numerics.quantizer import QuantMode, ScaleFormat, dequantize
from numerics.tensors import rng_for

from .memory_model import (
    OPERATORS,
    MemorySpec,
    Policy,
    format_units,
    predict,
    reconcile,
)
from .precision_flow import (
    LINEAR_WEIGHTS,
    GradPrecision,
    LayerSpec,
    LayerWeights,
    StraightThrough,
    WeightScaleCache,
    backward,
    forward,
    output_mse,
    sample_input,
    tape_bytes,
)


def _units(spec):
    return {row.operator: row.units for row in predict(spec)}


class MemoryTableTests(SimpleTestCase):

    def test_bf16_rows(self):
        units = _units(MemorySpec(policy=Policy.BF16))
        self.assertEqual(units['RMSNorm'], 4)
        self.assertEqual(units['ActFunc'], 8)
        self.assertEqual(units['RoPE'], 2)
        self.assertEqual(units['FlashAttn'], 3)
        self.assertEqual(units['Linear'], Fraction(17, 3))
        self.assertEqual(units['Total'], Fraction(68, 3))

    def test_coat_rows(self):
        units = _units(MemorySpec(policy=Policy.COAT))
        self.assertEqual([units[op] for op in OPERATORS],
                         [1, 4, 2, 3, Fraction(10, 3)])
        self.assertEqual(units['Total'], Fraction(40, 3))

    def test_te_total(self):
        self.assertEqual(_units(MemorySpec(policy=Policy.TE))['Total'], Fraction(55, 3))

    def test_rendered_totals_and_ratios(self):
        rendered = {(row['policy'], row['operator']): row
                    for policy in (Policy.BF16, Policy.TE, Policy.COAT)
                    for row in (r.as_dict() for r in predict(MemorySpec(policy=policy)))}
        self.assertEqual(rendered['BF16', 'Total']['U'], '22.66')
        self.assertEqual(rendered['TE', 'Total']['U'], '18.33')
        self.assertEqual(rendered['COAT', 'Total']['U'], '13.33')
        self.assertEqual(rendered['BF16', 'Total']['ratio'], '1.00')
        self.assertEqual(rendered['TE', 'Total']['ratio'], '1.23')
        self.assertEqual(rendered['COAT', 'Total']['ratio'], '1.69')
        self.assertEqual(rendered['COAT', 'Linear']['U'], '3.33')

    def test_exact_ratio_stays_rational(self):
        total = predict(MemorySpec(policy=Policy.COAT))[-1]
        self.assertEqual(total.ratio, Fraction(17, 10))

    def test_ratios_do_not_depend_on_dimensions(self):
        small = predict(MemorySpec(batch=1, seq_len=16, hidden=48, policy=Policy.TE))
        large = predict(MemorySpec(batch=8, seq_len=4096, hidden=8192, policy=Policy.TE))
        self.assertEqual([row.ratio for row in small], [row.ratio for row in large])

    def test_total_is_sum_of_rows(self):
        spec = MemorySpec(batch=2, seq_len=64, hidden=96, policy=Policy.COAT, include_scales=True)
        rows = predict(spec)
        self.assertEqual(rows[-1].units, sum(row.units for row in rows[:-1]))
        self.assertEqual(rows[-1].bytes, sum(row.bytes for row in rows[:-1]))

    def test_unit_bytes(self):
        spec = MemorySpec(batch=4, seq_len=2048, hidden=4096)
        self.assertEqual(spec.unit_bytes, 4 * 2048 * 4096 * 2)
        rows = predict(MemorySpec(batch=4, seq_len=2048, hidden=4096, policy=Policy.BF16))
        self.assertEqual(rows[0].bytes, 4 * spec.unit_bytes)

    def test_format_units_truncates(self):
        self.assertEqual(format_units(Fraction(68, 3)), '22.66')
        self.assertEqual(format_units(Fraction(8, 3)), '2.66')
        self.assertEqual(format_units(Fraction(4)), '4.00')

    def test_invalid_specs(self):
        with self.assertRaises(InvalidSpec):
            MemorySpec(seq_len=0)
        with self.assertRaises(InvalidSpec):
            MemorySpec(policy='FP8-everything')
        with self.assertRaises(InvalidSpec):
            MemorySpec(policy=Policy.FP32)


class LayerSpecTests(SimpleTestCase):

    def test_default_intermediate_is_group_aligned(self):
        spec = LayerSpec(hidden_size=48, group_size=16)
        self.assertEqual(spec.intermediate_size, 128)

    def test_zero_length_sequence_rejected(self):
        with self.assertRaises(InvalidSpec):
            LayerSpec(seq_len=0)

    def test_group_must_divide_widths(self):
        with self.assertRaises(InvalidSpec):
            LayerSpec(hidden_size=40, intermediate_size=128, group_size=16)
        with self.assertRaises(InvalidSpec):
            LayerSpec(hidden_size=64, intermediate_size=120, group_size=16)

    def test_per_block_needs_square_group(self):
        with self.assertRaises(InvalidSpec):
            LayerSpec(group_size=8, nonlinear_granularity=QuantMode.PER_BLOCK)
        spec = LayerSpec(group_size=16, seq_len=30, nonlinear_granularity='per-block')
        self.assertEqual(spec.block_size, 4)
        self.assertEqual(spec.padded_len, 32)

    def test_heads_need_even_width(self):
        with self.assertRaises(InvalidSpec):
            LayerSpec(hidden_size=48, num_heads=16)

    def test_gradient_precision(self):
        self.assertIs(LayerSpec().grad_precision, GradPrecision.BF16)
        self.assertIs(LayerSpec(grad_precision='fp32').grad_precision, GradPrecision.FP32)
        with self.assertRaises(InvalidSpec):
            LayerSpec(grad_precision='fp16')


def _signed_permutation(rng, rows, cols):
    """Each row has one +-1, each in a different column (rows <= cols)"""
    matrix = np.zeros((rows, cols), dtype=np.float32)
    columns = rng.permutation(cols)[:rows]
    matrix[np.arange(rows), columns] = rng.choice([-1.0, 1.0], rows)
    return matrix


def _lossless_case(policy, seed=0):
    """
    Constant-magnitude +-2 tokens, zero query/key weights and signed-permutation weights:
    every tensor that gets quantized holds +-2^j values under a power-of-two maximum.
    """
    spec = LayerSpec(hidden_size=16, intermediate_size=32, num_heads=2, seq_len=4,
                     group_size=16, policy=policy, scale_format=ScaleFormat.FP32, norm_eps=0.0)
    rng = rng_for(seed)
    weights = LayerWeights.zeros(spec)
    value_map = _signed_permutation(rng, 16, 16)
    weights.wv = value_map
    weights.wo = (2.0 * value_map.T).astype(np.float32)
    weights.w_up = _signed_permutation(rng, 16, 32)
    weights.w_down = _signed_permutation(rng, 16, 32).T.copy()
    signs = rng.choice([-1.0, 1.0], 16)
    x = np.broadcast_to(2.0 * signs, (1, 4, 16)).astype(np.float32)
    return spec, weights, x


class ForwardTests(SimpleTestCase):

    def test_lossless_configuration_matches_reference(self):
        spec, weights, x = _lossless_case(Policy.COAT)
        y, _ = forward(x, weights, spec)
        y_ref, _ = forward(x, weights, spec.replace(policy=Policy.FP32))
        np.testing.assert_array_equal(y, 2.0 * x)
        np.testing.assert_allclose(y, y_ref, rtol=1e-6)

    def test_random_layer_error_is_small(self):
        spec = LayerSpec(hidden_size=64, num_heads=4, seq_len=32)
        weights = LayerWeights.random(spec, seed=0)
        x = sample_input(spec, seed=1)
        for policy in (Policy.TE, Policy.COAT):
            error = output_mse(spec.replace(policy=policy), weights, x, relative=True)
            self.assertGreater(error, 0.0)
            self.assertLess(error, 0.05)

    def test_coarser_groups_lose_more_around_outlier_channels(self):
        errors = []
        for group in (4, 8, 16, 32, 64):
            spec = LayerSpec(hidden_size=64, intermediate_size=128, num_heads=4, seq_len=32,
                             group_size=group)
            total = 0.0
            for seed in range(3):
                weights = LayerWeights.random(spec, seed=seed).with_outlier_channels([0, 64])
                total += output_mse(spec, weights, sample_input(spec, seed=100 + seed))
            errors.append(total / 3)
        self.assertEqual(errors, sorted(errors))

    def test_deterministic(self):
        spec = LayerSpec(hidden_size=32, seq_len=8)
        weights = LayerWeights.random(spec, seed=3)
        x = sample_input(spec, seed=4)
        y1, tape1 = forward(x, weights, spec)
        y2, tape2 = forward(x, weights, spec)
        np.testing.assert_array_equal(y1, y2)
        self.assertEqual(tape_bytes(tape1), tape_bytes(tape2))
        np.testing.assert_array_equal(tape1['mul.up'].quantized.codes,
                                      tape2['mul.up'].quantized.codes)

    def test_padding_is_stripped(self):
        spec = LayerSpec(hidden_size=32, seq_len=6, group_size=16,
                         nonlinear_granularity=QuantMode.PER_BLOCK)
        weights = LayerWeights.random(spec, seed=0)
        x = sample_input(spec)
        y, tape = forward(x, weights, spec)
        self.assertEqual(y.shape, x.shape)
        self.assertEqual(tape['rmsnorm1.input'].shape, (8, 32))
        self.assertTrue(np.all(np.isfinite(y)))

    def test_bad_inputs(self):
        spec = LayerSpec(hidden_size=32, seq_len=4)
        weights = LayerWeights.random(spec)
        with self.assertRaises(ShapeMismatch):
            forward(np.zeros((1, 5, 32), dtype=np.float32), weights, spec)
        x = sample_input(spec)
        x[0, 0, 0] = np.nan
        with self.assertRaises(NonFiniteInput):
            forward(x, weights, spec)


class TapeTests(SimpleTestCase):

    def setUp(self):
        self.spec = LayerSpec(hidden_size=48, intermediate_size=128, num_heads=4,
                              seq_len=32, batch=2, group_size=16)
        self.weights = LayerWeights.random(self.spec, seed=0)
        self.x = sample_input(self.spec, seed=1)

    def test_attention_output_is_shared_with_output_projection(self):
        _, tape = forward(self.x, self.weights, self.spec)
        self.assertIs(tape['attention.output'], tape['o_proj.input'])
        self.assertEqual(sum(1 for r in tape if r.name == 'attention.output'), 1)

    def test_only_fp8_is_kept_for_quantized_saves(self):
        _, tape = forward(self.x, self.weights, self.spec)
        for name in ('rmsnorm1.input', 'rmsnorm2.input', 'silu.input', 'mul.up',
                     'mul.silu', 'qkv.input', 'gate_up.input', 'down.input'):
            record = tape[name]
            self.assertIsNone(record.values, name)
            self.assertEqual(record.quantized.codes.dtype, np.uint8)

    def test_groups_stay_inside_token_rows(self):
        _, tape = forward(self.x, self.weights, self.spec)
        record = tape['rmsnorm1.input']
        tokens = self.spec.batch * self.spec.seq_len
        self.assertEqual(record.quantized.scales.size, tokens * 48 // 16)
        x = self.x.copy()
        x[1, 5] *= 64.0
        _, bumped = forward(x, self.weights, self.spec)
        changed = bumped['rmsnorm1.input'].quantized.scales != record.quantized.scales
        changed_rows = np.flatnonzero(changed.reshape(tokens, -1).any(axis=1))
        self.assertEqual(changed_rows.tolist(), [self.spec.seq_len + 5])

    def test_two_byte_saves_hold_bf16_values(self):
        spec = self.spec.replace(policy=Policy.TE, intermediate_size=128)
        _, tape = forward(self.x, self.weights, spec)
        for record in tape:
            if record.values is not None and record.element_bytes == 2:
                np.testing.assert_array_equal(record.values, round_bf16(record.values),
                                              err_msg=record.name)
        self.assertFalse(np.array_equal(tape['rmsnorm1.input'].values,
                                        self.x.reshape(-1, 48)))

    def test_transposed_codes(self):
        _, tape = forward(self.x, self.weights, self.spec)
        record = tape['qkv.input']
        transposed = record.transposed()
        np.testing.assert_array_equal(transposed.codes, record.quantized.codes.T)
        np.testing.assert_array_equal(dequantize(transposed), record.dequantize().T)
        self.assertIsNone(tape['mul.up'].transposed())

    def test_operator_bytes_match_predicted_rows(self):
        for policy in (Policy.BF16, Policy.TE, Policy.COAT):
            spec = self.spec.replace(policy=policy, intermediate_size=128)
            _, tape = forward(self.x, self.weights, spec)
            predicted = {row.operator: row.bytes
                         for row in predict(tape.memory_spec(include_scales=True))}
            measured = tape.operator_bytes()
            for operator in OPERATORS:
                self.assertEqual(measured[operator], predicted[operator], (policy, operator))

    def test_bf16_reconciles_exactly(self):
        spec = self.spec.replace(policy=Policy.BF16, intermediate_size=128)
        _, tape = forward(self.x, self.weights, spec)
        report = reconcile(tape.memory_spec(), tape_bytes(tape))
        self.assertEqual(report.overhead_bytes, 0)
        self.assertEqual(report.analytic_bytes, tape_bytes(tape))
        self.assertAlmostEqual(report.achieved_ratio, 1.0)

    def test_coat_overhead_within_group_bound(self):
        _, tape = forward(self.x, self.weights, self.spec)
        report = reconcile(tape.memory_spec(), tape_bytes(tape))
        self.assertGreater(report.overhead_bytes, 0)
        self.assertLessEqual(report.overhead_fraction, 0.125)
        self.assertGreater(report.achieved_ratio, 1.5)

    def test_coat_overhead_with_group_64(self):
        spec = LayerSpec(hidden_size=64, intermediate_size=128, num_heads=4, seq_len=8,
                         group_size=64)
        weights = LayerWeights.random(spec)
        _, tape = forward(sample_input(spec), weights, spec)
        report = reconcile(tape.memory_spec(), tape_bytes(tape))
        self.assertLessEqual(report.overhead_fraction, 0.032)

    def test_mismatch_beyond_bound(self):
        _, tape = forward(self.x, self.weights, self.spec)
        with self.assertRaises(MismatchBeyondBound):
            reconcile(tape.memory_spec(), tape_bytes(tape) + 10 ** 6)
        with self.assertRaises(MismatchBeyondBound):
            reconcile(tape.memory_spec(), tape.payload_bytes - 1)

    def test_doubling_sequence_doubles_bytes(self):
        short = self.spec.replace(seq_len=16, intermediate_size=128)
        long = self.spec.replace(seq_len=32, intermediate_size=128)
        for policy in (Policy.BF16, Policy.COAT):
            _, tape_short = forward(sample_input(short.replace(policy=policy)), self.weights,
                                    short.replace(policy=policy))
            _, tape_long = forward(sample_input(long.replace(policy=policy)), self.weights,
                                   long.replace(policy=policy))
            self.assertEqual(tape_long.payload_bytes, 2 * tape_short.payload_bytes)
        self.assertEqual(tape_bytes(tape_long) - 2 * tape_bytes(tape_short),
                         -4 * ScaleFormat.BF16.nbytes)

    def test_fp32_tape_is_not_modelled(self):
        spec = self.spec.replace(policy=Policy.FP32, intermediate_size=128)
        _, tape = forward(self.x, self.weights, spec)
        with self.assertRaises(InvalidSpec):
            tape.memory_spec()


class BackwardTests(SimpleTestCase):

    def _lossless_gradients(self, grad_precision):
        spec, weights, x = _lossless_case(Policy.COAT)
        spec = spec.replace(grad_precision=grad_precision)
        rng = rng_for(7)
        dy = round_bf16(rng.standard_normal(x.shape).astype(np.float32))
        _, tape = forward(x, weights, spec)
        dx, _ = backward(dy, tape, weights, spec)

        ref_spec = spec.replace(policy=Policy.FP32)
        _, ref_tape = forward(x, weights, ref_spec)
        dx_ref, _ = backward(dy, ref_tape, weights, ref_spec)
        return dx, dx_ref

    def test_lossless_configuration_gradients(self):
        dx, dx_ref = self._lossless_gradients(GradPrecision.FP32)
        np.testing.assert_allclose(dx, dx_ref, rtol=2.0 ** -7, atol=0)

    def test_lossless_configuration_bf16_gradients(self):
        # BF16 rounding between operators can cancel, so small elements get an absolute allowance
        dx, dx_ref = self._lossless_gradients(GradPrecision.BF16)
        np.testing.assert_allclose(dx, dx_ref, rtol=2.0 ** -7,
                                   atol=2.0 ** -5 * float(np.abs(dx_ref).max()))

    def test_directional_derivative(self):
        spec = LayerSpec(hidden_size=8, num_heads=2, seq_len=4, policy=Policy.FP32,
                         compute_dtype='float64')
        weights = LayerWeights.random(spec, seed=11)
        rng = rng_for(12)
        x = rng.standard_normal((1, 4, 8))
        dy = rng.standard_normal((1, 4, 8))
        direction = rng.standard_normal((1, 4, 8))

        def loss(inputs):
            y, _ = forward(inputs, weights, spec)
            return float(np.sum(y * dy))

        _, tape = forward(x, weights, spec)
        dx, _ = backward(dy, tape, weights, spec)
        step = 1e-5
        numeric = (loss(x + step * direction) - loss(x - step * direction)) / (2 * step)
        analytic = float(np.sum(dx * direction))
        self.assertLess(abs(numeric - analytic), 1e-3 * abs(analytic))

    def test_coat_directional_derivative_with_fp32_gradients(self):
        spec = LayerSpec(hidden_size=8, num_heads=2, seq_len=4, group_size=4,
                         policy=Policy.COAT, compute_dtype='float64',
                         grad_precision=GradPrecision.FP32)
        for seed in range(5):
            weights = LayerWeights.random(spec, seed=seed)
            rng = rng_for(100 + seed)
            x = rng.standard_normal((1, 4, 8))
            dy = rng.standard_normal((1, 4, 8))
            direction = rng.standard_normal((1, 4, 8))

            trace = StraightThrough()
            _, tape = forward(x, weights, spec, trace=trace)
            dx, _ = backward(dy, tape, weights, spec)

            def loss(inputs):
                y, _ = forward(inputs, weights, spec, trace=trace)
                return float(np.sum(y * dy))

            step = 1e-5
            numeric = (loss(x + step * direction) - loss(x - step * direction)) / (2 * step)
            analytic = float(np.sum(dx * direction))
            self.assertLess(abs(numeric - analytic), 1e-3 * abs(analytic), seed)

    def test_replay_at_recorded_input_reproduces_forward(self):
        spec = LayerSpec(hidden_size=16, num_heads=2, seq_len=4, group_size=4)
        weights = LayerWeights.random(spec, seed=3)
        x = sample_input(spec, seed=4)
        trace = StraightThrough()
        y, _ = forward(x, weights, spec, trace=trace)
        replayed, _ = forward(x, weights, spec, trace=trace)
        np.testing.assert_allclose(replayed, y, rtol=1e-4, atol=1e-5)
        with self.assertRaises(TapeMismatch):
            forward(x, weights, spec.replace(policy=Policy.FP32), trace=trace)

    def test_weight_gradient_directional_derivative(self):
        spec = LayerSpec(hidden_size=8, num_heads=2, seq_len=4, policy=Policy.FP32,
                         compute_dtype='float64')
        weights = LayerWeights.random(spec, seed=21)
        rng = rng_for(22)
        x = rng.standard_normal((1, 4, 8))
        dy = rng.standard_normal((1, 4, 8))
        _, tape = forward(x, weights, spec)
        _, dweights = backward(dy, tape, weights, spec)

        for name in ('wq', 'w_gate', 'w_down'):
            direction = rng.standard_normal(getattr(weights, name).shape)

            def loss(delta):
                moved = weights.copy()
                setattr(moved, name, getattr(weights, name) + delta * direction)
                y, _ = forward(x, moved, spec)
                return float(np.sum(y * dy))

            numeric = (loss(1e-5) - loss(-1e-5)) / 2e-5
            analytic = float(np.sum(dweights[name] * direction))
            self.assertLess(abs(numeric - analytic), 1e-3 * abs(analytic), name)

    def test_residual_path_with_zero_weights(self):
        spec = LayerSpec(hidden_size=32, seq_len=8)
        weights = LayerWeights.zeros(spec)
        x = sample_input(spec)
        dy = round_bf16(sample_input(spec, seed=5))
        _, tape = forward(x, weights, spec)
        dx, dweights = backward(dy, tape, weights, spec)
        np.testing.assert_array_equal(dx, dy)
        self.assertEqual(set(dweights), set(LINEAR_WEIGHTS) | {'norm1', 'norm2'})

    def test_gradients_are_bf16(self):
        spec = LayerSpec(hidden_size=32, seq_len=8)
        weights = LayerWeights.random(spec, seed=2)
        x = sample_input(spec, seed=3)
        _, tape = forward(x, weights, spec)
        dx, dweights = backward(sample_input(spec, seed=4), tape, weights, spec)
        np.testing.assert_array_equal(dx, round_bf16(dx))
        np.testing.assert_array_equal(dweights['w_up'], round_bf16(dweights['w_up']))

    def test_tape_mismatch(self):
        spec = LayerSpec(hidden_size=32, seq_len=8)
        weights = LayerWeights.random(spec)
        x = sample_input(spec)
        _, tape = forward(x, weights, spec)
        with self.assertRaises(TapeMismatch):
            backward(x, tape, weights, spec.replace(policy=Policy.TE))
        with self.assertRaises(TapeMismatch):
            backward(x, tape, weights.copy(), spec)
        with self.assertRaises(ShapeMismatch):
            backward(x[:, :4], tape, weights, spec)

    def test_weight_scales_are_reused_across_micro_steps(self):
        spec = LayerSpec(hidden_size=32, seq_len=8)
        weights = LayerWeights.random(spec)
        cache = WeightScaleCache()
        for seed in range(2):
            x = sample_input(spec, seed=seed)
            _, tape = forward(x, weights, spec, cache=cache)
            backward(x, tape, weights, spec)
        self.assertEqual(cache.computations, len(LINEAR_WEIGHTS))
        cache.reset()
        forward(sample_input(spec), weights, spec, cache=cache)
        self.assertEqual(cache.computations, 2 * len(LINEAR_WEIGHTS))
