import math
import os
import struct
import tempfile

import numpy as np
from django.test import SimpleTestCase

from . import records, tensors
from .exceptions import (
    AllZeroGroup,
    BadMagic,
    DegenerateRange,
    GeometryMismatch,
    InvalidSpec,
    NonFiniteInput,
    OutOfRange,
    ShapeMismatch,
    TensorIOError,
)
from .fp8_codec import (
    DE8,
    E4M3,
    E5M2,
    R_E4M3,
    FormatTag,
    Fp8Code,
    decode,
    decode_array,
    decode_de8,
    decode_table,
    encode,
    encode_array,
    encode_de8,
    finite_codes,
    get_format,
    round_bf16,
)
from .quantizer import (
    QuantGeometry,
    ScaleFormat,
    dequantize,
    group_scale_max,
    quantization_error,
    quantize,
)
from .range_expansion import (
    code_histogram,
    contract,
    dequantize_contract,
    dynamic_range,
    expand,
    expand_quantize,
    expansion_params,
    optimal_k,
)
from .tensors import SyntheticKind, SyntheticSpec, generate


def _group_ranges(values):
    magnitudes = np.abs(values.astype(np.float64))
    return magnitudes.max(axis=1) / magnitudes.min(axis=1)


# ============================================
# FP8 CODECS
# ============================================

class FormatConstantsTests(SimpleTestCase):

    def test_e4m3_limits(self):
        self.assertEqual(E4M3.delta_max, 448.0)
        self.assertEqual(E4M3.delta_min, 2.0 ** -9)
        self.assertEqual(R_E4M3, 229376.0)

    def test_e5m2_limits(self):
        self.assertEqual(E5M2.delta_max, 57344.0)
        self.assertEqual(E5M2.delta_min, 2.0 ** -16)

    def test_table_extremes_match_descriptors(self):
        for fmt in (E4M3, E5M2, DE8):
            table = decode_table(fmt).astype(np.float64)
            finite = table[np.isfinite(table)]
            self.assertEqual(finite.max(), fmt.delta_max, fmt)
            self.assertEqual(finite[finite > 0].min(), fmt.delta_min, fmt)

    def test_get_format_accepts_names(self):
        self.assertIs(get_format('e5m2'), E5M2)
        self.assertIs(get_format(FormatTag.DE8), DE8)
        with self.assertRaises(ValueError):
            get_format('E3M4')


class CodecRoundTripTests(SimpleTestCase):

    def test_every_finite_code_round_trips(self):
        for fmt in (E4M3, E5M2, DE8):
            codes = finite_codes(fmt)
            back = encode_array(decode_array(codes, fmt), fmt)
            np.testing.assert_array_equal(back, codes, err_msg=str(fmt))

    def test_e4m3_nan_patterns(self):
        table = decode_table(E4M3)
        self.assertTrue(math.isnan(table[0x7F]))
        self.assertTrue(math.isnan(table[0xFF]))
        self.assertEqual(np.isnan(table).sum(), 2)

    def test_e5m2_keeps_infinities(self):
        self.assertEqual(decode(Fp8Code(0x7C, FormatTag.E5M2)), math.inf)
        self.assertEqual(decode(Fp8Code(0xFC, FormatTag.E5M2)), -math.inf)

    def test_ties_go_to_even_code(self):
        # 1.0625 sits halfway between 1.0 (0x38) and 1.125 (0x39)
        self.assertEqual(encode(1.0625, E4M3).byte, 0x38)
        # 1.1875 sits halfway between 1.125 (0x39) and 1.25 (0x3A)
        self.assertEqual(encode(1.1875, E4M3).byte, 0x3A)
        self.assertEqual(encode(2.0 ** -10, E4M3).byte, 0x00)

    def test_saturates_above_max(self):
        self.assertEqual(encode(1000.0, E4M3).byte, 0x7E)
        self.assertEqual(encode(-1e6, E4M3).byte, 0xFE)
        self.assertEqual(encode(1e9, E5M2).byte, 0x7B)

    def test_positive_ramp_is_non_decreasing(self):
        for fmt in (E4M3, E5M2):
            ramp = decode_table(fmt)[:fmt.max_code + 1].astype(np.float64)
            self.assertTrue(np.all(np.diff(ramp) >= 0), fmt)
            self.assertEqual(ramp[-1], fmt.delta_max, fmt)

    def test_saturation_over_random_magnitudes(self):
        rng = np.random.default_rng(31)
        for fmt in (E4M3, E5M2):
            magnitudes = fmt.delta_max * np.exp(rng.uniform(1e-6, math.log(1e30), 2000))
            signs = rng.choice([-1.0, 1.0], magnitudes.size)
            values = (signs * magnitudes).astype(np.float32)
            values = values[np.abs(values.astype(np.float64)) > fmt.delta_max]
            restored = decode_array(encode_array(values, fmt), fmt).astype(np.float64)
            np.testing.assert_array_equal(restored, np.sign(values) * fmt.delta_max,
                                          err_msg=str(fmt))

    def test_signed_zero(self):
        self.assertEqual(encode(0.0, E4M3).byte, 0x00)
        self.assertEqual(encode(-0.0, E4M3).byte, 0x80)

    def test_non_finite_rejected(self):
        with self.assertRaises(NonFiniteInput):
            encode(math.nan, E4M3)
        with self.assertRaises(NonFiniteInput):
            encode_array(np.array([1.0, math.inf]), E5M2)

    def test_code_must_fit_a_byte(self):
        with self.assertRaises(ValueError):
            Fp8Code(256, FormatTag.E4M3)


class De8Tests(SimpleTestCase):

    def test_table_is_256_distinct_values(self):
        table = decode_table(DE8)
        self.assertEqual(np.unique(table).size, 256)
        self.assertEqual(table.max(), 1.0)
        self.assertEqual(table[0x00], 0.0)

    def test_largest_code_is_one(self):
        self.assertEqual(decode_de8(0x80), 1.0)
        self.assertEqual(encode_de8(1.0).byte, 0x80)

    def test_smallest_magnitude_decade(self):
        self.assertAlmostEqual(DE8.delta_min, 0.55e-6, places=12)

    def test_nearest_value(self):
        code = encode_de8(-0.3)
        self.assertLess(abs(decode_de8(code) + 0.3), 0.9 / 64)

    def test_out_of_range(self):
        with self.assertRaises(OutOfRange):
            encode_de8(1.5)


class RoundBf16Tests(SimpleTestCase):

    def test_ties_to_even(self):
        self.assertEqual(round_bf16(1.0 + 2.0 ** -8), 1.0)
        self.assertEqual(round_bf16(1.0 + 3 * 2.0 ** -8), 1.0 + 2.0 ** -6)

    def test_representable_values_unchanged(self):
        values = np.array([0.0, -2.5, 448.0, 2.0 ** -20], dtype=np.float32)
        np.testing.assert_array_equal(round_bf16(values), values)

    def test_nan_passes_through(self):
        self.assertTrue(math.isnan(round_bf16(math.nan)))


# ============================================
# TENSORS
# ============================================

class SyntheticTests(SimpleTestCase):

    def test_same_seed_same_bits(self):
        spec = SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, 4096, outlier_fraction=0.01, seed=7)
        first, second = generate(spec), generate(spec)
        np.testing.assert_array_equal(first.view(np.uint32), second.view(np.uint32))
        self.assertFalse(first.flags.writeable)
        self.assertEqual(first.dtype, np.float32)

    def test_without_outliers_stays_narrow(self):
        values = generate(SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, 10000, seed=1))
        self.assertLess(np.abs(values).max(), 6.0)

    def test_outlier_fraction(self):
        values = generate(SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, 10000,
                                        outlier_fraction=0.01, outlier_scale=1000.0, seed=2))
        large = int((np.abs(values) > 10.0).sum())
        self.assertGreaterEqual(large, 80)
        self.assertLessEqual(large, 100)

    def test_uniform_log_range(self):
        values = generate(SyntheticSpec(SyntheticKind.UNIFORM_LOG, 100000,
                                        dynamic_range=1e4, seed=3))
        measured = dynamic_range(values)
        self.assertGreaterEqual(measured, 10 ** 3.5)
        self.assertLessEqual(measured, 10 ** 4.5)

    def test_activation_outlier_rows(self):
        values = generate(SyntheticSpec(SyntheticKind.ACTIVATION_WITH_OUTLIERS, (64, 32),
                                        outlier_fraction=0.05, outlier_scale=512.0, seed=4))
        massive = np.all(np.abs(values) == 512.0, axis=1)
        self.assertEqual(int(massive.sum()), 3)

    def test_invalid_specs(self):
        bad = [
            SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, 10, outlier_fraction=1.0),
            SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, 0),
            SyntheticSpec(SyntheticKind.ACTIVATION_WITH_OUTLIERS, 64),
            SyntheticSpec(SyntheticKind.UNIFORM_LOG, 10, dynamic_range=1.0),
            SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, 10, seed=-1),
        ]
        for spec in bad:
            with self.assertRaises(InvalidSpec, msg=repr(spec)):
                generate(spec)


class TensorFileTests(SimpleTestCase):

    def setUp(self):
        self.workdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.workdir.cleanup)

    def path(self, name):
        return os.path.join(self.workdir.name, name)

    def test_save_load_bitwise(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
            tensor = rng.standard_normal(shape).astype(np.float32)
            tensors.save(tensor, self.path('t.cten'))
            loaded = tensors.load(self.path('t.cten'))
            self.assertEqual(loaded.shape, tensor.shape)
            np.testing.assert_array_equal(loaded.view(np.uint32), tensor.view(np.uint32))

    def test_wrong_magic(self):
        with open(self.path('bad.cten'), 'wb') as handle:
            handle.write(b'NOPE' + bytes(16))
        with self.assertRaises(BadMagic):
            tensors.load(self.path('bad.cten'))

    def test_header_disagrees_with_payload(self):
        blob = b'CTEN' + struct.pack('<HHQ', 1, 1, 6) + np.zeros(5, '<f4').tobytes()
        with open(self.path('short.cten'), 'wb') as handle:
            handle.write(blob)
        with self.assertRaises(ShapeMismatch):
            tensors.load(self.path('short.cten'))

    def test_missing_file(self):
        with self.assertRaises(TensorIOError):
            tensors.load(self.path('missing.cten'))


# ============================================
# QUANTIZER
# ============================================

class QuantizeTests(SimpleTestCase):

    def test_per_tensor_example_is_exact(self):
        x = np.array([0.5, -1.0, 2.0, 4.0], dtype=np.float32)
        q = quantize(x, QuantGeometry.per_tensor(), E4M3, ScaleFormat.FP32)
        np.testing.assert_array_equal(decode_array(q.codes, E4M3), [56, -112, 224, 448])
        np.testing.assert_array_equal(dequantize(q), x)

    def test_bf16_scales_exact_for_power_of_two_scale(self):
        x = np.array([0.875, -1.75, 3.5, 7.0], dtype=np.float32)
        q = quantize(x, QuantGeometry.per_tensor(), E4M3)
        self.assertEqual(q.scales[0], 2.0 ** -6)
        np.testing.assert_array_equal(dequantize(q), x)

    def test_per_group_example(self):
        x = np.array([1.0, 2.0, 100.0, 200.0], dtype=np.float32)
        q = quantize(x, QuantGeometry.per_group(2), E4M3, ScaleFormat.FP32)
        np.testing.assert_array_equal(q.scales, np.float32([2 / 448, 200 / 448]))
        np.testing.assert_array_equal(dequantize(q), x)

    def test_all_zero_tensor(self):
        q = quantize(np.zeros((2, 8), np.float32), QuantGeometry.per_group(4), E4M3)
        self.assertFalse(q.codes.any())
        self.assertTrue(np.all(q.scales > 0))
        np.testing.assert_array_equal(dequantize(q), np.zeros((2, 8)))

    def test_subnormal_group_is_not_treated_as_zero(self):
        tiny = np.finfo(np.float32).smallest_subnormal
        x = (np.array([7.0, -14.0, 20.0, 1.0]) * tiny).astype(np.float32)
        q = quantize(x, QuantGeometry.per_tensor(), E4M3, ScaleFormat.FP32)
        self.assertEqual(q.scales[0], tiny)
        np.testing.assert_array_equal(dequantize(q), x)

        q = quantize(x, QuantGeometry.per_tensor(), E4M3)
        self.assertEqual(q.scales[0], ScaleFormat.BF16.smallest_positive)
        self.assertEqual(round_bf16(ScaleFormat.BF16.smallest_positive),
                         ScaleFormat.BF16.smallest_positive)

    def test_scale_count_follows_geometry(self):
        x = np.ones((2, 8, 8), np.float32)
        self.assertEqual(quantize(x, QuantGeometry.per_tensor(), E4M3).scales.size, 1)
        self.assertEqual(quantize(x, QuantGeometry.per_group(4), E4M3).scales.size, 32)
        self.assertEqual(quantize(x, QuantGeometry.per_block(4), E4M3).scales.size, 8)

    def test_geometry_mismatch(self):
        with self.assertRaises(GeometryMismatch):
            quantize(np.ones((3, 10), np.float32), QuantGeometry.per_group(4), E4M3)
        with self.assertRaises(GeometryMismatch):
            quantize(np.ones(16, np.float32), QuantGeometry.per_block(4), E4M3)

    def test_non_finite_rejected(self):
        with self.assertRaises(NonFiniteInput):
            quantize(np.array([1.0, math.nan], np.float32), QuantGeometry.per_tensor(), E4M3)

    def test_codes_stay_within_format(self):
        rng = np.random.default_rng(5)
        x = (rng.standard_normal((16, 64)) * 10).astype(np.float32)
        for fmt in (E4M3, E5M2, DE8):
            q = quantize(x, QuantGeometry.per_group(16), fmt)
            decoded = np.abs(decode_array(q.codes, fmt))
            self.assertTrue(np.all(np.isfinite(decoded)))
            self.assertLessEqual(decoded.max(), fmt.delta_max)

    def test_relative_error_in_normal_range(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            x = rng.standard_normal((8, 64)).astype(np.float32)
            q = quantize(x, QuantGeometry.per_group(16), E4M3)
            restored = dequantize(q).astype(np.float64)
            scale = np.repeat(q.scales.astype(np.float64), 16).reshape(x.shape)
            normal = np.abs(x) / scale >= 2.0 ** -6
            rel = np.abs(restored - x)[normal] / np.abs(x.astype(np.float64))[normal]
            self.assertLessEqual(rel.max(), 2.0 ** -4 + 2.0 ** -8)

    def test_power_of_two_scaling_keeps_codes(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 64)).astype(np.float32)
        for geometry in (QuantGeometry.per_tensor(), QuantGeometry.per_group(16),
                         QuantGeometry.per_block(4)):
            base = quantize(x, geometry, E4M3)
            scaled = quantize(x * np.float32(32.0), geometry, E4M3)
            np.testing.assert_array_equal(base.codes, scaled.codes)
            np.testing.assert_array_equal(base.scales * 32, scaled.scales)

    def test_full_row_group_equals_per_tensor(self):
        x = np.random.default_rng(8).standard_normal((1, 48)).astype(np.float32)
        grouped = quantize(x, QuantGeometry.per_group(48), E4M3)
        whole = quantize(x, QuantGeometry.per_tensor(), E4M3)
        np.testing.assert_array_equal(grouped.codes, whole.codes)
        np.testing.assert_array_equal(grouped.scales, whole.scales)

    def test_per_block_tiles_round_trip_layout(self):
        x = np.arange(2 * 8 * 12, dtype=np.float32).reshape(2, 8, 12)
        geometry = QuantGeometry.per_block(4)
        groups = geometry.to_groups(x)
        self.assertEqual(groups.shape, (12, 16))
        np.testing.assert_array_equal(groups[0], x[0, :4, :4].ravel())
        np.testing.assert_array_equal(geometry.from_groups(groups, x.shape), x)


class GroupScaleMaxTests(SimpleTestCase):

    def test_example_shape(self):
        x = np.random.default_rng(9).standard_normal((2, 256)).astype(np.float32)
        intermediate, global_max = group_scale_max(x, 128)
        self.assertEqual(intermediate.shape, (2, 2))
        self.assertEqual(global_max, float(np.abs(x).max()))

    def test_constant_tensor(self):
        intermediate, global_max = group_scale_max(np.full((3, 32), -2.5, np.float32), 8)
        np.testing.assert_array_equal(intermediate, np.full((3, 4), 2.5))
        self.assertEqual(global_max, 2.5)

    def test_two_stage_equals_one_stage(self):
        rng = np.random.default_rng(10)
        for _ in range(10000):
            cols = int(rng.choice([8, 12, 16, 24, 48]))
            x = (rng.standard_normal((int(rng.integers(1, 4)), cols))
                 * rng.uniform(0.01, 100.0)).astype(np.float32)
            for group_size in (g for g in (1, 2, 3, 4, 6, 8, 12, 16) if cols % g == 0):
                self.assertEqual(group_scale_max(x, group_size)[1], float(np.abs(x).max()))

    def test_rejects_ragged_groups(self):
        with self.assertRaises(GeometryMismatch):
            group_scale_max(np.ones((2, 10), np.float32), 4)


class QuantizationErrorTests(SimpleTestCase):

    def test_representable_tensor_has_no_error(self):
        x = np.array([[448.0, -2.0, 0.5, 0.0]], np.float32)
        self.assertEqual(quantization_error(x, QuantGeometry.per_tensor(), E4M3), 0.0)

    def test_error_shrinks_with_group_size(self):
        row = np.float32(448.0) * np.float32(2.0) ** -np.arange(64, dtype=np.float32)
        x = np.stack([row, -row]).astype(np.float32)
        errors = {g: quantization_error(x, QuantGeometry.per_group(g), E4M3)
                  for g in (4, 8, 16, 32, 64)}
        self.assertEqual(errors[4], 0.0)
        self.assertEqual(errors[8], 0.0)
        self.assertEqual(errors[16], 0.0)
        self.assertLess(errors[16], errors[32])
        self.assertLess(errors[32], errors[64])

    def test_within_token_groups_beat_cross_token_blocks(self):
        wins = 0
        for seed in range(20):
            x = generate(SyntheticSpec(SyntheticKind.ACTIVATION_WITH_OUTLIERS, (64, 64),
                                       outlier_fraction=0.05, outlier_scale=448.0 * 2 ** 8,
                                       seed=seed))
            per_group = quantization_error(x, QuantGeometry.per_group(16), E4M3)
            per_block = quantization_error(x, QuantGeometry.per_block(4), E4M3)
            wins += per_group < per_block
        self.assertGreaterEqual(wins, 18)


# ============================================
# RANGE EXPANSION
# ============================================

class DynamicRangeTests(SimpleTestCase):

    def test_examples(self):
        self.assertEqual(dynamic_range([1.0, 2.0, 4.0]), 4.0)
        self.assertEqual(dynamic_range([1.0, -2.0, 4.0, 8.0]), 8.0)
        self.assertEqual(dynamic_range([0.0, 3.0, 6.0]), 2.0)

    def test_scale_free(self):
        group = np.array([0.3, -1.7, 12.0])
        self.assertAlmostEqual(dynamic_range(group * 37.5), dynamic_range(group), places=9)

    def test_all_zero(self):
        with self.assertRaises(AllZeroGroup):
            dynamic_range([0.0, -0.0])


class OptimalKTests(SimpleTestCase):

    def test_full_range_is_fixed_point(self):
        self.assertEqual(optimal_k(229376.0), 1.0)

    def test_range_eight(self):
        k = optimal_k(8.0)
        self.assertAlmostEqual(k, 5.9358, places=4)
        self.assertLess(abs(8.0 ** k / 229376.0 - 1.0), 1e-3)

    def test_clamped(self):
        self.assertEqual(optimal_k(1e7), 1.0)
        self.assertEqual(optimal_k(1.01), 20.0)
        self.assertEqual(optimal_k(1.01, k_max=8.0), 8.0)

    def test_degenerate(self):
        with self.assertRaises(DegenerateRange):
            optimal_k(1.0)

    def test_target_range_knob(self):
        self.assertAlmostEqual(optimal_k(8.0, target_range=E5M2.dynamic_range),
                               math.log(E5M2.dynamic_range) / math.log(8.0), places=9)


class ExpandContractTests(SimpleTestCase):

    def test_examples(self):
        self.assertEqual(expand(np.float32([-2.0]), 3.0)[0], -8.0)
        self.assertAlmostEqual(float(contract(np.float32([-8.0]), 3.0)[0]), -2.0, places=6)
        x = np.float32([-3.5, 0.0, 0.25, 17.0])
        np.testing.assert_array_equal(expand(x, 1.0), x)
        np.testing.assert_array_equal(contract(x, 1.0), x)

    def test_optimal_k_reaches_target(self):
        x = np.float32([[1.0, 2.0, 4.0, 8.0]])
        geometry = QuantGeometry.per_group(4)
        params = expansion_params(x, geometry)
        expanded = expand(x, params.k, params.c, geometry)
        self.assertLess(abs(dynamic_range(expanded) / 229376.0 - 1.0), 1e-3)

    def test_range_power_law(self):
        rng = np.random.default_rng(12)
        ranges = rng.uniform(1.5, 1000.0, size=1000)
        x = np.exp(rng.uniform(0.0, 1.0, (1000, 16)) * np.log(ranges)[:, None])
        x *= rng.choice([-1.0, 1.0], size=x.shape)
        x = x.astype(np.float32)
        k = rng.uniform(1.0, 20.0, size=1000)
        magnitudes = np.abs(x.astype(np.float64))
        c = np.sqrt(magnitudes.min(axis=1) * magnitudes.max(axis=1))
        geometry = QuantGeometry.per_group(16)
        expanded = expand(x, k, c, geometry)
        rel = np.abs(_group_ranges(expanded) / _group_ranges(x) ** k - 1.0)
        self.assertLess(rel.max(), 1e-6)

    def test_contract_inverts_expand(self):
        rng = np.random.default_rng(13)
        geometry = QuantGeometry.per_group(32)
        for _ in range(50):
            x = generate(SyntheticSpec(SyntheticKind.UNIFORM_LOG, (4, 32), dynamic_range=1e6,
                                       seed=int(rng.integers(2 ** 32))))
            params = expansion_params(x, geometry)
            back = contract(expand(x, params.k, params.c, geometry), params.k, params.c, geometry)
            rel = np.abs(back.astype(np.float64) / x - 1.0)
            self.assertLessEqual(rel.max(), 1e-5)


class ExpandFunctionPropertyTests(SimpleTestCase):
    """Odd, monotone, anchored at 0 and 1, and ratio-preserving under rescaling"""

    cases = 10000

    def setUp(self):
        self.rng = np.random.default_rng(14)

    def test_odd(self):
        x = self.rng.uniform(-10.0, 10.0, self.cases).astype(np.float32)
        k = self.rng.uniform(1.0, 8.0, self.cases)
        np.testing.assert_array_equal(expand(-x, k), -expand(x, k))

    def test_strictly_increasing_on_positives(self):
        x = np.geomspace(0.01, 100.0, self.cases).astype(np.float32)
        for k in (1.0, 2.5, 7.0):
            self.assertTrue(np.all(np.diff(expand(x, k).astype(np.float64)) > 0), k)

    def test_anchors(self):
        k = self.rng.uniform(1.0, 20.0, self.cases)
        np.testing.assert_array_equal(expand(np.zeros(self.cases, np.float32), k), 0.0)
        np.testing.assert_array_equal(expand(np.ones(self.cases, np.float32), k), 1.0)

    def test_ratio_invariant_under_rescaling(self):
        x = self.rng.uniform(0.1, 10.0, self.cases).astype(np.float32)
        y = self.rng.uniform(0.1, 10.0, self.cases).astype(np.float32)
        r = np.float32(2.0) ** self.rng.integers(-10, 11, self.cases).astype(np.float32)
        k = self.rng.uniform(1.0, 8.0, self.cases)
        plain = expand(x, k).astype(np.float64) / expand(y, k)
        rescaled = expand(r * x, k).astype(np.float64) / expand(r * y, k)
        self.assertLess(np.max(np.abs(rescaled / plain - 1.0)), 1e-6)


class ExpansionParamsTests(SimpleTestCase):

    def test_stabilizer_symmetry(self):
        x = generate(SyntheticSpec(SyntheticKind.UNIFORM_LOG, (64, 128), dynamic_range=1e3, seed=15))
        geometry = QuantGeometry.per_group(128)
        params = expansion_params(x, geometry)
        self.assertTrue(np.all(params.k > 1.0))
        magnitudes = np.abs(geometry.to_groups(x).astype(np.float64))
        c = params.c.astype(np.float64)
        product = (magnitudes.min(axis=1) / c) * (magnitudes.max(axis=1) / c)
        self.assertLess(np.max(np.abs(product - 1.0)), 1e-6)

    def test_zeros_and_constant_groups(self):
        x = np.float32([[0.0, 0.0, 0.0, 0.0], [3.0, -3.0, 0.0, 3.0], [1.0, 0.0, 2.0, 0.0]])
        params = expansion_params(x, QuantGeometry.per_group(4))
        np.testing.assert_array_equal(params.k[:2], [1.0, 1.0])
        np.testing.assert_array_equal(params.c[:2], [1.0, 1.0])
        self.assertTrue(params.degenerate[0] and params.degenerate[1])
        self.assertEqual(params.measured_range[2], 2.0)
        self.assertAlmostEqual(float(params.k[2]), math.log(229376.0) / math.log(2.0), places=5)

    def test_power_of_two_rescaling_keeps_k_and_codes(self):
        x = generate(SyntheticSpec(SyntheticKind.UNIFORM_LOG, (8, 128), dynamic_range=1e3, seed=16))
        base = expand_quantize(x, 128, E4M3)
        scaled = expand_quantize(x * np.float32(2.0 ** 7), 128, E4M3)
        np.testing.assert_array_equal(base.params.k, scaled.params.k)
        np.testing.assert_array_equal(base.quantized.codes, scaled.quantized.codes)


class ExpandQuantizeTests(SimpleTestCase):

    def test_expansion_lowers_round_trip_error(self):
        geometry = QuantGeometry.per_group(128)
        for seed in range(20):
            x = generate(SyntheticSpec(SyntheticKind.UNIFORM_LOG, (16, 128),
                                       dynamic_range=1e3, seed=seed))
            plain = quantization_error(x, geometry, E4M3)
            restored = dequantize_contract(expand_quantize(x, 128, E4M3)).astype(np.float64)
            expanded = float(np.mean((restored - x) ** 2))
            self.assertLess(expanded, plain, seed)

    def test_full_range_group_is_lossless(self):
        x = np.float32([[448.0, -2.0 ** -9, 1.0, -3.5]])
        state = expand_quantize(x, 4, E4M3)
        self.assertEqual(state.params.k[0], 1.0)
        self.assertEqual(state.params.c[0], 1.0)
        np.testing.assert_array_equal(dequantize_contract(state), x)

    def test_expansion_uses_whole_code_range(self):
        x = generate(SyntheticSpec(SyntheticKind.UNIFORM_LOG, (64, 128), dynamic_range=1e4, seed=17))
        subnormal = np.array([b for b in range(256) if b & 0x78 == 0 and b & 0x07])
        top = [0x7E, 0xFE]

        plain = code_histogram(quantize(x, QuantGeometry.per_group(128), E4M3))
        expanded = code_histogram(expand_quantize(x, 128, E4M3))
        self.assertEqual(plain[subnormal].sum(), 0)
        self.assertGreater(expanded[subnormal].sum(), 0)
        self.assertGreater(expanded[top].sum(), 0)
        self.assertEqual(expanded.sum(), x.size)

    def test_de8_round_trip(self):
        x = generate(SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, (4, 128),
                                   outlier_fraction=0.01, seed=18))
        restored = dequantize_contract(expand_quantize(x, 128, DE8))
        self.assertLess(np.max(np.abs(restored - x)), 0.1 * np.abs(x).max())


# ============================================
# RECORDS
# ============================================

class RecordTests(SimpleTestCase):

    def setUp(self):
        self.workdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.workdir.cleanup)
        self.x = generate(SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, (4, 64),
                                        outlier_fraction=0.02, seed=19))

    def test_quantized_record(self):
        path = os.path.join(self.workdir.name, 'q.cqt8')
        for geometry in (QuantGeometry.per_tensor(), QuantGeometry.per_group(16),
                         QuantGeometry.per_block(4)):
            q = quantize(self.x, geometry, E5M2, ScaleFormat.FP32)
            records.save(q, path)
            loaded = records.load(path)
            self.assertEqual(loaded.geometry, geometry)
            self.assertIs(loaded.format, E5M2)
            self.assertIs(loaded.scale_format, ScaleFormat.FP32)
            np.testing.assert_array_equal(dequantize(loaded), dequantize(q))

    def test_expanded_record(self):
        state = expand_quantize(self.x, 64, E4M3)
        loaded = records.from_bytes(records.to_bytes(state))
        np.testing.assert_array_equal(loaded.params.k, state.params.k)
        np.testing.assert_array_equal(loaded.params.c, state.params.c)
        np.testing.assert_array_equal(dequantize_contract(loaded), dequantize_contract(state))

    def test_bad_magic_and_truncation(self):
        blob = records.to_bytes(quantize(self.x, QuantGeometry.per_group(16), E4M3))
        with self.assertRaises(BadMagic):
            records.from_bytes(b'XXXX' + blob[4:])
        with self.assertRaises(ShapeMismatch):
            records.from_bytes(blob[:-3])
