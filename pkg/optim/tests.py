import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from numerics.exceptions import InvalidSpec, NonFiniteGradient, ShapeMismatch
from numerics.quantizer import QuantGeometry
from numerics.range_expansion import expansion_params

from .adamw import (
    AdamWConfig,
    MomentPolicy,
    OptimizerSlot,
    SlotPolicy,
    direction_mse_matrix,
    load_slot,
    reference_adamw_step,
    save_slot,
    step,
    update_direction_mse,
)
from .states import simulate_moments
from .tasks import QuadraticBowl, run_quantized, run_reference

EXPANDED = SlotPolicy.parse('E4M3+Expand/E4M3+Expand')


def _bits(array):
    return np.asarray(array, dtype=np.float32).view(np.uint32)


class PolicyTests(SimpleTestCase):

    def test_parse_and_label(self):
        policy = MomentPolicy.parse('e5m2+expand', group_size=64)
        self.assertEqual(policy.format, 'E5M2')
        self.assertTrue(policy.expand)
        self.assertEqual(policy.label, 'E5M2+Expand')
        self.assertEqual(SlotPolicy.parse('DE8+Expand/E4M3').label, 'DE8+Expand/E4M3')
        self.assertEqual(SlotPolicy.parse('FP32').second.label, 'FP32')

    def test_rejects_unknown(self):
        with self.assertRaises(InvalidSpec):
            MomentPolicy.parse('INT8')
        with self.assertRaises(InvalidSpec):
            MomentPolicy.parse('E4M3+stochastic')
        with self.assertRaises(InvalidSpec):
            AdamWConfig(beta1=1.0)
        with self.assertRaises(InvalidSpec):
            AdamWConfig(eps=0.0)

    def test_round_trip_pads_to_whole_groups(self):
        policy = MomentPolicy('E4M3', group_size=128)
        values = np.linspace(-1.0, 1.0, 64, dtype=np.float32)
        state = policy.encode(values)
        self.assertEqual(state.codes.shape, (128,))
        self.assertEqual(policy.decode(state, (8, 8)).shape, (8, 8))


class ReferenceStepTests(SimpleTestCase):

    def test_first_step_bias_correction(self):
        cfg = AdamWConfig(lr=1e-3)
        w, m, v = reference_adamw_step(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1), 1, cfg)
        self.assertAlmostEqual(float(m[0]), 0.1, places=7)
        self.assertAlmostEqual(float(v[0]), 0.001, places=9)
        self.assertAlmostEqual(float(w[0]), -1e-3 / (1 + 1e-8), places=9)

    def test_decoupled_weight_decay(self):
        cfg = AdamWConfig(lr=1e-2, weight_decay=0.1)
        w = np.full(4, 2.0, np.float32)
        m = v = np.zeros(4, np.float32)
        for t in range(1, 6):
            previous = w
            w, m, v = reference_adamw_step(w, np.zeros(4), m, v, t, cfg)
            np.testing.assert_allclose(w, previous * (1 - 1e-2 * 0.1), rtol=1e-6)

    def test_scalar_quadratic_descends(self):
        cfg = AdamWConfig(lr=1e-2)
        w = np.ones(1, np.float32)
        m = v = np.zeros(1, np.float32)
        magnitudes = [1.0]
        for t in range(1, 101):
            w, m, v = reference_adamw_step(w, w.copy(), m, v, t, cfg)
            magnitudes.append(abs(float(w[0])))
        self.assertTrue(all(b < a for a, b in zip(magnitudes, magnitudes[1:])))
        self.assertLess(magnitudes[-1], 0.5)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            reference_adamw_step(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3), 1, AdamWConfig())


class QuantizedStepTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(20)
        self.cfg = AdamWConfig(lr=1e-2, weight_decay=0.01)

    def test_fp32_policy_matches_oracle_bitwise(self):
        w = self.rng.standard_normal(300).astype(np.float32)
        slot = OptimizerSlot.zeros(w.shape, SlotPolicy.parse('FP32'))
        w_ref, m, v = w.copy(), np.zeros_like(w), np.zeros_like(w)
        for t in range(1, 51):
            g = self.rng.standard_normal(300).astype(np.float32)
            w, slot = step(w, g, slot, self.cfg)
            w_ref, m, v = reference_adamw_step(w_ref, g, m, v, t, self.cfg)
            np.testing.assert_array_equal(_bits(w), _bits(w_ref))
        np.testing.assert_array_equal(_bits(slot.m), _bits(m))
        np.testing.assert_array_equal(_bits(slot.v), _bits(v))
        self.assertEqual(slot.step, 50)

    def test_second_moment_stays_non_negative(self):
        for text in ('E4M3', 'E5M2', 'DE8', 'E4M3+Expand', 'DE8+Expand'):
            w = self.rng.standard_normal(256).astype(np.float32)
            slot = OptimizerSlot.zeros(w.shape, SlotPolicy.parse(text))
            for _ in range(5):
                w, slot = step(w, self.rng.standard_normal(256).astype(np.float32), slot, self.cfg)
            self.assertTrue(np.all(slot.v >= 0), text)

    def test_shard_independence(self):
        for _ in range(10):
            cut = 128 * int(self.rng.integers(1, 4))
            w = self.rng.standard_normal(512).astype(np.float32)
            joint = OptimizerSlot.zeros(512, EXPANDED)
            left = OptimizerSlot.zeros(cut, EXPANDED)
            right = OptimizerSlot.zeros(512 - cut, EXPANDED)
            w_left, w_right = w[:cut].copy(), w[cut:].copy()
            for _ in range(10):
                g = self.rng.standard_normal(512).astype(np.float32)
                w, joint = step(w, g, joint, self.cfg)
                w_left, left = step(w_left, g[:cut], left, self.cfg)
                w_right, right = step(w_right, g[cut:], right, self.cfg)
                np.testing.assert_array_equal(_bits(w), _bits(np.concatenate([w_left, w_right])))
            np.testing.assert_array_equal(_bits(joint.m), _bits(np.concatenate([left.m, right.m])))
            np.testing.assert_array_equal(_bits(joint.v), _bits(np.concatenate([left.v, right.v])))

    def test_group_permutation_commutes(self):
        w = self.rng.standard_normal(512).astype(np.float32)
        g = self.rng.standard_normal(512).astype(np.float32)
        order = np.concatenate([np.arange(128) + 128 * i for i in (2, 0, 3, 1)])
        plain_w, plain_slot = step(w, g, OptimizerSlot.zeros(512, EXPANDED), self.cfg)
        plain_w, plain_slot = step(plain_w, g, plain_slot, self.cfg)
        perm_w, perm_slot = step(w[order], g[order], OptimizerSlot.zeros(512, EXPANDED), self.cfg)
        perm_w, perm_slot = step(perm_w, g[order], perm_slot, self.cfg)
        np.testing.assert_array_equal(_bits(perm_w), _bits(plain_w[order]))
        np.testing.assert_array_equal(_bits(perm_slot.v), _bits(plain_slot.v[order]))

    def test_rejects_bad_gradients(self):
        slot = OptimizerSlot.zeros(8, EXPANDED)
        with self.assertRaises(ShapeMismatch):
            step(np.zeros(8), np.zeros(9), slot, self.cfg)
        with self.assertRaises(NonFiniteGradient):
            step(np.zeros(8), np.full(8, np.nan), slot, self.cfg)

    def test_state_bytes(self):
        self.assertEqual(OptimizerSlot.zeros(256, SlotPolicy.parse('E4M3')).state_bytes(), 2 * (256 + 2 * 2))
        self.assertEqual(OptimizerSlot.zeros(256, EXPANDED).state_bytes(), 2 * (256 + 2 * 2 + 2 * 8))
        self.assertEqual(OptimizerSlot.zeros(256, SlotPolicy.parse('FP32')).state_bytes(), 2 * 256 * 4)


class ConvergenceTests(SimpleTestCase):

    def test_expanded_e4m3_tracks_oracle_on_quadratic(self):
        task = QuadraticBowl(dim=64, seed=21)
        cfg = AdamWConfig(lr=1e-3)
        reference = run_reference(task, cfg, 1000)
        quantized = run_quantized(task, EXPANDED, cfg, 1000)
        self.assertLess(reference.final_loss, reference.losses[0])
        self.assertLess(abs(quantized.final_loss / reference.final_loss - 1.0), 0.1)
        drift = max(float(np.linalg.norm(a - b)) for a, b in zip(quantized.params, reference.params))
        self.assertLess(drift, 0.5)

    def test_fp32_policy_trajectory_is_the_oracle(self):
        task = QuadraticBowl(dim=64, seed=22)
        cfg = AdamWConfig(lr=1e-3)
        reference = run_reference(task, cfg, 200)
        plain = run_quantized(task, SlotPolicy.parse('FP32'), cfg, 200)
        self.assertEqual(plain.losses, reference.losses)


class CheckpointTests(SimpleTestCase):

    def test_resume_from_checkpoint(self):
        rng = np.random.default_rng(23)
        cfg = AdamWConfig(lr=1e-2)
        for text in ('E4M3+Expand/E5M2', 'FP32/DE8'):
            policy = SlotPolicy.parse(text, group_size=32)
            w = rng.standard_normal(100).astype(np.float32)
            slot = OptimizerSlot.zeros(w.shape, policy)
            for _ in range(3):
                w, slot = step(w, rng.standard_normal(100).astype(np.float32), slot, cfg)
            with tempfile.TemporaryDirectory() as workdir:
                path = os.path.join(workdir, 'slot.ckpt')
                save_slot(slot, cfg, path)
                loaded, loaded_cfg = load_slot(path)
            self.assertEqual(loaded_cfg.step, 3)
            self.assertEqual(loaded.policy, policy)
            g = rng.standard_normal(100).astype(np.float32)
            w_a, slot_a = step(w, g, slot, cfg)
            w_b, slot_b = step(w, g, loaded, loaded_cfg)
            np.testing.assert_array_equal(_bits(w_a), _bits(w_b))
            np.testing.assert_array_equal(_bits(slot_a.v), _bits(slot_b.v))


# ============================================
# QUANTIZATION ERROR OF THE UPDATE DIRECTION
# ============================================

TABLE_FORMATS = ('E4M3', 'E5M2')
FIRST_POLICIES = [MomentPolicy.parse(text) for text in
                  ('E4M3', 'E4M3+Expand', 'E5M2', 'E5M2+Expand', 'DE8', 'DE8+Expand')]
SECOND_POLICIES = FIRST_POLICIES


class SimulatedMomentTests(SimpleTestCase):

    def test_deterministic(self):
        first = simulate_moments(size=1024, steps=20, seed=3)
        second = simulate_moments(size=1024, steps=20, seed=3)
        np.testing.assert_array_equal(_bits(first[1]), _bits(second[1]))
        self.assertTrue(np.all(first[1] >= 0))

    def test_second_moment_needs_larger_k(self):
        m, v = simulate_moments(seed=0)
        geometry = QuantGeometry.per_group(128)
        k_m = float(np.median(expansion_params(m, geometry).k))
        k_v = float(np.median(expansion_params(v, geometry).k))
        self.assertGreater(k_v, k_m)
        self.assertTrue(1.0 <= k_m <= 3.5, k_m)
        self.assertTrue(3.0 <= k_v <= 15.0, k_v)


class DirectionErrorTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.matrices = []
        for seed in range(20):
            m, v = simulate_moments(seed=seed)
            cls.matrices.append(direction_mse_matrix(FIRST_POLICIES, SECOND_POLICIES, m, v))
        cls.mean = {key: np.mean([matrix[key] for matrix in cls.matrices])
                    for key in cls.matrices[0]}

    def test_lossless_policy_has_no_error(self):
        m, v = simulate_moments(size=2048, steps=50, seed=1)
        self.assertEqual(update_direction_mse(SlotPolicy.parse('FP32'), m, v), 0.0)

    def test_single_policy_matches_matrix(self):
        m, v = simulate_moments(size=2048, steps=50, seed=2)
        policy = SlotPolicy.parse('DE8+Expand/E4M3')
        matrix = direction_mse_matrix([policy.first], [policy.second], m, v)
        self.assertEqual(update_direction_mse(policy, m, v), matrix[('DE8+Expand', 'E4M3')])

    def test_expansion_reduces_error(self):
        for first in TABLE_FORMATS:
            for second in TABLE_FORMATS:
                for s in (second, f'{second}+Expand'):
                    self.assertLess(self.mean[(f'{first}+Expand', s)], self.mean[(first, s)])
                for f in (first, f'{first}+Expand'):
                    self.assertLess(self.mean[(f, f'{second}+Expand')], self.mean[(f, second)])

    def test_e4m3_beats_e5m2_for_first_moment(self):
        for second in ('E4M3', 'E4M3+Expand', 'E5M2', 'E5M2+Expand'):
            self.assertLess(self.mean[('E4M3', second)], self.mean[('E5M2', second)])
            self.assertLess(self.mean[('E4M3+Expand', second)], self.mean[('E5M2+Expand', second)])

    def test_de8_expand_with_e4m3_expand_is_best(self):
        best = ('DE8+Expand', 'E4M3+Expand')
        wins = sum(min(matrix, key=matrix.get) == best for matrix in self.matrices)
        self.assertGreaterEqual(wins, 15)
