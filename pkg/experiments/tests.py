import io
import json
import math
import os
import tempfile
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from flow.precision_flow import LayerSpec
from numerics.exceptions import InvalidSpec
from optim.adamw import AdamWConfig, SlotPolicy

from . import sweeps
from .forms import CodecAuditForm, FlowSimForm, MemoryForm, OptimAblateForm, OptimTrainForm
from .models import ExperimentRun
from .reports import Report, plain
from .runner import run_cells, worker_count
from .training import LayerRegression, train_regression


def _write_config(directory, text):
    path = os.path.join(directory, 'experiment.env')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(text)
    return path


def _csv_body(text):
    return [line for line in text.splitlines() if not line.startswith('#')]


# ============================================
# CONFIGURATION
# ============================================

class ConfigTests(SimpleTestCase):

    def test_defaults(self):
        config = MemoryForm.resolve()
        self.assertEqual(config['policy'], ['BF16', 'TE', 'COAT'])
        self.assertEqual((config['batch'], config['seq_len'], config['hidden']), (1, 2048, 4096))
        self.assertIsNone(config['intermediate'])
        self.assertFalse(config['include_scales'])
        self.assertEqual(config['emit'], 'csv')
        self.assertEqual(config['seed'], 0)

    @override_settings(COATSIM_ACTIVATION_GROUP_SIZE=32, COATSIM_OPTIMIZER_GROUP_SIZE=64)
    def test_group_sizes_follow_settings(self):
        self.assertEqual(MemoryForm.resolve()['group_size'], 32)
        self.assertEqual(OptimAblateForm.resolve()['group_size'], 64)
        self.assertEqual(FlowSimForm.resolve(policy='BF16')['group_size'], [32])

    @override_settings(COATSIM_K_MAX=8.0)
    def test_expansion_clamp_follows_settings(self):
        self.assertEqual(OptimAblateForm.resolve()['k_max'], 8.0)
        self.assertEqual(OptimTrainForm.resolve(task='quadratic')['k_max'], 8.0)

    def test_flags_override_file(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = _write_config(workdir, "# memory table\nGROUP_SIZE=64\nseq-len=1024\n")
            config = MemoryForm.resolve(path, group_size=128, seq_len=None)
        self.assertEqual(config['seq_len'], 1024)
        self.assertEqual(config['group_size'], 128)

    def test_file_booleans(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = _write_config(workdir, "include_scales=true\npolicy=COAT\n")
            config = MemoryForm.resolve(path)
        self.assertTrue(config['include_scales'])
        self.assertEqual(config['policy'], ['COAT'])

    def test_unknown_key(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = _write_config(workdir, "granularity=per-block\n")
            with self.assertRaises(InvalidSpec):
                MemoryForm.resolve(path)

    def test_missing_file(self):
        with self.assertRaises(InvalidSpec):
            MemoryForm.resolve('/nonexistent/experiment.env')

    def test_policy_lists_are_canonical(self):
        config = OptimAblateForm.resolve(policy='e4m3, E4M3+expand ,E4M3')
        self.assertEqual(config['policy'], ['E4M3', 'E4M3+Expand'])
        self.assertEqual(OptimTrainForm.resolve(policy='de8+expand/e4m3')['policy'],
                         'DE8+Expand/E4M3')
        self.assertEqual(FlowSimForm.resolve(group_size='64,16,16')['group_size'], [16, 64])

    def test_invalid_values(self):
        with self.assertRaises(InvalidSpec):
            MemoryForm.resolve(policy='FP32')
        with self.assertRaises(InvalidSpec):
            OptimAblateForm.resolve(policy='INT8')
        with self.assertRaises(InvalidSpec):
            OptimAblateForm.resolve(seeds=0)
        with self.assertRaises(InvalidSpec):
            # 64 is not a multiple of 24
            FlowSimForm.resolve(group_size='24')
        with self.assertRaises(InvalidSpec):
            OptimTrainForm.resolve(task='regression', hidden=30)
        with self.assertRaises(InvalidSpec):
            MemoryForm.resolve(emit='xml')


# ============================================
# REPORTS AND CELLS
# ============================================

class ReportTests(SimpleTestCase):

    def setUp(self):
        self.report = Report('demo', {'seed': 3, 'policy': ['E4M3']}, ('name', 'value'))
        self.report.add_row(name='a', value=np.float32(0.5))
        self.report.add_row(name='b', value=float('nan'))
        self.report.verdict('ordering', True)

    def test_csv(self):
        text = self.report.to_csv()
        lines = text.splitlines()
        self.assertEqual(lines[0], '# command: demo')
        self.assertEqual(lines[1], '# config: {"seed":3,"policy":["E4M3"]}')
        self.assertIn('# verdict ordering: pass', lines)
        self.assertEqual(_csv_body(text), ['name,value', 'a,0.5', 'b,nan'])

    def test_json_embeds_config(self):
        payload = json.loads(self.report.to_json())
        self.assertEqual(payload['config'], {'seed': 3, 'policy': ['E4M3']})
        self.assertEqual(payload['rows'][0], {'name': 'a', 'value': 0.5})
        self.assertEqual(payload['verdicts'], {'ordering': True})

    def test_failed_verdict(self):
        self.report.verdict('second', False)
        self.assertFalse(self.report.passed)
        self.assertEqual(self.report.failed(), ['second'])
        self.assertIn('# verdict second: FAIL', self.report.to_csv())

    def test_unknown_column(self):
        with self.assertRaises(ValueError):
            self.report.add_row(other=1)

    def test_plain(self):
        self.assertEqual(plain(np.int64(4)), 4)
        self.assertEqual(plain([math.inf, -math.inf]), ['inf', '-inf'])


class RunnerTests(SimpleTestCase):

    def test_results_ordered_by_key(self):
        results = run_cells(lambda key: key * 2, [3, 1, 2, 1], threads=4)
        self.assertEqual(results, [(1, 2), (2, 4), (3, 6)])
        self.assertEqual(run_cells(lambda key: key, [], threads=4), [])

    def test_serial_path_matches(self):
        cells = [('b', 1), ('a', 2), ('a', 1)]
        self.assertEqual(run_cells(str, cells, threads=1), run_cells(str, cells, threads=3))

    def test_exception_propagates(self):
        def fail(key):
            raise InvalidSpec(f"cell {key}")

        with self.assertRaises(InvalidSpec):
            run_cells(fail, [1, 2], threads=2)

    @override_settings(COATSIM_THREADS=2)
    def test_worker_cap(self):
        self.assertEqual(worker_count(range(10)), 2)
        self.assertEqual(worker_count(range(10), threads=16), 10)
        self.assertEqual(worker_count([1]), 1)


# ============================================
# SWEEPS
# ============================================

class CodecAuditTests(SimpleTestCase):

    def test_minifloat_limits_and_round_trips(self):
        report = sweeps.codec_audit(CodecAuditForm.resolve(format='E4M3,E5M2'))
        self.assertTrue(report.passed, report.verdicts)
        self.assertEqual(report.summary['E4M3']['delta_max'], 448.0)
        self.assertEqual(report.summary['E4M3']['delta_min'], 2.0 ** -9)
        self.assertEqual(report.summary['E5M2']['delta_max'], 57344.0)
        self.assertEqual(report.summary['E5M2']['delta_min'], 2.0 ** -16)
        self.assertEqual(len(report.rows), 512)
        nan_row = report.rows[0x7F]
        self.assertEqual((nan_row['code'], nan_row['value'], nan_row['finite']), ('0x7F', 'nan', False))
        self.assertEqual(nan_row['round_trip'], '')

    def test_de8_table(self):
        report = sweeps.codec_audit(CodecAuditForm.resolve(format='DE8'))
        self.assertEqual(len(report.rows), 256)
        self.assertTrue(all(row['round_trip'] for row in report.rows))
        self.assertEqual(report.summary['DE8']['finite_codes'], 256)
        self.assertTrue(report.passed)




class MemorySweepTests(SimpleTestCase):

    def test_default_table(self):
        report = sweeps.memory_report(MemoryForm.resolve())
        totals = {row['policy']: row for row in report.rows if row['operator'] == 'Total'}
        self.assertEqual([totals[p]['U'] for p in ('BF16', 'TE', 'COAT')], ['22.66', '18.33', '13.33'])
        self.assertEqual([totals[p]['ratio'] for p in ('BF16', 'TE', 'COAT')], ['1.00', '1.23', '1.69'])
        self.assertEqual(report.summary['COAT'], {'units': '40/3', 'ratio': '17/10'})
        self.assertTrue(report.verdicts['COAT-smallest'])
        self.assertEqual(len(report.rows), 18)

    def test_csv_table_columns(self):
        text = sweeps.memory_report(MemoryForm.resolve(policy='COAT')).to_csv()
        lines = [line for line in text.splitlines() if not line.startswith('#')]
        self.assertEqual(lines[0], 'operator,policy,U,bytes,ratio')
        self.assertEqual(len(lines), 7)
        self.assertTrue(lines[-1].startswith('Total,COAT,13.33,'))


class OptimSweepTests(SimpleTestCase):

    def test_lossless_cell_is_zero(self):
        config = OptimAblateForm.resolve(policy='E4M3,FP32', seeds=2, size=1024, steps=20)
        report = sweeps.optim_ablate(config)
        cells = {(row['first'], row['second']): row for row in report.rows}
        self.assertEqual(len(cells), 4)
        self.assertEqual(cells[('FP32', 'FP32')]['mean_mse'], 0.0)
        self.assertEqual(cells[('FP32', 'FP32')]['wins'], 2)
        self.assertGreater(cells[('E4M3', 'E4M3')]['mean_mse'], 0.0)
        self.assertEqual(report.verdicts, {})
        self.assertEqual(report.summary['seeds'], [0, 1])

    def test_fp32_training_is_the_oracle(self):
        config = OptimTrainForm.resolve(task='quadratic', policy='FP32', steps=50, log_every=25)
        report = sweeps.optim_train(config)
        self.assertTrue(report.verdicts['fp32-matches-oracle'])
        self.assertTrue(report.verdicts['quantized-within-10pct-of-oracle'])
        oracle = [row['loss'] for row in report.rows if row['run'] == 'oracle']
        fp32 = [row['loss'] for row in report.rows if row['run'] == 'FP32']
        self.assertEqual(oracle, fp32)
        self.assertEqual([row['step'] for row in report.rows if row['run'] == 'oracle'], [0, 25, 50])


class RegressionTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        spec = LayerSpec(hidden_size=16, seq_len=8, group_size=16)
        cls.task = LayerRegression(spec, seed=5)
        cls.cfg = AdamWConfig(lr=1e-3)
        cls.policy = SlotPolicy.parse('E4M3+Expand/E4M3+Expand')

    def test_target_is_deterministic(self):
        again = LayerRegression(self.task.spec, seed=5)
        np.testing.assert_array_equal(again.targets, self.task.targets)

    def test_fp32_fit_descends(self):
        trajectory = train_regression(self.task, self.policy, self.cfg, 30,
                                      fp8_optimizer=False, fp8_activations=False)
        self.assertEqual(len(trajectory.losses), 31)
        self.assertLess(trajectory.final_loss, trajectory.losses[0])

    def test_fp8_fit_descends(self):
        trajectory = train_regression(self.task, self.policy, self.cfg, 30)
        self.assertLess(trajectory.final_loss, trajectory.losses[0])

    def test_fit_is_deterministic(self):
        first = train_regression(self.task, self.policy, self.cfg, 3)
        second = train_regression(self.task, self.policy, self.cfg, 3)
        self.assertEqual(first.losses, second.losses)


class FlowSweepTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        config = FlowSimForm.resolve(policy='BF16,COAT', granularity='per-group,per-block',
                                     group_size='16', seeds=2, seq_len=16)
        cls.report = sweeps.flow_sim(config)

    def test_rows(self):
        studies = [(row['study'], row['policy'], row['granularity']) for row in self.report.rows]
        self.assertEqual(studies, [
            ('granularity', '', 'per-group'),
            ('granularity', '', 'per-block'),
            ('layer', 'BF16', 'per-group'),
            ('layer', 'COAT', 'per-block'),
            ('layer', 'COAT', 'per-group'),
        ])

    def test_tapes_reconcile(self):
        self.assertTrue(self.report.verdicts['tape-reconciles'])
        layers = {(row['policy'], row['granularity']): row for row in self.report.rows
                  if row['study'] == 'layer'}
        bf16 = layers[('BF16', 'per-group')]
        self.assertEqual(bf16['tape_bytes'], bf16['analytic_bytes'])
        self.assertEqual(bf16['overhead_fraction'], 0.0)
        for granularity in ('per-group', 'per-block'):
            coat = layers[('COAT', granularity)]
            self.assertGreater(coat['tape_bytes'], coat['analytic_bytes'])
            self.assertLessEqual(coat['overhead_fraction'], 0.125)
            self.assertGreater(coat['achieved_ratio'], 1.5)
            self.assertGreater(coat['mse'], 0.0)

    def test_granularity_wins_are_counted(self):
        rows = [row for row in self.report.rows if row['study'] == 'granularity']
        self.assertEqual(rows[0]['wins'] + rows[1]['wins'], 2)
        self.assertIn('per-group-beats-per-block', self.report.verdicts)


# ============================================
# COMMANDS
# ============================================

class CommandTests(TestCase):

    def _call(self, name, **options):
        out = io.StringIO()
        call_command(name, stdout=out, **options)
        return out.getvalue()

    def test_memory_table(self):
        text = self._call('memory')
        self.assertTrue(text.startswith('# command: memory\n'))
        body = _csv_body(text)
        self.assertEqual(body[0], 'operator,policy,U,bytes,ratio')
        coat_total = [line for line in body if line.startswith('Total,COAT,')]
        self.assertEqual(len(coat_total), 1)
        self.assertTrue(coat_total[0].startswith('Total,COAT,13.33,'))
        self.assertTrue(coat_total[0].endswith(',1.69'))

    def test_rerun_is_byte_identical(self):
        self.assertEqual(self._call('memory', emit='json'), self._call('memory', emit='json'))
        self.assertEqual(self._call('codec_audit', format='E5M2'),
                         self._call('codec_audit', format='E5M2'))

    def test_record_run(self):
        text = self._call('memory', emit='json', record=True, policy='COAT')
        run = ExperimentRun.objects.get()
        self.assertEqual(run.command, 'memory')
        self.assertEqual(run.report, text)
        self.assertTrue(run.passed)
        self.assertEqual(run.config['policy'], ['COAT'])
        self.assertEqual(json.loads(text)['config'], run.config)

    def test_report_to_file(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = os.path.join(workdir, 'reports', 'e4m3.json')
            text = self._call('codec_audit', format='E4M3', emit='json', out=path)
            with open(path, encoding='utf-8') as handle:
                payload = json.load(handle)
        self.assertIn('Report written to', text)
        self.assertEqual(len(payload['rows']), 256)
        self.assertEqual(payload['config']['out'], path)
        self.assertTrue(payload['verdicts']['E4M3-round-trip'])

    def test_config_file(self):
        with tempfile.TemporaryDirectory() as workdir:
            path = _write_config(workdir, "policy=TE\ninclude_scales=true\n")
            text = self._call('memory', config=path, emit='json')
        payload = json.loads(text)
        self.assertEqual({row['policy'] for row in payload['rows']}, {'TE'})
        self.assertTrue(payload['config']['include_scales'])

    def test_config_error_exits_2(self):
        with self.assertRaises(CommandError) as caught:
            self._call('memory', policy='FP32')
        self.assertEqual(caught.exception.returncode, 2)
        with tempfile.TemporaryDirectory() as workdir:
            path = _write_config(workdir, "steps=10\n")
            with self.assertRaises(CommandError) as caught:
                self._call('memory', config=path)
        self.assertEqual(caught.exception.returncode, 2)

    def test_failed_verdict_exits_1(self):
        def failing(config, threads=None):
            report = Report('memory', config, ('operator',))
            report.add_row(operator='Total')
            report.verdict('COAT-smallest', False)
            return report

        with mock.patch.dict(sweeps.SWEEPS, {'memory': failing}):
            with self.assertRaises(CommandError) as caught:
                self._call('memory', record=True)
        self.assertEqual(caught.exception.returncode, 1)
        run = ExperimentRun.objects.get()
        self.assertFalse(run.passed)
        self.assertEqual(run.failed_verdicts(), ['COAT-smallest'])

    def test_optim_train_fp32_passes(self):
        text = self._call('optim_train', task='quadratic', policy='FP32', steps=20)
        self.assertIn('# verdict fp32-matches-oracle: pass', text)


# ============================================
# VIEWS
# ============================================

class RunViewTests(TestCase):

    @classmethod
    def setUpTestData(cls):
        cls.memory = ExperimentRun.objects.create(
            command='memory', config={'policy': ['COAT']}, emit='csv',
            report='operator,policy\nTotal,COAT\n', verdicts={'COAT-smallest': True})
        cls.audit = ExperimentRun.objects.create(
            command='codec_audit', config={'format': ['E4M3']}, emit='json',
            report='{"rows": []}\n', passed=False, verdicts={'E4M3-limits': False})

    def test_list(self):
        response = self.client.get('/runs/')
        self.assertEqual(response.status_code, 200)
        runs = response.json()['runs']
        self.assertEqual({run['id'] for run in runs}, {self.memory.pk, self.audit.pk})
        audit = next(run for run in runs if run['id'] == self.audit.pk)
        self.assertEqual(audit['failed_verdicts'], ['E4M3-limits'])
        self.assertEqual(audit['report_url'], f'/runs/{self.audit.pk}/report/')

    def test_filters(self):
        runs = self.client.get('/runs/', {'command': 'memory'}).json()['runs']
        self.assertEqual([run['id'] for run in runs], [self.memory.pk])
        runs = self.client.get('/runs/', {'passed': 'false'}).json()['runs']
        self.assertEqual([run['id'] for run in runs], [self.audit.pk])

    def test_report_download(self):
        response = self.client.get(f'/runs/{self.memory.pk}/report/')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response['Content-Type'], 'text/csv')
        self.assertIn(f'memory-{self.memory.pk}.csv', response['Content-Disposition'])
        self.assertEqual(response.content.decode(), self.memory.report)
        response = self.client.get(f'/runs/{self.audit.pk}/report/')
        self.assertEqual(response['Content-Type'], 'application/json')

    def test_missing_run(self):
        self.assertEqual(self.client.get('/runs/9999/report/').status_code, 404)

    def test_read_only(self):
        self.assertEqual(self.client.post('/runs/').status_code, 405)

    def test_str(self):
        self.assertEqual(str(self.audit), f"Codec audit #{self.audit.pk} (FAIL)")
