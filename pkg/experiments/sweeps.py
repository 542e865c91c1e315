# experiments/sweeps.py
"""
The body of every experiment command: take a resolved config, run its cells and
assemble a Report. Commands only parse flags, call these and emit the result.
"""

import logging
import math
from collections import Counter

import numpy as np

from flow.memory_model import CSV_COLUMNS, Policy, predict, reconcile
from flow.precision_flow import LayerSpec, LayerWeights, forward, output_mse, sample_input, tape_bytes
from numerics.exceptions import MismatchBeyondBound
from numerics.fp8_codec import decode_table, encode_array, get_format
from numerics.quantizer import QuantGeometry, QuantMode, quantization_error
from numerics.tensors import SyntheticKind, SyntheticSpec, generate
from optim.adamw import AdamWConfig, MomentPolicy, SlotPolicy, direction_mse_matrix
from optim.states import simulate_moments
from optim.tasks import QuadraticBowl, run_quantized, run_reference

from .forms import flow_layer_cells, memory_spec
from .reports import Report
from .runner import run_cells
from .training import REGRESSION_RUNS, LayerRegression, train_regression

logger = logging.getLogger(__name__)

# Largest finite and smallest positive magnitudes the minifloat tables must produce
EXPECTED_LIMITS = {
    'E4M3': (448.0, 2.0 ** -9),
    'E5M2': (57344.0, 2.0 ** -16),
}

CODEC_COLUMNS = ('format', 'code', 'value', 'finite', 'round_trip')
ABLATE_COLUMNS = ('first', 'second', 'mean_mse', 'min_mse', 'max_mse', 'wins')
TRAIN_COLUMNS = ('task', 'run', 'policy', 'step', 'loss')
FLOW_COLUMNS = ('study', 'policy', 'granularity', 'group_size', 'seeds', 'mse', 'wins',
                'tape_bytes', 'analytic_bytes', 'overhead_fraction', 'achieved_ratio')

# share of seeds an ordering has to win
ABLATE_MAJORITY = 0.75
GRANULARITY_MAJORITY = 0.9


def _seeds(config):
    return [config['seed'] + index for index in range(config['seeds'])]


# ============================================
# CODEC AUDIT
# ============================================

def _audit_format(tag):
    fmt = get_format(tag)
    table = decode_table(fmt)
    finite = np.isfinite(table)
    back = np.full(256, -1)
    back[finite] = encode_array(table[finite], fmt)
    magnitudes = np.abs(table[finite].astype(np.float64))
    return {
        'table': table,
        'finite': finite,
        'round_trip': finite & (back == np.arange(256)),
        'delta_max': float(magnitudes.max()),
        'delta_min': float(magnitudes[magnitudes > 0].min()),
    }


def codec_audit(config, threads=None):
    report = Report('codec_audit', config, CODEC_COLUMNS)
    for tag, audit in run_cells(_audit_format, config['format'], threads):
        fmt = get_format(tag)
        for code in range(256):
            finite = bool(audit['finite'][code])
            report.add_row(
                format=tag,
                code=f"0x{code:02X}",
                value=float(audit['table'][code]),
                finite=finite,
                round_trip=bool(audit['round_trip'][code]) if finite else '',
            )
        report.summary[tag] = {
            'delta_max': audit['delta_max'],
            'delta_min': audit['delta_min'],
            'dynamic_range': audit['delta_max'] / audit['delta_min'],
            'finite_codes': int(audit['finite'].sum()),
        }

        limits = (audit['delta_max'], audit['delta_min'])
        expected = EXPECTED_LIMITS.get(tag, (fmt.delta_max, fmt.delta_min))
        report.verdict(f"{tag}-limits",
                       limits == expected == (fmt.delta_max, fmt.delta_min))
        report.verdict(f"{tag}-round-trip",
                       bool(np.all(audit['round_trip'][audit['finite']])))
    logger.info("Audited %s", ', '.join(config['format']))
    return report


# ============================================
# OPTIMIZER ABLATION
# ============================================

def optim_ablate(config, threads=None):
    """Mean MSE of m/(sqrt(v)+eps) for every (first, second) moment policy pair"""
    labels = config['policy']
    policies = [MomentPolicy.parse(label, group_size=config['group_size'],
                                   k_max=config['k_max']) for label in labels]

    def cell(seed):
        m, v = simulate_moments(size=config['size'], steps=config['steps'], seed=seed)
        return direction_mse_matrix(policies, policies, m, v, config['eps'])

    seeds = _seeds(config)
    matrices = [matrix for _, matrix in run_cells(cell, seeds, threads)]
    pairs = [(first, second) for first in labels for second in labels]
    errors = {pair: [matrix[pair] for matrix in matrices] for pair in pairs}
    mean = {pair: float(np.mean(values)) for pair, values in errors.items()}
    wins = Counter(min(matrix, key=matrix.get) for matrix in matrices)

    report = Report('optim_ablate', config, ABLATE_COLUMNS, summary={'seeds': seeds})
    for pair in pairs:
        report.add_row(first=pair[0], second=pair[1], mean_mse=mean[pair],
                       min_mse=min(errors[pair]), max_mse=max(errors[pair]), wins=wins[pair])
    _ablation_verdicts(report, labels, mean, wins, len(seeds))
    return report


def _ablation_verdicts(report, labels, mean, wins, seed_count):
    # the orderings are stated for the E4M3/E5M2 grid
    grid = [label for label in labels if label.split('+')[0] in EXPECTED_LIMITS]
    bases = [name for name in EXPECTED_LIMITS if name in labels and f"{name}+Expand" in labels]

    if bases:
        first_side = all(mean[(f"{base}+Expand", other)] < mean[(base, other)]
                         for base in bases for other in grid)
        second_side = all(mean[(other, f"{base}+Expand")] < mean[(other, base)]
                          for base in bases for other in grid)
        report.verdict('expand-reduces-MSE', first_side and second_side)

    if 'E4M3' in labels and 'E5M2' in labels:
        pairs = [('E4M3', 'E5M2')]
        if 'E4M3+Expand' in labels and 'E5M2+Expand' in labels:
            pairs.append(('E4M3+Expand', 'E5M2+Expand'))
        report.verdict('E4M3-first-beats-E5M2-first',
                       all(mean[(e4m3, second)] < mean[(e5m2, second)]
                           for e4m3, e5m2 in pairs for second in grid))

    best = ('DE8+Expand', 'E4M3+Expand')
    if set(best) <= set(labels) and 'FP32' not in labels:
        report.summary['best_pair_wins'] = wins[best]
        report.verdict('DE8+Expand/E4M3+Expand-best',
                       wins[best] >= math.ceil(ABLATE_MAJORITY * seed_count))


# ============================================
# OPTIMIZER TRAINING
# ============================================

def _logged_steps(losses, every):
    last = len(losses) - 1
    return [index for index in range(len(losses)) if index % every == 0 or index == last]


def optim_train(config, threads=None):
    """
    Quadratic bowl: FP32 oracle, the FP32 slot policy and the quantized slot policy.
    Layer regression: the four-way FP8 split of optimizer and activations.
    """
    cfg = AdamWConfig(lr=config['lr'], weight_decay=config['weight_decay'])
    slot_policy = SlotPolicy.parse(config['policy'], group_size=config['group_size'],
                                   k_max=config['k_max'])
    plain = SlotPolicy.parse('FP32')

    cells = []
    if config['task'] in ('quadratic', 'both'):
        bowl = QuadraticBowl(dim=config['dim'], seed=config['seed'])
        cells += [('quadratic', run) for run in ('oracle', 'FP32', 'quantized')]
    if config['task'] in ('regression', 'both'):
        spec = LayerSpec(hidden_size=config['hidden'], seq_len=config['seq_len'],
                         group_size=config['activation_group_size'], policy=Policy.COAT)
        regression = LayerRegression(spec, seed=config['seed'])
        cells += [('regression', run) for run in REGRESSION_RUNS]

    def cell(key):
        task, run = key
        if task == 'quadratic':
            if run == 'oracle':
                return plain.label, run_reference(bowl, cfg, config['steps'])
            policy = plain if run == 'FP32' else slot_policy
            return policy.label, run_quantized(bowl, policy, cfg, config['steps'])
        fp8_optimizer, fp8_activations = REGRESSION_RUNS[run]
        label = slot_policy.label if fp8_optimizer else plain.label
        return label, train_regression(regression, slot_policy, cfg, config['regression_steps'],
                                       fp8_optimizer, fp8_activations)

    results = dict(run_cells(cell, cells, threads))
    report = Report('optim_train', config, TRAIN_COLUMNS)
    for (task, run), (label, trajectory) in results.items():
        for index in _logged_steps(trajectory.losses, config['log_every']):
            report.add_row(task=task, run=run, policy=label, step=index,
                           loss=trajectory.losses[index])
        report.summary[f"{task}/{run}"] = trajectory.final_loss

    if ('quadratic', 'oracle') in results:
        oracle = results[('quadratic', 'oracle')][1]
        fp32 = results[('quadratic', 'FP32')][1]
        quantized = results[('quadratic', 'quantized')][1]
        report.verdict('fp32-matches-oracle', fp32.losses == oracle.losses and all(
            np.array_equal(a, b) for a, b in zip(fp32.params, oracle.params)))
        report.verdict('quantized-within-10pct-of-oracle',
                       abs(quantized.final_loss / oracle.final_loss - 1.0) < 0.1)
    regression_runs = [trajectory for (task, _), (_, trajectory) in results.items()
                       if task == 'regression']
    if regression_runs:
        report.verdict('regression-descends',
                       all(t.final_loss < t.losses[0] for t in regression_runs))
    return report


# ============================================
# PRECISION FLOW
# ============================================

def _granularity_cell(config, group_size):
    """Per-group (1 x G) against per-block (sqrt G x sqrt G) on inputs with outlier tokens"""
    block = math.isqrt(group_size)
    fmt = get_format(config['format'])
    group_errors, block_errors = [], []
    for seed in _seeds(config):
        x = generate(SyntheticSpec(SyntheticKind.ACTIVATION_WITH_OUTLIERS,
                                   (config['seq_len'], config['hidden']),
                                   outlier_fraction=config['outlier_fraction'],
                                   outlier_scale=config['outlier_scale'], seed=seed))
        group_errors.append(quantization_error(x, QuantGeometry.per_group(group_size), fmt,
                                               config['scale_format']))
        block_errors.append(quantization_error(x, QuantGeometry.per_block(block), fmt,
                                               config['scale_format']))
    return group_errors, block_errors


def _granularity_sizes(config):
    sizes = []
    for group_size in config['group_size']:
        block = math.isqrt(group_size)
        if block * block != group_size or config['hidden'] % group_size:
            continue
        if config['seq_len'] % block or config['hidden'] % block:
            continue
        sizes.append(group_size)
    return sizes


def _layer_cell(config, values):
    spec = LayerSpec(**values)
    errors = [output_mse(spec, LayerWeights.random(spec, seed), sample_input(spec, seed),
                         relative=True)
              for seed in _seeds(config)]
    weights = LayerWeights.random(spec, config['seed'])
    _, tape = forward(sample_input(spec, config['seed']), weights, spec)
    measured = tape_bytes(tape)
    if not spec.policy.modelled:
        return errors, measured, None
    try:
        return errors, measured, reconcile(tape.memory_spec(), measured)
    except MismatchBeyondBound as exc:
        logger.warning("%s", exc)
        return errors, measured, False


def flow_sim(config, threads=None):
    report = Report('flow_sim', config, FLOW_COLUMNS)
    seed_count = config['seeds']

    sizes = _granularity_sizes(config)
    studies = run_cells(lambda size: _granularity_cell(config, size), sizes, threads)
    for group_size, (group_errors, block_errors) in studies:
        wins = sum(g <= b for g, b in zip(group_errors, block_errors))
        report.add_row(study='granularity', granularity=QuantMode.PER_GROUP.value,
                       group_size=group_size, seeds=seed_count,
                       mse=float(np.mean(group_errors)), wins=wins)
        report.add_row(study='granularity', granularity=QuantMode.PER_BLOCK.value,
                       group_size=group_size, seeds=seed_count,
                       mse=float(np.mean(block_errors)), wins=seed_count - wins)
        report.summary[f"per-group-wins/G={group_size}"] = wins
    if studies:
        needed = math.ceil(GRANULARITY_MAJORITY * seed_count)
        report.verdict('per-group-beats-per-block',
                       all(sum(g <= b for g, b in zip(*errors)) >= needed
                           for _, errors in studies))

    layer_cells = {(v['policy'], v['nonlinear_granularity'], v['group_size']): v
                   for v in flow_layer_cells(config)}
    reconciled = []
    for key, (errors, measured, outcome) in run_cells(
            lambda key: _layer_cell(config, layer_cells[key]), layer_cells, threads):
        policy, granularity, group_size = key
        row = dict(study='layer', policy=policy, granularity=granularity,
                   group_size=group_size, seeds=seed_count, mse=float(np.mean(errors)),
                   tape_bytes=measured)
        if outcome:
            row.update(analytic_bytes=outcome.analytic_bytes,
                       overhead_fraction=outcome.overhead_fraction,
                       achieved_ratio=outcome.achieved_ratio)
        if outcome is not None:
            reconciled.append(bool(outcome))
        report.add_row(**row)
    if reconciled:
        report.verdict('tape-reconciles', all(reconciled))
    return report


# ============================================
# ACTIVATION MEMORY
# ============================================

def memory_report(config, threads=None):
    report = Report('memory', config, CSV_COLUMNS)
    totals = {}
    for policy in config['policy']:
        rows = predict(memory_spec(config, policy))
        for row in rows:
            report.add_row(**row.as_dict())
        total = rows[-1]
        totals[policy] = total.units
        report.summary[policy] = {'units': str(total.units), 'ratio': str(total.ratio)}
    if Policy.COAT.value in totals and len(totals) > 1:
        coat = totals[Policy.COAT.value]
        report.verdict('COAT-smallest', all(coat < units for policy, units in totals.items()
                                            if policy != Policy.COAT.value))
    return report


SWEEPS = {
    'codec_audit': codec_audit,
    'optim_ablate': optim_ablate,
    'optim_train': optim_train,
    'flow_sim': flow_sim,
    'memory': memory_report,
}
