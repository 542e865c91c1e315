# experiments/training.py
"""
Layer regression: fit one decoder layer to the FP32 outputs of a fixed target layer.

The fit runs under the four-way split of where FP8 is used: nowhere, only in the
optimizer states, only in the activation flow, or both. Every parameter of the layer
gets its own optimizer slot.
"""

import logging
from dataclasses import dataclass

import numpy as np

from flow.memory_model import Policy
from flow.precision_flow import LINEAR_WEIGHTS, LayerSpec, LayerWeights, backward, forward, sample_input
from optim.adamw import OptimizerSlot, SlotPolicy, step
from optim.tasks import Trajectory

logger = logging.getLogger(__name__)

PARAMETERS = LINEAR_WEIGHTS + ('norm1', 'norm2')

# name -> (FP8 optimizer states, FP8 activation flow)
REGRESSION_RUNS = {
    'FP32': (False, False),
    'FP8-optimizer': (True, False),
    'FP8-activation': (False, True),
    'FP8-both': (True, True),
}


@dataclass(frozen=True)
class LayerRegression:
    """
    Target outputs come from a random layer drawn with `seed`; the fitted layer starts
    from an independent draw with seed + 1, and the inputs use seed + 2.
    """
    spec: LayerSpec
    seed: int = 0

    def __post_init__(self):
        reference = self.spec.replace(policy=Policy.FP32)
        target_weights = LayerWeights.random(reference, self.seed)
        inputs = sample_input(reference, self.seed + 2)
        targets, _ = forward(inputs, target_weights, reference)
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'targets', targets.astype(np.float32))
        object.__setattr__(self, 'start', LayerWeights.random(reference, self.seed + 1))

    def loss(self, y):
        diff = np.asarray(y, dtype=np.float64) - self.targets
        return float(0.5 * np.mean(diff * diff))

    def output_grad(self, y):
        return ((np.asarray(y, dtype=np.float32) - self.targets) / np.float32(self.targets.size)).astype(np.float32)


def train_regression(task, slot_policy, cfg, steps, fp8_optimizer=True, fp8_activations=True):
    """
    Runs `steps` AdamW updates and returns the loss before each update plus the final
    loss. Without FP8 optimizer states every slot is FP32; without FP8 activations the
    layer runs the FP32 flow.
    """
    spec = task.spec.replace(policy=Policy.COAT if fp8_activations else Policy.FP32)
    policy = slot_policy if fp8_optimizer else SlotPolicy.parse('FP32')
    weights = task.start.copy()
    slots = {name: OptimizerSlot.zeros(getattr(weights, name).shape, policy, step=cfg.step)
             for name in PARAMETERS}

    losses = []
    for _ in range(steps):
        y, tape = forward(task.inputs, weights, spec)
        losses.append(task.loss(y))
        _, grads = backward(task.output_grad(y), tape, weights, spec)
        for name in PARAMETERS:
            updated, slots[name] = step(getattr(weights, name), grads[name], slots[name], cfg)
            setattr(weights, name, updated)
    y, _ = forward(task.inputs, weights, spec)
    losses.append(task.loss(y))

    logger.debug("Regression %s with %s activations: loss %.6g -> %.6g",
                 policy.label, spec.policy.value, losses[0], losses[-1])
    return Trajectory(losses, [])
