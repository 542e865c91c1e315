# optim/tasks.py
"""Small deterministic objectives for checking optimizer trajectories."""

import logging
from dataclasses import dataclass

import numpy as np

from numerics.tensors import rng_for

from .adamw import OptimizerSlot, reference_adamw_step, step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadraticBowl:
    """
    f(w) = 0.5 * sum(a_i * (w_i - w*_i)^2) with curvatures log-spaced over
    [min_curvature, max_curvature] and a start 2 to 3 units away from w* per coordinate.
    """
    dim: int = 64
    seed: int = 0
    min_curvature: float = 0.1
    max_curvature: float = 10.0

    def __post_init__(self):
        rng = rng_for(self.seed)
        optimum = rng.standard_normal(self.dim)
        offset = rng.uniform(2.0, 3.0, self.dim) * rng.choice([-1.0, 1.0], self.dim)
        curvature = np.geomspace(self.min_curvature, self.max_curvature, self.dim)
        object.__setattr__(self, 'optimum', optimum.astype(np.float32))
        object.__setattr__(self, 'start', (optimum + offset).astype(np.float32))
        object.__setattr__(self, 'curvature', curvature.astype(np.float32))

    def loss(self, w):
        diff = np.asarray(w, dtype=np.float64) - self.optimum
        return float(0.5 * np.sum(self.curvature * diff * diff))

    def grad(self, w):
        return (self.curvature * (np.asarray(w, dtype=np.float32) - self.optimum)).astype(np.float32)


@dataclass
class Trajectory:
    losses: list
    params: list

    @property
    def final_loss(self):
        return self.losses[-1]


def run_reference(task, cfg, steps):
    """FP32 oracle trajectory"""
    w = task.start.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    losses, params = [task.loss(w)], [w]
    for t in range(cfg.step + 1, cfg.step + steps + 1):
        w, m, v = reference_adamw_step(w, task.grad(w), m, v, t, cfg)
        losses.append(task.loss(w))
        params.append(w)
    return Trajectory(losses, params)


def run_quantized(task, policy, cfg, steps):
    """Same objective with the moments stored under `policy`"""
    w = task.start.copy()
    slot = OptimizerSlot.zeros(w.shape, policy, step=cfg.step)
    losses, params = [task.loss(w)], [w]
    for _ in range(steps):
        w, slot = step(w, task.grad(w), slot, cfg)
        losses.append(task.loss(w))
        params.append(w)
    logger.debug("%s: loss %.6g -> %.6g after %d steps",
                 policy.label, losses[0], losses[-1], steps)
    return Trajectory(losses, params)
