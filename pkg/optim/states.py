# optim/states.py
"""
Synthetic AdamW moments for the quantization ablations.

Gradients come from the optimizer-like generator (mostly Gaussian with sparse
outliers), scaled per coordinate by a log-normal spread so neighbouring coordinates
see different gradient magnitudes. Running the EMA recurrences over them gives (m, v)
pairs whose per-group ranges look like trained optimizer states: m is signed and
spans a wide range, v is positive and narrow.
"""

import logging

import numpy as np

from numerics.tensors import SyntheticKind, SyntheticSpec, generate, rng_for

logger = logging.getLogger(__name__)


def simulate_moments(size=16384, steps=200, seed=0, beta1=0.9, beta2=0.999,
                     outlier_fraction=0.01, outlier_scale=4.0, sigma=1e-3, spread=0.15):
    """Returns float32 (m, v) after `steps` EMA updates; a pure function of its arguments"""
    rng = rng_for(seed)
    coordinate_scale = sigma * np.exp(spread * rng.standard_normal(size))
    step_seeds = np.random.SeedSequence(int(seed)).generate_state(steps, dtype=np.uint64)

    m = np.zeros(size)
    v = np.zeros(size)
    for step_seed in step_seeds:
        spec = SyntheticSpec(SyntheticKind.OPTIMIZER_LIKE, size,
                             outlier_fraction=outlier_fraction,
                             outlier_scale=outlier_scale,
                             seed=int(step_seed))
        g = generate(spec).astype(np.float64) * coordinate_scale
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g

    logger.debug("Simulated moments: size=%d steps=%d seed=%d", size, steps, seed)
    return m.astype(np.float32), v.astype(np.float32)
