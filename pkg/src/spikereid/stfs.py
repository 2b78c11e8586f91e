"""Training-only spatiotemporal descriptor sampling.

Three branches over the deep feature map (T*B, C, H, W):
  temporal  - floor(T/2) time steps drawn without replacement, each pooled
              over space into a C-vector;
  spatial   - one random split point partitions the map into four quadrants,
              each pooled over time and space;
  global    - the full map pooled over time and space (the only descriptor
              used at test time).

Sampling introduces no parameters. Draws are reproducible from
(seed, counter).
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt

# call-count instrumentation: the eval path must never sample
CALL_COUNTS = {"temporal": 0, "spatial": 0}


def reset_call_counts():
    CALL_COUNTS["temporal"] = 0
    CALL_COUNTS["spatial"] = 0


@dataclass
class SamplerSeed:
    """Deterministic draw source; identical (seed, counter) gives identical
    samples."""

    seed: int
    counter: int = 0

    def next_rng(self):
        rng = np.random.default_rng([np.uint64(self.seed), np.uint64(self.counter)])
        self.counter += 1
        return rng


@dataclass
class BranchDescriptors:
    temporal: list
    spatial: list
    global_vec: object


def _as_time_major(y2, time_steps):
    y2 = tt.as_tensor(y2)
    if time_steps is None:
        time_steps = y2.shape[0]
    if y2.shape[0] % time_steps != 0:
        raise ValueError(f"axis 0 ({y2.shape[0]}) not divisible by T={time_steps}")
    b = y2.shape[0] // time_steps
    _, c, h, w = y2.shape
    return y2.reshape(time_steps, b, c, h, w), time_steps


def sample_temporal(y2, rng, time_steps=None):
    """Pool floor(T/2) randomly selected time steps (without replacement)
    into per-step C-vectors of shape (B, C)."""
    y5, t_steps = _as_time_major(y2, time_steps)
    if t_steps < 2:
        raise ValueError("temporal sampling needs at least two time steps")
    CALL_COUNTS["temporal"] += 1
    k = t_steps // 2
    idx = rng.next_rng().choice(t_steps, size=k, replace=False)
    return [y5[int(i)].mean(axis=(-2, -1)) for i in idx]


def sample_spatial(y2, rng, time_steps=None):
    """Pool the four quadrants of a random split point into C-vectors
    (upper-left, upper-right, lower-left, lower-right), averaging over time
    and space. Split points avoid empty patches."""
    y5, t_steps = _as_time_major(y2, time_steps)
    h, w = y5.shape[-2], y5.shape[-1]
    if h < 2 or w < 2:
        raise ValueError("spatial sampling needs at least a 2x2 map")
    CALL_COUNTS["spatial"] += 1
    gen = rng.next_rng()
    hr = int(gen.integers(1, h))
    wr = int(gen.integers(1, w))
    quads = ((slice(0, hr), slice(0, wr)), (slice(0, hr), slice(wr, w)),
             (slice(hr, h), slice(0, wr)), (slice(hr, h), slice(wr, w)))
    return [y5[(slice(None), slice(None), slice(None)) + qd].mean(axis=(0, -2, -1))
            for qd in quads]


def global_descriptor(y2, time_steps=None):
    """Pool the whole map over time and space into one (B, C) vector."""
    y5, _ = _as_time_major(y2, time_steps)
    return y5.mean(axis=(0, -2, -1))
