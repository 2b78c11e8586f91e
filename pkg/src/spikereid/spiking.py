"""Leaky integrate-and-fire dynamics, surrogate gradients, and the SEW residual block.

Membrane update per step: v' = v + alpha * (-(v - v_rest) + x) with
alpha = dt / tau_m. A spike fires on the strict crossing v' > v_th and the
membrane resets to v_reset; ties do not fire.

Backward treats membrane state as detached across steps: gradients reach a
step only through that step's input current, scaled by the triangular
surrogate evaluated at the pre-reset membrane candidate.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as tt
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import Tensor


@dataclass(frozen=True)
class LIFParams:
    tau_m: float = 2.0
    dt: float = 1.0
    v_rest: float = 0.0
    v_th: float = 1.0
    v_reset: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha = dt/tau_m must be in (0, 1], got {self.alpha}")
        if not (self.v_th > self.v_reset and self.v_th > self.v_rest):
            raise ValueError("v_th must exceed both v_reset and v_rest")

    @property
    def alpha(self):
        return self.dt / self.tau_m


@dataclass
class LIFState:
    v: np.ndarray


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "triangular"
    a: float = 1.0

    def __post_init__(self):
        if self.kind != "triangular":
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.a <= 0:
            raise ValueError("surrogate width must be positive")


def surrogate_grad(v_pre_threshold, params, spec):
    """Triangular spike pseudo-derivative: max(0, 1 - |v - v_th|/a) / a."""
    is_tensor = isinstance(v_pre_threshold, Tensor)
    v = v_pre_threshold.data if is_tensor else np.asarray(v_pre_threshold)
    g = np.maximum(0.0, 1.0 - np.abs(v - params.v_th) / spec.a) / spec.a
    return Tensor(g) if is_tensor else g


def init_state(params, shape, dtype=np.float64):
    return LIFState(v=np.full(shape, params.v_rest, dtype=dtype))


def lif_step(state, input_current, params):
    """One membrane update; returns ({0,1} spikes, new state)."""
    x = np.asarray(input_current)
    if state.v.shape != x.shape:
        raise ValueError(f"state shape {state.v.shape} != input shape {x.shape}")
    v = state.v + params.alpha * ((params.v_rest - state.v) + x)
    fired = v > params.v_th
    spikes = fired.astype(x.dtype)
    v = np.where(fired, params.v_reset, v)
    return spikes, LIFState(v=v)


def lif_sequence_forward(inputs, params):
    """Run the step recurrence over axis 0 of a (T, ...) array of currents."""
    x = np.asarray(inputs)
    if x.shape[0] < 1:
        raise ValueError("need at least one time step")
    flat = np.ascontiguousarray(x.reshape(x.shape[0], -1))
    spikes, _, _ = kernels.lif_forward(flat, params.alpha, params.v_rest,
                                       params.v_th, params.v_reset)
    return spikes.reshape(x.shape)


# -- gradient-verification tapes ---------------------------------------------
#
# `record_tapes` stores each LIF call's (v_state, v_pre, spikes) trajectory in
# forward order. `replay_linearized` re-runs the network with every spike
# nonlinearity replaced by its first-order expansion around the recorded
# trajectory (frozen membrane states, surrogate slope). Finite differences of
# that relaxed forward equal what the analytic backward computes, which is
# what the gradcheck suite exploits.

_tape_mode = None
_tape_store = None
_tape_cursor = 0


@contextlib.contextmanager
def record_tapes(store):
    global _tape_mode, _tape_store
    _tape_mode, _tape_store = "record", store
    try:
        yield store
    finally:
        _tape_mode, _tape_store = None, None


@contextlib.contextmanager
def replay_linearized(store):
    global _tape_mode, _tape_store, _tape_cursor
    _tape_mode, _tape_store, _tape_cursor = "replay", store, 0
    try:
        yield
        if _tape_cursor != len(store):
            raise RuntimeError("replay consumed fewer tapes than recorded")
    finally:
        _tape_mode, _tape_store, _tape_cursor = None, None, 0


def lif_sequence(x, time_steps, params, surrogate):
    """Autodiff LIF layer over a (T*B, ...) tensor whose axis 0 is time-major."""
    global _tape_cursor
    x = tt.as_tensor(x)
    if x.shape[0] % time_steps != 0:
        raise ValueError(f"axis 0 ({x.shape[0]}) not divisible by T={time_steps}")
    flat = np.ascontiguousarray(x.data.reshape(time_steps, -1))
    alpha = params.alpha

    if _tape_mode == "replay":
        v_state, v_pre_ref, spikes_ref = _tape_store[_tape_cursor]
        _tape_cursor += 1
        v_pre = v_state + alpha * ((params.v_rest - v_state) + flat)
        slope = surrogate_grad(v_pre_ref, params, surrogate)
        out_data = spikes_ref + slope * (v_pre - v_pre_ref)
    else:
        spikes, v_pre, v_state = kernels.lif_forward(
            flat, alpha, params.v_rest, params.v_th, params.v_reset)
        if _tape_mode == "record":
            _tape_store.append((v_state, v_pre, spikes))
        out_data = spikes
        slope = None

    def backward(g):
        s = slope if slope is not None else surrogate_grad(v_pre, params, surrogate)
        x._accumulate((g.reshape(flat.shape) * s * alpha).reshape(x.shape), own=True)

    return tt._make(out_data.reshape(x.shape), (x,), backward)


class LIFLayer(Module):
    """Parameter-free spiking activation; owns no state between forwards."""

    def __init__(self, params=None, surrogate=None):
        super().__init__()
        self.params = params or LIFParams()
        self.surrogate = surrogate or SurrogateSpec()

    def forward(self, x, time_steps):
        return lif_sequence(x, time_steps, self.params, self.surrogate)


class SEWBlock(Module):
    """Spiking residual block: two conv-BN-LIF units combined with the
    identity (or a conv-BN-LIF downsample) by element-wise ADD."""

    def __init__(self, cin, cout, stride=1, rng=None, lif_params=None, surrogate=None):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.lif1 = LIFLayer(lif_params, surrogate)
        self.conv2 = Conv2d(cout, cout, 3, stride=1, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.lif2 = LIFLayer(lif_params, surrogate)
        self.has_downsample = stride != 1 or cin != cout
        if self.has_downsample:
            self.ds_conv = Conv2d(cin, cout, 1, stride=stride, padding=0, rng=rng)
            self.ds_bn = BatchNorm2d(cout)
            self.ds_lif = LIFLayer(lif_params, surrogate)

    def forward(self, x, time_steps):
        f = self.lif1(self.bn1(self.conv1(x)), time_steps)
        f = self.lif2(self.bn2(self.conv2(f)), time_steps)
        if self.has_downsample:
            identity = self.ds_lif(self.ds_bn(self.ds_conv(x)), time_steps)
        else:
            identity = x
        return f + identity


def sew_block_forward(x, block, time_steps):
    """Functional form of SEWBlock.forward."""
    return block(x, time_steps)
