"""Small module system: parameter registration, train/eval mode, conv/BN/linear."""

import numpy as np

from . import tensor as tt
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = name
        object.__setattr__(self, name, np.asarray(array))

    def set_buffer(self, name, array):
        if name not in self._buffers:
            raise KeyError(f"unknown buffer {name!r}")
        object.__setattr__(self, name, np.asarray(array))

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield (prefix + name, getattr(self, name))
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, mode=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """Bias-free 2-D convolution (cross-correlation); BN supplies the shift."""

    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = cin * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin, kernel, kernel)))

    def forward(self, x):
        return tt.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel BN over (batch*time, H, W); running stats track training batches.

    beta starts positive so downstream LIF units sit near threshold at
    initialization; with a zero shift most of a fresh spiking net never
    fires and neither gradients nor descriptors carry signal.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, beta_init=1.0):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.full(channels, float(beta_init)))
        dt = tt.get_default_dtype()
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x):
        if self.training:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            out, mu, var = tt.batch_norm(x, self.gamma, self.beta, axes, eps=self.eps)
            n = x.size // self.channels
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            self.set_buffer("running_mean", (1 - m) * self.running_mean + m * mu)
            self.set_buffer("running_var", (1 - m) * self.running_var + m * unbiased)
            return out
        return tt.batch_norm_eval(x, self.gamma, self.beta,
                                  self.running_mean, self.running_var, eps=self.eps)


class Linear(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = 1.0 / np.sqrt(cin)
        self.weight = Parameter(rng.normal(0.0, std, size=(cin, cout)))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return tt.matmul(x, self.weight) + self.bias
