"""Layer containers with named parameters, buffers and train/eval mode."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def __call__(self, *args):
        return self.forward(*args)


def kaiming(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel=3, padding=None, dilation=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.kernel, self.dilation = cin, cout, kernel, dilation
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        fan_in = cin * kernel ** 3
        self.weight = Tensor(kaiming(rng, (cout, cin, kernel, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.padding, self.dilation)

    def spec(self):
        return (f"conv3d cin={self.cin} cout={self.cout} kernel={self.kernel} "
                f"padding={self.padding} dilation={self.dilation} stride=1")


class ConvTranspose3d(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        self.weight = Tensor(kaiming(rng, (cin, cout, 2, 2, 2), cin), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x):
        return F.conv_transpose3d(x, self.weight, self.bias)

    def spec(self):
        return f"transposed_conv3d cin={self.cin} cout={self.cout} kernel=2 stride=2"


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return F.batch_norm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)

    def spec(self):
        return f"batchnorm3d channels={self.channels} momentum={self.momentum} eps={self.eps}"


class ConvBlock(Module):
    """conv3d (3x3x3) + batchnorm + ReLU."""

    def __init__(self, cin, cout, dilation=1, rng=None):
        super().__init__()
        self.conv = Conv3d(cin, cout, 3, dilation=dilation, rng=rng)
        self.bn = BatchNorm3d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class UpBlock(Module):
    """Transposed conv (x2) + batchnorm + ReLU."""

    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.up = ConvTranspose3d(cin, cout, rng=rng)
        self.bn = BatchNorm3d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.up(x)))


def layer_specs(model):
    """One descriptive line per layer, in declaration order."""
    return [m.spec() for m in model.modules() if hasattr(m, "spec")]
