"""Minimal module system, layers, optimizer and weight averaging."""

from __future__ import annotations

import math

import numpy as np

from seqlidar import functional as fn
from seqlidar.errors import DimensionError
from seqlidar.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Circular-azimuth convolution layer (see :func:`functional.conv2d_circular`)."""

    def __init__(self, c_in, c_out, kernel=3, stride=1, rng=None, zero=False, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        shape = (c_out, c_in, kernel, kernel)
        w = np.zeros(shape, dtype) if zero else _uniform(rng, shape, c_in * kernel * kernel, dtype)
        self.weight = Parameter(w, dtype)
        self.bias = Parameter(np.zeros(c_out), dtype)
        self.stride = stride

    def forward(self, x):
        return fn.conv2d_circular(x, self.weight, self.bias, self.stride)


class TemporalConv(Module):
    """(3,1,1) convolution over the frame axis of [B, F, C, H, W] tensors."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, 3, 1, 1), 3 * c_in, dtype), dtype)
        self.bias = Parameter(np.zeros(c_out), dtype)

    def forward(self, x):
        return fn.temporal_conv(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, zero=False, bias=True, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        w = np.zeros((n_out, n_in), dtype) if zero else _uniform(rng, (n_out, n_in), n_in, dtype)
        self.weight = Parameter(w, dtype)
        self.bias = Parameter(np.zeros(n_out), dtype) if bias else None

    def forward(self, x):
        return fn.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels, groups=8, dtype=np.float32):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.weight = Parameter(np.ones(channels), dtype)
        self.bias = Parameter(np.zeros(channels), dtype)

    def forward(self, x):
        return fn.group_norm(x, self.groups, self.weight, self.bias)


class Adam:
    """Adaptive-moment optimizer; state is plain arrays so it can be checkpointed."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, grad_clip=1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.grad_clip:
            total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if total > self.grad_clip:
                grads = [g * (self.grad_clip / total) for g in grads]
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=p.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.dtype) for a, p in zip(state["v"], self.params)]


class EMA:
    """Exponential moving average of model weights."""

    def __init__(self, model, decay=0.999):
        self.decay = decay
        self.shadow = model.state_dict()

    def update(self, model):
        d = self.decay
        for name, p in model.named_parameters():
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p.data

    def state_dict(self):
        return {k: v.copy() for k, v in self.shadow.items()}
