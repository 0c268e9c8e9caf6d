"""Stateful layers wrapping the kernels.

A layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K

ROLES = ("depthwise-weight", "pointwise-weight", "bn-gamma", "bn-beta", "fc-weight", "fc-bias")


@dataclass(eq=False)
class Param:
    value: np.ndarray
    role: str
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown parameter role {self.role!r}")
        if self.role == "depthwise-weight" and (self.value.ndim != 4 or self.value.shape[1] != 1):
            raise ValueError(f"depthwise weight must be (c, 1, k, k), got {self.value.shape}")
        if self.role == "pointwise-weight" and (self.value.ndim != 4 or self.value.shape[2:] != (1, 1)):
            raise ValueError(f"pointwise weight must be (c_out, c_in, 1, 1), got {self.value.shape}")
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)  # He-uniform: keeps ReLU activation variance stable
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container protocol: parameters, buffers, train/eval switching."""

    training = True

    def children(self) -> list["Module"]:
        return []

    def own_params(self) -> list[tuple[str, Param]]:
        return []

    def own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def named_parameters(self, prefix: str = ""):
        for name, p in self.own_params():
            yield prefix + name, p
        for i, child in enumerate(self.children()):
            yield from child.named_parameters(f"{prefix}{child_name(child, i)}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self.own_buffers():
            yield prefix + name, b
        for i, child in enumerate(self.children()):
            yield from child.named_buffers(f"{prefix}{child_name(child, i)}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


def child_name(child: Module, index: int) -> str:
    return getattr(child, "name", None) or f"{type(child).__name__.lower()}{index}"


class DepthwiseConv(Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int = 1, rng=None, dtype=np.float64, name=None):
        self.geom = K.ConvGeometry(kernel_size, dilation)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(
            fan_in_uniform(rng, (channels, 1, kernel_size, kernel_size), kernel_size * kernel_size, dtype),
            "depthwise-weight",
        )
        self.name = name
        self._cache = None

    def own_params(self):
        return [("weight", self.weight)]

    def forward(self, x):
        out, self._cache = K.conv2d_depthwise(x, self.weight.value, self.geom)
        return out

    def backward(self, g):
        dx, dw = K.conv2d_depthwise_backward(g, self._cache)
        self.weight.grad += dw
        return dx


class PointwiseConv(Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = False, rng=None, dtype=np.float64, name=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(fan_in_uniform(rng, (c_out, c_in, 1, 1), c_in, dtype), "pointwise-weight")
        self.bias = Param(np.zeros(c_out, dtype=dtype), "fc-bias") if bias else None
        self.name = name
        self._cache = None

    def own_params(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        out, self._cache = K.conv2d_pointwise(x, self.weight.value, b)
        return out

    def backward(self, g):
        dx, dw, db = K.conv2d_pointwise_backward(g, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64, name=None):
        self.gamma = Param(np.ones(channels, dtype=dtype), "bn-gamma")
        self.beta = Param(np.zeros(channels, dtype=dtype), "bn-beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.name = name
        self._cache = None

    def own_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x):
        out, self._cache = K.batchnorm(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, self.training
        )
        return out

    def backward(self, g):
        dx, dgamma, dbeta = K.batchnorm_backward(g, self._cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ReLU(Module):
    def forward(self, x):
        out, self._mask = K.relu(x)
        return out

    def backward(self, g):
        return K.relu_backward(g, self._mask)


class Sigmoid(Module):
    def forward(self, x):
        out, self._out = K.sigmoid(x)
        return out

    def backward(self, g):
        return K.sigmoid_backward(g, self._out)


class MaxPool2(Module):
    def forward(self, x):
        out, self._cache = K.maxpool2(x)
        return out

    def backward(self, g):
        return K.maxpool2_backward(g, self._cache)


class Upsample2(Module):
    def forward(self, x):
        out, self._cache = K.upsample_bilinear2(x)
        return out

    def backward(self, g):
        return K.upsample_bilinear2_backward(g, self._cache)


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, g):
        return g


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, dtype=np.float64, name=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(fan_in_uniform(rng, (d_out, d_in), d_in, dtype), "fc-weight")
        self.bias = Param(np.zeros(d_out, dtype=dtype), "fc-bias")
        self.name = name
        self._cache = None

    def own_params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        out, self._cache = K.linear(x, self.weight.value, self.bias.value)
        return out

    def backward(self, g):
        dx, dw, db = K.linear_backward(g, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Sequential(Module):
    def __init__(self, *layers, name=None):
        self.layers = list(layers)
        self.name = name

    def children(self):
        return self.layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g
