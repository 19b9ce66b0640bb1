"""Stateful layers over :mod:`pvrct.nn.functional` with an explicit tape.

Each layer keeps exactly what its backward needs from the most recent
forward call. There is no graph engine: containers call ``backward`` on
their children in reverse order. Gradients accumulate into
``Parameter.grad`` until :meth:`Module.zero_grad`.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F


class Parameter:
    """A value tensor paired with a same-shaped gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


class Module:
    """Base class: parameter/buffer registry and train/eval flag."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def add_param(self, name, value):
        p = Parameter(value)
        self._params[name] = p
        return p

    def add_buffer(self, name, value):
        self._buffers[name] = np.ascontiguousarray(value)

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, self, name
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for _, owner, name in self.named_buffers():
            owner._buffers[name] = owner._buffers[name].astype(dtype)
        return self

    def __call__(self, x):
        return self.forward(x)


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """He-uniform init for ReLU networks: U(-b, b), b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Shape:
    """Stand-in for a saved input when only its shape is needed."""

    def __init__(self, shape):
        self.shape = shape


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=True,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding is None:
            padding = kernel // 2
        self.stride = int(stride)
        self.padding = int(padding)
        self.kernel = int(kernel)
        fan_in = in_ch * kernel ** 3
        self.weight = self.add_param(
            "weight", kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel), fan_in, dtype)
        )
        self.bias = None
        if bias:
            b = 1.0 / math.sqrt(fan_in)
            self.bias = self.add_param("bias", rng.uniform(-b, b, size=out_ch).astype(dtype))
        self.need_input_grad = True
        # explain-mode hook: keep output activation and its gradient
        self.retain = False
        self.retained_output = None
        self.retained_grad = None
        self._cols = None

    def forward(self, x):
        self._x_shape = x.shape
        b = self.bias.value if self.bias is not None else None
        y, self._cols = F.conv3d_forward(
            x, self.weight.value, b, self.stride, self.padding, return_cols=True
        )
        if self.retain:
            self.retained_output = y
        return y

    def backward(self, grad_out):
        if self.retain:
            self.retained_grad = grad_out
        gx, gw, gb = F.conv3d_backward(
            grad_out, _Shape(self._x_shape), self.weight.value, self.stride, self.padding,
            has_bias=self.bias is not None, need_input_grad=self.need_input_grad,
            cols=self._cols,
        )
        self._cols = None
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class BatchNorm3d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_var", np.ones(channels, dtype=dtype))
        self._cache = None
        self._cache_train = True

    @property
    def running_mean(self):
        return self._buffers["running_mean"]

    @property
    def running_var(self):
        return self._buffers["running_var"]

    def forward(self, x):
        y, self._cache = F.batchnorm3d_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )
        self._cache_train = self.training
        return y

    def backward(self, grad_out):
        gx, gg, gb = F.batchnorm3d_backward(grad_out, self._cache, self.gamma.value, self._cache_train)
        if gg is not None:
            self.gamma.grad += gg.astype(self.gamma.grad.dtype, copy=False)
        self.beta.grad += gb.astype(self.beta.grad.dtype, copy=False)
        return gx


class ReLU(Module):
    def forward(self, x):
        self._x = x
        return F.relu_forward(x)

    def backward(self, grad_out):
        return F.relu_backward(grad_out, self._x)


class MaxPool3d(Module):
    def __init__(self, kernel=2, stride=2):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x):
        self._shape = x.shape
        y, self._argmax = F.maxpool3d_forward(x, self.kernel, self.stride)
        return y

    def backward(self, grad_out):
        return F.maxpool3d_backward(grad_out, self._argmax, self._shape, self.kernel, self.stride)


class AvgPool3d(Module):
    def __init__(self, kernel=2):
        super().__init__()
        self.kernel = kernel

    def forward(self, x):
        return F.avgpool3d_forward(x, self.kernel)

    def backward(self, grad_out):
        return F.avgpool3d_backward(grad_out, self.kernel)


class GlobalAvgPool(Module):
    def forward(self, x):
        self._shape = x.shape
        return F.global_avg_pool_forward(x)

    def backward(self, grad_out):
        return F.global_avg_pool_backward(grad_out, self._shape)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = self.add_param(
            "weight", kaiming_uniform(rng, (out_features, in_features), in_features, dtype)
        )
        b = 1.0 / math.sqrt(in_features)
        self.bias = self.add_param("bias", rng.uniform(-b, b, size=out_features).astype(dtype))

    def forward(self, x):
        self._x = x
        return F.linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = F.linear_backward(grad_out, self._x, self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = []
        for i, layer in enumerate(layers):
            name, mod = layer if isinstance(layer, tuple) else (str(i), layer)
            self.add_child(name, mod)
            self.layers.append(mod)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out
