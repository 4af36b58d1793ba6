"""Stateful layer wrappers around the kernels.

A layer caches what its backward pass needs during ``forward``; one forward
is followed by at most one backward.  Parameter gradients accumulate into
``Tensor.grad`` unless the parameter is frozen.
"""

import numpy as np

from handid.diffcore import kernels
from handid.diffcore.tensor import DTYPE, Tensor, check_finite


class Module:
    training = True

    def parameters(self):
        return []

    def named_parameters(self, prefix=""):
        out = []
        for p in self.parameters():
            out.append((f"{prefix}{p.name}", p))
        return out

    def buffers(self):
        """Non-learnable state that still belongs in a checkpoint."""
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def children(self):
        return []

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _init(rng, shape, fan_in, dtype=DTYPE):
    w = rng.standard_normal(shape, dtype=np.float32)
    w *= np.float32(np.sqrt(2.0 / fan_in))
    return w.astype(dtype, copy=False)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, name="fc"):
        self.weight = Tensor(_init(rng, (d_in, d_out), d_in), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(d_out), name=f"{name}.bias")
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return check_finite(kernels.fc_forward(x, self.weight.data, self.bias.data), self.weight.name)

    def backward(self, dy, need_input_grad=True):
        dx, dw, db = kernels.fc_backward(dy, self._x, self.weight.data)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx if need_input_grad else None


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, bias=True, name="conv"):
        self.weight = Tensor(_init(rng, (c_out, c_in, k, k), c_in * k * k), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out), name=f"{name}.bias") if bias else None
        self.stride = stride
        self.padding = padding
        self._cache = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        b = self.bias.data if self.bias is not None else None
        out, cols = kernels.conv2d_forward(x, self.weight.data, b, self.stride, self.padding)
        self._cache = (x.shape, cols)
        return check_finite(out, self.weight.name)

    def backward(self, dy, need_input_grad=True):
        x_shape, cols = self._cache
        dx, dk, db = kernels.conv2d_backward(
            dy, x_shape, cols, self.weight.data, self.stride, self.padding, need_input_grad
        )
        self.weight.accumulate(dk)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dx


class BatchNorm(Module):
    def __init__(self, dim, name="bn", eps=kernels.BN_EPS, momentum=kernels.BN_MOMENTUM):
        self.gamma = Tensor(np.ones(dim), name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(dim), name=f"{name}.beta")
        self.running_mean = np.zeros(dim, dtype=DTYPE)
        self.running_var = np.ones(dim, dtype=DTYPE)
        self.eps = eps
        self.momentum = momentum
        self.name = name
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]

    def forward(self, x):
        y, self._cache = kernels.batch_norm_forward(
            x, self.gamma.data, self.beta.data, self.running_mean, self.running_var,
            train=self.training, eps=self.eps, momentum=self.momentum,
        )
        return check_finite(y, self.name)

    def backward(self, dy, need_input_grad=True):
        dx, dg, db = kernels.batch_norm_backward(dy, self.gamma.data, self._cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class Activation(Module):
    def __init__(self, kind):
        self.kind = kind
        self._y = None

    def forward(self, x):
        self._y = kernels.activation_forward(x, self.kind)
        return self._y

    def backward(self, dy, need_input_grad=True):
        return kernels.activation_backward(dy, self._y, self.kind)


class Flatten(Module):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, need_input_grad=True):
        return dy.reshape(self._shape)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy, need_input_grad=True):
        # stop as soon as nothing upstream needs a gradient
        last = len(self.layers) - 1
        first_needed = 0
        if not need_input_grad:
            first_needed = next(
                (i for i, layer in enumerate(self.layers)
                 if any(p.requires_grad for p in layer.parameters())),
                last + 1,
            )
        for i in range(last, first_needed - 1, -1):
            dy = self.layers[i].backward(dy, need_input_grad=need_input_grad or i > first_needed)
        return dy if need_input_grad else None
