"""Stateful layer objects wrapping the kernels in :mod:`csn3d.ops`.

Each layer caches what its backward pass needs during ``forward`` and stores
parameter gradients in ``self.grads`` during ``backward``.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .ops import BatchNormSpec, ConvSpec, PoolSpec
from .tensor import DTYPE, Rng, relu_mask


class Layer:
    name = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv3d(Layer):
    def __init__(self, spec: ConvSpec, rng: Rng | None = None, workers: int = 1):
        super().__init__()
        self.spec = spec
        self.workers = workers
        # fan_out counted per group: outputs each input value feeds
        k = spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
        fan_out = (spec.c_out // spec.groups) * k
        if rng is None:
            w = np.zeros(spec.weight_shape, dtype=DTYPE)
        else:
            w = rng.generator.standard_normal(spec.weight_shape) * math.sqrt(2.0 / fan_out)
        self.params["weight"] = w.astype(DTYPE)
        if spec.bias:
            self.params["bias"] = np.zeros(spec.c_out, dtype=DTYPE)
        self._x = None

    def forward(self, x, train):
        self._x = x
        return ops.conv3d_forward(x, self.params["weight"], self.spec, self.params.get("bias"), self.workers)

    def backward(self, grad):
        gx, gw, gb = ops.conv3d_backward(self._x, self.params["weight"], grad, self.spec, self.workers)
        self.grads["weight"] = gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx


class BatchNorm3d(Layer):
    def __init__(self, spec: BatchNormSpec):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.params["gamma"] = np.ones(c, dtype=DTYPE)
        self.params["beta"] = np.zeros(c, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(c, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(c, dtype=DTYPE)
        self._cache = None
        self._train = True

    def forward(self, x, train):
        y, self._cache = ops.batchnorm_forward(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.spec,
            train,
        )
        self._train = train
        return y

    def backward(self, grad):
        gx, gg, gb = ops.batchnorm_backward(grad, self._cache, self._train)
        self.grads["gamma"] = gg
        self.grads["beta"] = gb
        return gx


class ReLU(Layer):
    def forward(self, x, train):
        self._mask = relu_mask(x)
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0).astype(grad.dtype, copy=False)


class MaxPool3d(Layer):
    def __init__(self, spec: PoolSpec):
        super().__init__()
        self.spec = spec

    def forward(self, x, train):
        self._shape = x.shape
        y, self._arg = ops.maxpool3d_forward(x, self.spec)
        return y

    def backward(self, grad):
        return ops.maxpool3d_backward(grad, self._arg, self._shape, self.spec)


class GlobalAvgPool(Layer):
    def forward(self, x, train):
        self._shape = x.shape
        return ops.global_avgpool_forward(x)

    def backward(self, grad):
        return ops.global_avgpool_backward(grad, self._shape)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: Rng | None = None, std: float = 0.01):
        super().__init__()
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.generator.standard_normal((out_features, in_features)) * std
        self.params["weight"] = w.astype(DTYPE)
        self.params["bias"] = np.zeros(out_features, dtype=DTYPE)

    def forward(self, x, train):
        self._x = x
        return ops.linear_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        gx, gw, gb = ops.linear_backward(grad, self._x, self.params["weight"])
        self.grads["weight"] = gw
        self.grads["bias"] = gb
        return gx
