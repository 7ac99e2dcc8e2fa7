"""Layer objects wiring the kernel functions into trainable networks.

Each layer registers its parameters in a shared ParamSet under a dotted
prefix, caches its forward context, and implements an exact backward that
accumulates parameter gradients and returns the input gradient. Models are
fixed layer sequences (plus residual blocks), so no general tape is needed.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .nn import ParamSet, he_uniform


class Conv2d:
    def __init__(self, params: ParamSet, prefix: str, in_ch: int, out_ch: int,
                 kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng: np.random.Generator | None = None):
        fan_in = in_ch * kernel * kernel
        self.w = params.add(f"{prefix}.w", he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.b = params.add(f"{prefix}.b", np.zeros(out_ch, dtype=np.float32)) if bias else None
        self.stride = stride
        self.padding = padding
        self._ctx = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y, self._ctx = nn.conv2d(x, self.w.data, None if self.b is None else self.b.data,
                                 stride=self.stride, padding=self.padding)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = nn.conv2d_backward(self._ctx, dy)
        self.w.add_grad(dw)
        if self.b is not None:
            self.b.add_grad(db)
        return dx


class BatchNorm2d:
    def __init__(self, params: ParamSet, prefix: str, ch: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = params.add(f"{prefix}.gamma", np.ones(ch, dtype=np.float32))
        self.beta = params.add(f"{prefix}.beta", np.zeros(ch, dtype=np.float32))
        self.running_mean = params.add(f"{prefix}.running_mean",
                                       np.zeros(ch, dtype=np.float32), trainable=False)
        self.running_var = params.add(f"{prefix}.running_var",
                                      np.ones(ch, dtype=np.float32), trainable=False)
        self.momentum = momentum
        self.eps = eps
        self._ctx = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y, self._ctx = nn.batchnorm2d(x, self.gamma.data, self.beta.data,
                                      self.running_mean.data, self.running_var.data,
                                      training=train, momentum=self.momentum, eps=self.eps)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dgamma, dbeta = nn.batchnorm2d_backward(self._ctx, dy)
        self.gamma.add_grad(dgamma)
        self.beta.add_grad(dbeta)
        return dx


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y, self._mask = nn.relu(x)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return nn.relu_backward(self._mask, dy)


class MaxPool2d:
    def __init__(self, kernel: int, stride: int, padding: int = 0):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self._ctx = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if self.padding:
            x = np.pad(x, ((0, 0), (0, 0), (self.padding,) * 2, (self.padding,) * 2),
                       constant_values=-np.inf)
        y, self._ctx = nn.maxpool2d(x, self.kernel, self.stride)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx = nn.maxpool2d_backward(self._ctx, dy)
        if self.padding:
            p = self.padding
            dx = dx[:, :, p:-p, p:-p]
        return dx


class GlobalAvgPool:
    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y, self._shape = nn.global_avg_pool(x)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return nn.global_avg_pool_backward(self._shape, dy)


class Linear:
    def __init__(self, params: ParamSet, prefix: str, in_f: int, out_f: int,
                 rng: np.random.Generator | None = None):
        self.w = params.add(f"{prefix}.w", he_uniform(rng, (out_f, in_f), in_f))
        self.b = params.add(f"{prefix}.b", np.zeros(out_f, dtype=np.float32))
        self._ctx = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y, self._ctx = nn.linear(x, self.w.data, self.b.data)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = nn.linear_backward(self._ctx, dy)
        self.w.add_grad(dw)
        self.b.add_grad(db)
        return dx


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class BasicBlock:
    """Classic post-activation residual block (two 3x3 convs).

    A projection shortcut (1x1 conv + norm) is inserted when the stride or
    channel count changes.
    """

    def __init__(self, params: ParamSet, prefix: str, in_ch: int, out_ch: int,
                 stride: int = 1, rng: np.random.Generator | None = None):
        self.conv1 = Conv2d(params, f"{prefix}.conv1", in_ch, out_ch, 3,
                            stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(params, f"{prefix}.bn1", out_ch)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(params, f"{prefix}.conv2", out_ch, out_ch, 3,
                            stride=1, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(params, f"{prefix}.bn2", out_ch)
        self.relu_out = ReLU()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Sequential(
                Conv2d(params, f"{prefix}.down", in_ch, out_ch, 1, stride=stride, rng=rng),
                BatchNorm2d(params, f"{prefix}.down_bn", out_ch),
            )
        else:
            self.shortcut = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        s = x if self.shortcut is None else self.shortcut.forward(x, train)
        return self.relu_out.forward(h + s, train)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dsum = self.relu_out.backward(dy)
        dh = self.bn2.backward(dsum)
        dh = self.conv2.backward(dh)
        dh = self.relu1.backward(dh)
        dh = self.bn1.backward(dh)
        dx = self.conv1.backward(dh)
        ds = dsum if self.shortcut is None else self.shortcut.backward(dsum)
        return dx + ds
