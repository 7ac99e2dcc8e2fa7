"""Differentiable compute kernels and SGD, sized for desk-scale training.

All values are float32 numpy arrays in NCHW layout. Each op comes as a
forward returning (output, ctx) and a matching backward that consumes the
ctx and the upstream gradient; layer objects in `amr.layers` wire these
into networks. Convolution delegates its three inner products (forward,
input gradient, weight gradient) to torch's functional kernels with
autograd disabled; everything else is plain numpy. Reduction order is
fixed by the backing BLAS build, so repeated runs on one machine produce
bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as _F

torch.set_grad_enabled(False)


class GradientMissing(RuntimeError):
    """A trainable parameter had no gradient at optimizer-step time."""


@dataclass
class Tensor:
    """Named parameter value with optional gradient and momentum buffers."""

    data: np.ndarray
    trainable: bool = True
    grad: np.ndarray | None = None
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def add_grad(self, g: np.ndarray) -> None:
        g = g.astype(np.float32, copy=False)
        if g.shape != self.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class ParamSet:
    """Insertion-ordered collection of named Tensors.

    Frozen (non-trainable) entries are never touched by `sgd_step`;
    normalization running statistics live here as non-trainable entries so
    they travel with checkpoints.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, trainable=trainable)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def num_params(self, trainable_only: bool = True) -> int:
        return sum(
            t.data.size for t in self._tensors.values() if t.trainable or not trainable_only
        )

    def freeze(self) -> None:
        for t in self._tensors.values():
            t.trainable = False

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state_bytes(self) -> bytes:
        """All values as little-endian float32, in name order (for hashing)."""
        return b"".join(
            np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in self._tensors.values()
        )


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _as_torch(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


# ---------------------------------------------------------------------------
# convolution


def _check_conv_args(x, w, b, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input C={x.shape[1]}, weight C={w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    k = w.shape[2]
    oh = (x.shape[2] + 2 * padding - k) // stride + 1
    ow = (x.shape[3] + 2 * padding - w.shape[3]) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv output would be empty for input {x.shape}, kernel {w.shape}")


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           stride: int = 1, padding: int = 0):
    """Cross-correlation of NCHW `x` with OIkk `w`; returns (y, ctx)."""
    _check_conv_args(x, w, b, stride, padding)
    xt = _as_torch(x)
    y = _F.conv2d(xt, _as_torch(w), _as_torch(b) if b is not None else None,
                  stride=stride, padding=padding)
    ctx = (xt, x.shape, w, b is not None, stride, padding)
    return y.numpy(), ctx


def conv2d_backward(ctx, dy: np.ndarray):
    """Gradients (dx, dw, db) for conv2d; db is None when bias was absent."""
    xt, x_shape, w, has_bias, stride, padding = ctx
    dyt = _as_torch(dy)
    wt = _as_torch(w)
    dx = torch.nn.grad.conv2d_input(x_shape, wt, dyt, stride=stride, padding=padding)
    dw = torch.nn.grad.conv2d_weight(xt, w.shape, dyt, stride=stride, padding=padding)
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return dx.numpy(), dw.numpy(), db


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization of NCHW input; returns (y, ctx).

    Train mode normalizes with batch statistics and updates the running
    buffers in place with the given momentum; eval mode uses the running
    buffers untouched. Biased variance throughout.
    """
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"{name} shape {arr.shape} != ({c},)")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    ctx = (xhat, inv_std, gamma, training)
    return y.astype(np.float32, copy=False), ctx


def batchnorm2d_backward(ctx, dy: np.ndarray):
    xhat, inv_std, gamma, training = ctx
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not training:
        dx = dxhat * inv_std[None, :, None, None]
        return dx.astype(np.float32, copy=False), dgamma, dbeta
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dx.astype(np.float32, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise / pooling / linear


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, np.float32(0.0)), mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, np.float32(0.0))


def maxpool2d(x: np.ndarray, kernel: int, stride: int):
    """Max pooling; ties break toward the lowest flat source index."""
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"pool output would be empty for input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(b, c, oh, ow, kernel * kernel)
    arg = win.argmax(axis=-1)  # first max = lowest (dy, dx) = lowest flat index
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    ctx = (x.shape, kernel, stride, arg)
    return np.ascontiguousarray(y), ctx


def maxpool2d_backward(ctx, dy: np.ndarray) -> np.ndarray:
    (b, c, h, w), kernel, stride, arg = ctx
    oh, ow = dy.shape[2], dy.shape[3]
    dx = np.zeros(b * c * h * w, dtype=np.float32)
    ky, kx = np.divmod(arg, kernel)
    oy = np.arange(oh)[None, None, :, None] * stride
    ox = np.arange(ow)[None, None, None, :] * stride
    rows = oy + ky
    cols = ox + kx
    base = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    np.add.at(dx, (base + rows * w + cols).ravel(), dy.ravel())
    return dx.reshape(b, c, h, w)


def global_avg_pool(x: np.ndarray):
    """NCHW -> NC mean over the spatial extent."""
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(x_shape, dy: np.ndarray) -> np.ndarray:
    b, c, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None] / np.float32(h * w), x_shape).astype(
        np.float32, copy=False
    ).copy()


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """x (N, Din) with w (Dout, Din); returns (y, ctx)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(ctx, dy: np.ndarray):
    x, w, has_bias = ctx
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean NLL of the softmax with log-sum-exp stabilization.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = exp / denom
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """One SGD-with-momentum update over all trainable entries.

    v <- momentum * v + grad + weight_decay * w ; w <- w - lr * v.
    Frozen entries are untouched. All gradients are cleared afterwards.
    """
    for name, t in params.items():
        if not t.trainable:
            t.grad = None
            continue
        if t.grad is None:
            raise GradientMissing(f"no gradient for trainable parameter {name!r}")
        v = t.grad if weight_decay == 0.0 else t.grad + np.float32(weight_decay) * t.data
        if momentum != 0.0:
            if t.velocity is None:
                t.velocity = np.zeros_like(t.data)
            t.velocity *= np.float32(momentum)
            t.velocity += v
            v = t.velocity
        t.data -= np.float32(lr) * v
        t.grad = None
