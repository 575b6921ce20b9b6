"""Layer vocabulary: convolution, transposed convolution, max pooling,
batch normalization and the activations the networks use.

Convolutions are computed tap-by-tap (one matmul per kernel position),
which keeps memory flat and is fast enough at desk scale.
"""
from __future__ import annotations

import numpy as np

from .tensor import (NumericError, ShapeError, Tensor, check_finite,
                     record_op)


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def kaiming_uniform(shape, fan_in, rng, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2D:
    """2D convolution with zero padding. Weight (out,in,kh,kw), bias (1,out,1,1)."""

    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=(1, 1),
                 padding=(0, 0), rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel
        if rng is None:
            rng = np.random.default_rng(0)
        w = kaiming_uniform((out_channels, in_channels, kh, kw),
                            in_channels * kh * kw, rng, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=dtype),
                           requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_size(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if (h + 2 * ph - kh) % sh or (w + 2 * pw - kw) % sw:
            raise ShapeError(
                f"input {h}x{w} is not divisible for kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}")
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"padded input smaller than kernel: {h}x{w}")
        return oh, ow

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        oh, ow = self.out_size(h, w)
        xpad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        wd = self.weight.data
        y = np.zeros((n, self.out_channels, oh, ow), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                patch = xpad[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw]
                y += np.tensordot(patch, wd[:, :, u, v],
                                  axes=([1], [1])).transpose(0, 3, 1, 2)
        y += self.bias.data
        out = Tensor(y)
        check_finite(out, "conv2d output")

        weight, bias = self.weight, self.bias

        def rule():
            g = out.grad
            bias.grad += g.sum(axis=(0, 2, 3)).reshape(bias.shape)
            dxpad = np.zeros_like(xpad) if x.grad is not None else None
            for u in range(kh):
                for v in range(kw):
                    patch = xpad[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw]
                    weight.grad[:, :, u, v] += np.tensordot(
                        g, patch, axes=([0, 2, 3], [0, 2, 3]))
                    if dxpad is not None:
                        dxpad[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw] += \
                            np.tensordot(g, weight.data[:, :, u, v],
                                         axes=([1], [0])).transpose(0, 3, 1, 2)
            if dxpad is not None:
                x.grad += dxpad[:, :, ph:ph + h, pw:pw + w]

        record_op((x, self.weight, self.bias), out, rule)
        return out


class TransposedConv2D:
    """2x upsampling transposed convolution, fixed kernel 2x2 / stride 2.

    Weight layout (in, out, 2, 2); the forward is the exact adjoint of a
    stride-2 2x2 convolution with the same weight values, plus bias.
    """

    KERNEL = (2, 2)
    STRIDE = (2, 2)

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        if rng is None:
            rng = np.random.default_rng(0)
        w = kaiming_uniform((in_channels, out_channels, 2, 2),
                            in_channels * 4, rng, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=dtype),
                           requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        wd = self.weight.data
        y = np.empty((n, self.out_channels, 2 * h, 2 * w), dtype=x.dtype)
        for u in range(2):
            for v in range(2):
                y[:, :, u::2, v::2] = np.tensordot(
                    x.data, wd[:, :, u, v], axes=([1], [0])).transpose(0, 3, 1, 2)
        y += self.bias.data
        out = Tensor(y)
        check_finite(out, "transposed_conv2d output")

        weight, bias = self.weight, self.bias

        def rule():
            g = out.grad
            bias.grad += g.sum(axis=(0, 2, 3)).reshape(bias.shape)
            for u in range(2):
                for v in range(2):
                    guv = g[:, :, u::2, v::2]
                    weight.grad[:, :, u, v] += np.tensordot(
                        x.data, guv, axes=([0, 2, 3], [0, 2, 3]))
                    if x.grad is not None:
                        x.grad += np.tensordot(
                            guv, weight.data[:, :, u, v],
                            axes=([1], [1])).transpose(0, 3, 1, 2)

        record_op((x, self.weight, self.bias), out, rule)
        return out


class MaxPool2D:
    """2x2 max pooling, stride 2. Gradient goes to the first max in each
    window (row-major order)."""

    def __init__(self):
        self.last_argmax = None

    def params(self):
        return {}

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pool needs even spatial size, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        windows = (x.data.reshape(n, c, h2, 2, w2, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, h2, w2, 4))
        idx = windows.argmax(axis=-1)
        self.last_argmax = idx
        out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

        def rule():
            scatter = np.zeros((n, c, h2, w2, 4), dtype=out.grad.dtype)
            np.put_along_axis(scatter, idx[..., None], out.grad[..., None], axis=-1)
            x.grad += (scatter.reshape(n, c, h2, w2, 2, 2)
                       .transpose(0, 1, 2, 4, 3, 5)
                       .reshape(n, c, h, w))

        record_op((x,), out, rule)
        return out


class BatchNorm2D:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with the biased batch variance and updates the
    running stats (unbiased variance) with momentum; eval mode uses the
    running stats only.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype),
                            requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype),
                           requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.updates = 0

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, bufs):
        self.running_mean = np.array(bufs["running_mean"], copy=True)
        self.running_var = np.array(bufs["running_var"], copy=True)

    def forward(self, x, training):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {c}")
        gamma, beta = self.gamma, self.beta
        if training:
            count = n * h * w
            if count < 2:
                raise ValueError("batch norm in train mode needs >= 2 values per channel")
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(
                self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var
                                + m * var * count / (count - 1)).astype(
                self.running_var.dtype)
            self.updates += 1
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = Tensor((gamma.data * xhat + beta.data).astype(x.dtype))
        check_finite(out, "batchnorm output")

        def rule():
            g = out.grad
            gamma.grad += (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
            beta.grad += g.sum(axis=(0, 2, 3)).reshape(beta.shape)
            if x.grad is None:
                return
            istd = inv_std.reshape(1, c, 1, 1)
            dxhat = g * gamma.data
            if training:
                cnt = n * h * w
                x.grad += istd / cnt * (
                    cnt * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                x.grad += dxhat * istd

        record_op((x, gamma, beta), out, rule)
        return out


# ---------------------------------------------------------------------------
# Activations


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def rule():
        x.grad += out.grad * (x.data > 0)

    record_op((x,), out, rule)
    return out


def sigmoid(x):
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(s.astype(z.dtype))

    def rule():
        sd = out.data
        x.grad += out.grad * sd * (1 - sd)

    record_op((x,), out, rule)
    return out


def softmax_channels(x):
    """Per-pixel softmax across the channel axis (max-subtracted)."""
    if x.shape[1] < 2:
        raise ShapeError("softmax over channels needs C >= 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s.astype(x.dtype))

    def rule():
        sd = out.data
        g = out.grad
        x.grad += sd * (g - (g * sd).sum(axis=1, keepdims=True))

    record_op((x,), out, rule)
    return out


def activation(kind, x):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_channels":
        return softmax_channels(x)
    raise ValueError(f"unknown activation {kind!r}")
