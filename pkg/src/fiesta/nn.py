"""Minimal 1D neural-network primitives with hand-written backpropagation.

All layers operate on arrays of shape (batch, channels, length) except Dense
(batch, features). Forward passes cache intermediates only when train=True,
so inference is side-effect free and reentrant. Gradients accumulate into
grad_weight / grad_bias until zero_grads() is called.

Supported dtypes are float32 (production) and float64 (gradient checking).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Conv1d",
    "Dense",
    "LeakyRelu",
    "Upsample",
    "Flatten",
    "Reshape",
    "AdamOptimizer",
]


class Layer:
    """Base class: parameter-free layers inherit the empty defaults."""

    def parameters(self):
        return []

    def gradients(self):
        return []

    def zero_grads(self):
        for g in self.gradients():
            g.fill(0.0)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Conv1d(Layer):
    """1D convolution with zero padding of kernel//2 on both sides.

    Weight layout is (out_channels, in_channels * kernel); initialization is
    uniform in +/- 1/sqrt(fan_in) with fan_in = in_channels * kernel.
    """

    def __init__(self, in_channels, out_channels, kernel, stride, rng, dtype=np.float32):
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {kernel}")
        bound = 1.0 / np.sqrt(in_channels * kernel)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        self.weight = rng.uniform(-bound, bound, (out_channels, in_channels * kernel)).astype(dtype)
        self.bias = rng.uniform(-bound, bound, out_channels).astype(dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def gradients(self):
        return [self.grad_weight, self.grad_bias]

    def out_length(self, length):
        return (length + 2 * self.pad - self.kernel) // self.stride + 1

    def _columns(self, x):
        # Gather kernel windows: (B, C, L_out, k) from the padded input.
        length_out = self.out_length(x.shape[2])
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad)))
        pos = self.stride * np.arange(length_out)[:, None] + np.arange(self.kernel)[None, :]
        return xp[:, :, pos], length_out

    def forward(self, x, train=False):
        batch = x.shape[0]
        windows, length_out = self._columns(x)
        cols = windows.transpose(0, 2, 1, 3).reshape(batch * length_out, -1)
        out = cols @ self.weight.T + self.bias
        out = out.reshape(batch, length_out, self.out_channels).transpose(0, 2, 1)
        if train:
            self._cache = (cols, x.shape, length_out)
        return out

    def backward(self, grad_out):
        cols, x_shape, length_out = self._cache
        batch, channels, length = x_shape
        g2 = grad_out.transpose(0, 2, 1).reshape(batch * length_out, self.out_channels)
        self.grad_weight += g2.T @ cols
        self.grad_bias += g2.sum(axis=0)
        dcols = (g2 @ self.weight).reshape(batch, length_out, channels, self.kernel)
        dcols = dcols.transpose(0, 2, 1, 3)
        dxp = np.zeros((batch, channels, length + 2 * self.pad), dtype=grad_out.dtype)
        base = self.stride * np.arange(length_out)
        # Positions are unique for each kernel offset, so fancy-index += is safe.
        for kk in range(self.kernel):
            dxp[:, :, base + kk] += dcols[:, :, :, kk]
        return dxp[:, :, self.pad : self.pad + length]


class Dense(Layer):
    """Fully connected layer; weight (out_features, in_features)."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        self.bias = rng.uniform(-bound, bound, out_features).astype(dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def gradients(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        x = self._cache
        self.grad_weight += grad_out.T @ x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight


class LeakyRelu(Layer):
    def __init__(self, negative_slope):
        self.negative_slope = negative_slope
        self._cache = None

    def forward(self, x, train=False):
        out = np.where(x >= 0, x, x * x.dtype.type(self.negative_slope))
        if train:
            self._cache = x >= 0
        return out

    def backward(self, grad_out):
        positive = self._cache
        return np.where(positive, grad_out, grad_out * grad_out.dtype.type(self.negative_slope))


class Upsample(Layer):
    """Nearest-neighbor upsampling along the length axis by an integer factor."""

    def __init__(self, factor=2):
        self.factor = factor

    def forward(self, x, train=False):
        return np.repeat(x, self.factor, axis=2)

    def backward(self, grad_out):
        batch, channels, length = grad_out.shape
        folded = grad_out.reshape(batch, channels, length // self.factor, self.factor)
        return folded.sum(axis=3)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Reshape(Layer):
    """(batch, C*L) -> (batch, C, L)."""

    def __init__(self, channels, length):
        self.channels = channels
        self.length = length

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], self.channels, self.length)

    def backward(self, grad_out):
        return grad_out.reshape(grad_out.shape[0], -1)


class AdamOptimizer:
    """Adaptive-moments gradient update over a fixed parameter list."""

    def __init__(self, parameters, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.parameters = parameters
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p) for p in parameters]
        self._v = [np.zeros_like(p) for p in parameters]

    def step(self, gradients):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1**self.step_count
        correction2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.parameters, gradients, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p -= np.asarray(self.learning_rate * update, dtype=p.dtype)
