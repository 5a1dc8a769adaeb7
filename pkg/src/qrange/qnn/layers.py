"""Layers with explicit forward/backward.

``forward`` returns ``(out, cache)``; ``backward(grad, cache)`` returns
``(grad_input, param_grads)``. Parameters live on the layer in ``params``;
the weight actually used in the forward pass is passed in by the model so a
quantized image can stand in for the FP32 master copy.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T


class Layer:
    quantizable = False
    has_params = False

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = True, weight=None):
        raise NotImplementedError

    def backward(self, grad, cache, need_input_grad: bool = True):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


def _kaiming(rng: T.RandomSource, shape, fan_in, dtype):
    return (rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    quantizable = True
    has_params = True

    def __init__(self, c_in, c_out, k, stride=1, pad=0, groups=1, bias=True, name="", rng=None, dtype=T.DTYPE):
        super().__init__(name)
        if c_in % groups or c_out % groups:
            raise T.GeometryError(f"channels ({c_in}, {c_out}) not divisible by groups={groups}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad, self.groups = stride, pad, groups
        rng = rng or T.RandomSource(0)
        fan_in = (c_in // groups) * k * k
        self.params["weight"] = _kaiming(rng, (c_out, c_in // groups, k, k), fan_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)

    def forward(self, x, train=True, weight=None):
        w = self.params["weight"] if weight is None else weight
        y = T.conv2d(x, w, self.stride, self.pad, self.groups)
        if "bias" in self.params:
            y = y + self.params["bias"].reshape(1, -1, 1, 1)
        return y, (x, w)

    def backward(self, grad, cache, need_input_grad=True):
        x, w = cache
        gx, gw = T.conv2d_backward(x, w, grad, self.stride, self.pad, self.groups, need_input_grad)
        grads = {"weight": gw}
        if "bias" in self.params:
            grads["bias"] = grad.astype(np.float64).sum(axis=(0, 2, 3)).astype(grad.dtype)
        return gx, grads


class Linear(Layer):
    quantizable = True
    has_params = True

    def __init__(self, n_in, n_out, bias=True, name="", rng=None, dtype=T.DTYPE):
        super().__init__(name)
        self.n_in, self.n_out = n_in, n_out
        rng = rng or T.RandomSource(0)
        self.params["weight"] = _kaiming(rng, (n_in, n_out), n_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=True, weight=None):
        w = self.params["weight"] if weight is None else weight
        if x.ndim != 2:
            raise T.ShapeError(f"{self.name}: Linear expects (N, features), got {x.shape}")
        y = T.matmul(x, w)
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y, (x, w)

    def backward(self, grad, cache, need_input_grad=True):
        x, w = cache
        grads = {"weight": T.matmul(x.T, grad)}
        if "bias" in self.params:
            grads["bias"] = grad.astype(np.float64).sum(axis=0).astype(grad.dtype)
        gx = T.matmul(grad, w.T) if need_input_grad else None
        return gx, grads


class BatchNorm(Layer):
    """Float batch normalization over (N, C) or (N, C, H, W)."""

    has_params = True

    def __init__(self, channels, momentum=0.1, eps=1e-5, name="", dtype=T.DTYPE):
        super().__init__(name)
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def _axes(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise T.ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train=True, weight=None, update_stats=True):
        axes, bs = self._axes(x), self._bshape(x)
        x64 = x.astype(np.float64)
        if train:
            mean = x64.mean(axis=axes)
            var = x64.var(axis=axes)
            if update_stats:
                n = x.size // self.channels
                unbiased = var * n / max(n - 1, 1)
                m = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                self.buffers["running_mean"] = ((1 - m) * rm + m * mean).astype(rm.dtype)
                self.buffers["running_var"] = ((1 - m) * rv + m * unbiased).astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(np.float64)
            var = self.buffers["running_var"].astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - mean.reshape(bs)) * inv_std.reshape(bs)
        gamma = self.params["gamma"].astype(np.float64).reshape(bs)
        y = xhat * gamma + self.params["beta"].astype(np.float64).reshape(bs)
        return y.astype(x.dtype), (xhat, inv_std, axes, bs)

    def backward(self, grad, cache, need_input_grad=True):
        xhat, inv_std, axes, bs = cache
        g = grad.astype(np.float64)
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        grads = {"gamma": dgamma.astype(grad.dtype), "beta": dbeta.astype(grad.dtype)}
        gx = None
        if need_input_grad:
            n = g.size // self.channels
            gamma = self.params["gamma"].astype(np.float64)
            dxhat = g * gamma.reshape(bs)
            gx = (inv_std.reshape(bs) / n) * (
                n * dxhat - dxhat.sum(axis=axes).reshape(bs) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bs)
            )
            gx = gx.astype(grad.dtype)
        return gx, grads


class ReLU(Layer):
    def forward(self, x, train=True, weight=None):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype), mask

    def backward(self, grad, cache, need_input_grad=True):
        return np.where(cache, grad, 0).astype(grad.dtype), {}


class MaxPool(Layer):
    def __init__(self, k=2, stride=None, name=""):
        super().__init__(name)
        self.k = k
        self.stride = stride or k

    def forward(self, x, train=True, weight=None):
        n, c, h, w = x.shape
        ho = T.conv_output_size(h, self.k, self.stride, 0)
        wo = T.conv_output_size(w, self.k, self.stride, 0)
        win = T._windows(x, self.k, self.stride, ho, wo).reshape(n, c, ho, wo, self.k * self.k)
        idx = win.argmax(axis=-1)  # first maximum on ties
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(out), (x.shape, idx, ho, wo)

    def backward(self, grad, cache, need_input_grad=True):
        shape, idx, ho, wo = cache
        gx = np.zeros(shape, dtype=grad.dtype)
        s, k = self.stride, self.k
        hspan, wspan = (ho - 1) * s + 1, (wo - 1) * s + 1
        for i in range(k):
            for j in range(k):
                sel = idx == i * k + j
                gx[:, :, i : i + hspan : s, j : j + wspan : s] += grad * sel
        return gx, {}


class GlobalAvgPool(Layer):
    def forward(self, x, train=True, weight=None):
        out = x.astype(np.float64).mean(axis=(2, 3)).astype(x.dtype)
        return out, x.shape

    def backward(self, grad, cache, need_input_grad=True):
        n, c, h, w = cache
        g = np.broadcast_to(grad.astype(np.float64)[:, :, None, None] / (h * w), cache)
        return g.astype(grad.dtype), {}


class Flatten(Layer):
    def forward(self, x, train=True, weight=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, need_input_grad=True):
        return grad.reshape(cache), {}


class ResidualAdd(Layer):
    """Adds the output of an earlier node (``source`` index) to its input."""

    def __init__(self, source: int, name=""):
        super().__init__(name)
        self.source = source

    def forward(self, x, train=True, weight=None, skip=None):
        if skip is None or skip.shape != x.shape:
            raise T.ShapeError(f"{self.name}: residual shape mismatch")
        return x + skip, None

    def backward(self, grad, cache, need_input_grad=True):
        return grad, {}


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits, computed in float64."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)
