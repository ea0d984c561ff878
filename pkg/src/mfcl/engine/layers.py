"""Layer kinds of the engine.

Every layer implements ``forward(x, train, update_stats) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``; ``grads`` is keyed like ``params``.
Tensors are C-contiguous float64 numpy arrays with the batch on axis 0.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Input dimensions do not match what a layer expects."""


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, update_stats=False):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "kind")
        return f"{self.kind}({args})"


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.params["weight"] = _uniform(rng, bound, (out_features, in_features))
        if bias:
            self.params["bias"] = _uniform(rng, bound, (out_features,))

    def forward(self, x, train=False, update_stats=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"Dense expects (batch, {self.in_features}), got {tuple(x.shape)}")
        y = x @ self.params["weight"].T
        if self.bias:
            y = y + self.params["bias"]
        return y, x

    def backward(self, dy, cache):
        x = cache
        grads = {"weight": dy.T @ x}
        if self.bias:
            grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"], grads

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias}


class Conv2D(Layer):
    """Stride-1 convolution with size-preserving zero padding."""

    kind = "Conv2D"

    def __init__(self, in_channels, out_channels, kernel_size=3, bias=True, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.pad = kernel_size // 2
        self.bias = bias
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        self.params["weight"] = _uniform(
            rng, bound, (out_channels, in_channels, kernel_size, kernel_size))
        if bias:
            self.params["bias"] = _uniform(rng, bound, (out_channels,))

    def forward(self, x, train=False, update_stats=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv2D expects (batch, {self.in_channels}, H, W), got {tuple(x.shape)}")
        n, c, h, w = x.shape
        k = self.kernel_size
        mat = kernels.im2col(x, k, self.pad)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        y = mat @ wmat.T
        if self.bias:
            y = y + self.params["bias"]
        y = np.ascontiguousarray(y.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2))
        return y, (mat, x.shape)

    def backward(self, dy, cache):
        mat, shape = cache
        n, _, h, w = shape
        k = self.kernel_size
        dym = dy.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        grads = {"weight": (dym.T @ mat).reshape(self.params["weight"].shape)}
        if self.bias:
            grads["bias"] = dym.sum(axis=0)
        return kernels.col2im(dym @ wmat, shape, k, self.pad), grads

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "bias": self.bias}


class BatchNorm(Layer):
    """Batch normalization over axis 1 for (N, C) or (N, C, H, W) inputs.

    Train mode normalizes with the biased batch variance and returns the
    measured ``(mean, var)`` in the cache. Running statistics move only when
    ``update_stats`` is set: ``new = (1 - momentum) * old + momentum * batch``.
    """

    kind = "BatchNorm"

    def __init__(self, num_features, momentum=0.1, eps=1e-5, affine=True):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.affine = affine
        if affine:
            self.params["gamma"] = np.ones(num_features)
            self.params["beta"] = np.zeros(num_features)
        self.buffers["running_mean"] = np.zeros(num_features)
        self.buffers["running_var"] = np.ones(num_features)

    def _axes(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"BatchNorm expects 2-D or 4-D input, got {x.ndim}-D")

    def forward(self, x, train=False, update_stats=False):
        axes, bshape = self._axes(x)
        if x.shape[1] != self.num_features:
            raise ShapeError(
                f"BatchNorm({self.num_features}) got {x.shape[1]} channels")
        if train:
            mean = x.mean(axis=axes)
            xc = x - mean.reshape(bshape)
            var = (xc * xc).mean(axis=axes)
            if update_stats:
                m = self.momentum
                self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
                self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
            xc = x - mean.reshape(bshape)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std.reshape(bshape)
        y = xhat
        if self.affine:
            y = xhat * self.params["gamma"].reshape(bshape) + self.params["beta"].reshape(bshape)
        cache = {"train": train, "xhat": xhat, "xc": xc, "inv_std": inv_std,
                 "mean": mean, "var": var, "axes": axes, "bshape": bshape}
        return y, cache

    def backward(self, dy, cache, stat_grad=None):
        """``stat_grad`` is an optional ``(dmean, dvar)`` pair: upstream
        gradients on the measured batch statistics (train mode only)."""
        axes, bshape = cache["axes"], cache["bshape"]
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        grads = {}
        if self.affine:
            grads["gamma"] = (dy * xhat).sum(axis=axes)
            grads["beta"] = dy.sum(axis=axes)
            dxhat = dy * self.params["gamma"].reshape(bshape)
        else:
            dxhat = dy
        if not cache["train"]:
            return dxhat * inv_std.reshape(bshape), grads
        m = xhat.size // xhat.shape[1]
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        if stat_grad is not None:
            dmean, dvar = stat_grad
            dx = dx + (np.asarray(dmean).reshape(bshape) / m
                       + np.asarray(dvar).reshape(bshape) * (2.0 / m) * cache["xc"])
        return dx, grads

    def config(self):
        return {"kind": self.kind, "num_features": self.num_features,
                "momentum": self.momentum, "eps": self.eps, "affine": self.affine}


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False, update_stats=False):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, dy, cache):
        return np.where(cache, dy, self.slope * dy), {}

    def config(self):
        return {"kind": self.kind, "slope": self.slope}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False, update_stats=False):
        pos = x > 0
        return np.where(pos, x, 0.0), pos

    def backward(self, dy, cache):
        return np.where(cache, dy, 0.0), {}


class Tanh(Layer):
    kind = "Tanh"

    def forward(self, x, train=False, update_stats=False):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, cache):
        return dy * (1.0 - cache * cache), {}


class NearestUpsample2x(Layer):
    kind = "NearestUpsample2x"

    def forward(self, x, train=False, update_stats=False):
        if x.ndim != 4:
            raise ShapeError(f"NearestUpsample2x expects 4-D input, got {x.ndim}-D")
        return kernels.upsample2x(x), None

    def backward(self, dy, cache):
        return kernels.upsample2x_backward(dy), {}


class AvgPool2x2(Layer):
    kind = "AvgPool2x2"

    def forward(self, x, train=False, update_stats=False):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"AvgPool2x2 expects 4-D input with even H, W, got {tuple(x.shape)}")
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None

    def backward(self, dy, cache):
        return 0.25 * dy.repeat(2, axis=2).repeat(2, axis=3), {}


class Reshape(Layer):
    """Reshape the non-batch dimensions; ``shape=(-1,)`` flattens."""

    kind = "Reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def forward(self, x, train=False, update_stats=False):
        try:
            y = x.reshape((x.shape[0],) + self.shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {tuple(x.shape)} to (batch, {self.shape})") from exc
        return y, x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}

    def config(self):
        return {"kind": self.kind, "shape": list(self.shape)}


LAYER_KINDS = {cls.kind: cls for cls in
               (Dense, Conv2D, BatchNorm, LeakyReLU, ReLU, Tanh,
                NearestUpsample2x, AvgPool2x2, Reshape)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    if kind == "Reshape":
        return cls(tuple(cfg["shape"]))
    return cls(**cfg)
