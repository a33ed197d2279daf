"""Differentiable layers with hand-written backward passes.

Every layer works on batched float64 arrays, keeps its parameters and
gradient accumulators in ``params``/``grads`` (same keys, same shapes) and
stores whatever the backward pass needs in ``cache``.  ``backward`` adds into
``grads``; call :meth:`Layer.zero_grad` between optimizer steps.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import DimensionError


class MissingCacheError(RuntimeError):
    pass


class Layer:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def train(self, mode: bool = True) -> None:
        self.training = mode

    def _pop_cache(self):
        if self.cache is None:
            raise MissingCacheError(f"{type(self).__name__}.backward called without a cached forward")
        cache, self.cache = self.cache, None
        return cache

    def __call__(self, x):
        return self.forward(x)


# --- functional forms ------------------------------------------------------

def depthwise_conv_forward(x: np.ndarray, kernels: np.ndarray, pad=(0, 0, 0, 0)) -> np.ndarray:
    """Per-channel 2D cross-correlation. ``x`` is (..., C, H, W), ``kernels`` is (C, K_h, K_w)."""
    if x.shape[-3] != kernels.shape[0]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[-3]} channels, got {kernels.shape[0]} depthwise kernels"
        )
    top, bottom, left, right = pad
    lead = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, lead + [(top, bottom), (left, right)])
    c, kh, kw = kernels.shape
    h_out = xp.shape[-2] - kh + 1
    w_out = xp.shape[-1] - kw + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError("depthwise kernel larger than padded input")
    out = np.zeros(x.shape[:-2] + (h_out, w_out))
    for a in range(kh):
        for b in range(kw):
            out += kernels[:, a, b, None, None] * xp[..., a : a + h_out, b : b + w_out]
    return out


def pointwise_conv_forward(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """1x1 convolution: ``out[..., o, h, w] = sum_c x[..., c, h, w] * z[o, c]``."""
    if x.shape[-3] != z.shape[1]:
        raise DimensionError(f"channel mismatch: input has {x.shape[-3]} channels, z expects {z.shape[1]}")
    return np.einsum("oc,...chw->...ohw", z, x)


def lrelu_forward(x: np.ndarray, beta: float) -> np.ndarray:
    return np.where(x >= 0, x, beta * x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --- layers ----------------------------------------------------------------

class DepthwiseConv2d(Layer):
    def __init__(self, channels: int, kernel=(5, 5), pad=(2, 2, 2, 2), rng=None):
        super().__init__()
        kh, kw = kernel
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(kh * kw)
        self.add_param("weight", rng.uniform(-bound, bound, size=(channels, kh, kw)))
        self.pad = tuple(pad)

    def forward(self, x):
        w = self.params["weight"]
        out = depthwise_conv_forward(x, w, self.pad)
        self.cache = x
        return out

    def backward(self, dy):
        x = self._pop_cache()
        shape = x.shape
        w = self.params["weight"]
        top, bottom, left, right = self.pad
        xp = np.pad(x, [(0, 0), (0, 0), (top, bottom), (left, right)])
        dxp = np.zeros_like(xp)
        _, kh, kw = w.shape
        h_out, w_out = dy.shape[-2:]
        gw = self.grads["weight"]
        for a in range(kh):
            for b in range(kw):
                gw[:, a, b] += np.einsum("nchw,nchw->c", dy, xp[:, :, a : a + h_out, b : b + w_out])
                dxp[:, :, a : a + h_out, b : b + w_out] += w[:, a, b, None, None] * dy
        return dxp[:, :, top : top + shape[2], left : left + shape[3]]


class PointwiseConv2d(Layer):
    def __init__(self, c_in: int, c_out: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(c_in)
        self.add_param("weight", rng.uniform(-bound, bound, size=(c_out, c_in)))

    def forward(self, x):
        self.cache = x
        return pointwise_conv_forward(x, self.params["weight"])

    def backward(self, dy):
        x = self._pop_cache()
        self.grads["weight"] += np.einsum("nohw,nchw->oc", dy, x)
        return np.einsum("oc,nohw->nchw", self.params["weight"], dy)


class LeakyReLU(Layer):
    """``beta = 0`` gives a plain ReLU."""

    def __init__(self, beta: float = 1e-2):
        super().__init__()
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        self.beta = beta

    def forward(self, x):
        self.cache = x >= 0
        return lrelu_forward(x, self.beta)

    def backward(self, dy):
        pos = self._pop_cache()
        return np.where(pos, dy, self.beta * dy)


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W).

    Running statistics follow ``r <- (1 - momentum) * r + momentum * batch``;
    the running variance uses the unbiased batch variance.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        gamma = self.params["gamma"][:, None, None]
        beta = self.params["beta"][:, None, None]
        if self.training:
            n, _, h, w = x.shape
            m = n * h * w
            if m < 2:
                raise ValueError("batch norm in training mode needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            self.running_mean = (1 - mom) * self.running_mean + mom * mean
            self.running_var = (1 - mom) * self.running_var + mom * var * (m / (m - 1))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
            self.cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[:, None, None]) * inv_std[:, None, None]
            self.cache = (xhat, inv_std, "eval")
        return gamma * xhat + beta

    def backward(self, dy):
        cache = self._pop_cache()
        xhat, inv_std = cache[0], cache[1]
        self.grads["gamma"] += np.einsum("nchw,nchw->c", dy, xhat)
        self.grads["beta"] += dy.sum(axis=(0, 2, 3))
        g = self.params["gamma"] * inv_std
        dxhat = dy * g[:, None, None]
        if len(cache) == 3:
            return dxhat
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        mean_d = dxhat.sum(axis=(0, 2, 3)) / m
        mean_dx = np.einsum("nchw,nchw->c", dxhat, xhat) / m
        return dxhat - mean_d[:, None, None] - xhat * mean_dx[:, None, None]


class MaxPoolWidth(Layer):
    """Non-overlapping max pooling along the last (feature) axis with kernel = stride = (1, k)."""

    def __init__(self, k: int):
        super().__init__()
        self.k = k

    def forward(self, x):
        *lead, w = x.shape
        if w % self.k:
            raise DimensionError(f"width {w} not divisible by pool width {self.k}")
        win = x.reshape(*lead, w // self.k, self.k)
        idx = win.argmax(axis=-1)
        self.cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        shape, idx = self._pop_cache()
        dwin = np.zeros(shape[:-1] + (shape[-1] // self.k, self.k))
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        return dwin.reshape(shape)


class Dropout(Layer):
    """Inverted dropout; identity in inference mode."""

    def __init__(self, p: float, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")
        self.p = p
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.p == 0.0:
            self.cache = 1.0
            return x
        mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self.cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._pop_cache()


def dropout_forward(x: np.ndarray, p: float, training: bool, rng=None) -> np.ndarray:
    layer = Dropout(p, rng)
    layer.training = training
    return layer.forward(x)


def conv_taps_forward(xp: np.ndarray, w: np.ndarray, dilation, out_hw) -> np.ndarray:
    """Batched valid cross-correlation of an already padded (N, C_in, H, W) input."""
    dh, dw = dilation
    h_out, w_out = out_hw
    _, _, kh, kw = w.shape
    out = np.zeros((xp.shape[0], w.shape[0], h_out, w_out))
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, :, a * dh : a * dh + h_out, b * dw : b * dw + w_out]
            out += np.einsum("oc,nchw->nohw", w[:, :, a, b], patch)
    return out


def conv_taps_backward(xp: np.ndarray, w: np.ndarray, dilation, dy: np.ndarray):
    """Gradients of :func:`conv_taps_forward`: returns (d_weight, d_padded_input)."""
    dh, dw = dilation
    h_out, w_out = dy.shape[2:]
    _, _, kh, kw = w.shape
    gw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            rs = slice(a * dh, a * dh + h_out)
            cs = slice(b * dw, b * dw + w_out)
            gw[:, :, a, b] = np.einsum("nohw,nchw->oc", dy, xp[:, :, rs, cs])
            dxp[:, :, rs, cs] += np.einsum("oc,nohw->nchw", w[:, :, a, b], dy)
    return gw, dxp


class Conv2d(Layer):
    """Batched 2D cross-correlation with time (height) dilation and a per-channel bias."""

    def __init__(self, c_in: int, c_out: int, kernel=(3, 3), dilation=(1, 1), pad=(0, 0, 0, 0),
                 bias: bool = True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        kh, kw = kernel
        bound = 1.0 / np.sqrt(c_in * kh * kw)
        self.add_param("weight", rng.uniform(-bound, bound, size=(c_out, c_in, kh, kw)))
        if bias:
            self.add_param("bias", rng.uniform(-bound, bound, size=c_out))
        self.dilation = tuple(dilation)
        self.pad = tuple(pad)

    def forward(self, x):
        w = self.params["weight"]
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
        top, bottom, left, right = self.pad
        xp = np.pad(x, [(0, 0), (0, 0), (top, bottom), (left, right)])
        dh, dw = self.dilation
        _, _, kh, kw = w.shape
        h_out = xp.shape[2] - dh * (kh - 1)
        w_out = xp.shape[3] - dw * (kw - 1)
        if h_out < 1 or w_out < 1:
            raise DimensionError("kernel span exceeds padded input")
        out = conv_taps_forward(xp, w, self.dilation, (h_out, w_out))
        if "bias" in self.params:
            out += self.params["bias"][None, :, None, None]
        self.cache = (x.shape, xp)
        return out

    def backward(self, dy):
        shape, xp = self._pop_cache()
        gw, dxp = conv_taps_backward(xp, self.params["weight"], self.dilation, dy)
        self.grads["weight"] += gw
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=(0, 2, 3))
        top, _, left, _ = self.pad
        return dxp[:, :, top : top + shape[2], left : left + shape[3]]


class Classifier(Layer):
    """Affine map followed by sigmoid or softmax, applied over the last axis
    with the same weights at every leading index (time step, batch item)."""

    def __init__(self, in_features: int, num_classes: int, activation: str = "sigmoid", rng=None):
        super().__init__()
        if activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.add_param("weight", rng.uniform(-bound, bound, size=(num_classes, in_features)))
        self.add_param("bias", rng.uniform(-bound, bound, size=num_classes))
        self.activation = activation

    def activate(self, logits):
        return sigmoid(logits) if self.activation == "sigmoid" else softmax(logits)

    def forward(self, x):
        y = self.activate(x @ self.params["weight"].T + self.params["bias"])
        self.cache = (x, y)
        return y

    def activation_backward(self, y, dy):
        if self.activation == "sigmoid":
            return dy * y * (1.0 - y)
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))

    def backward(self, dy):
        x, y = self._pop_cache()
        dz = self.activation_backward(y, dy)
        d = x.shape[-1]
        self.grads["weight"] += dz.reshape(-1, dz.shape[-1]).T @ x.reshape(-1, d)
        self.grads["bias"] += dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        return dz @ self.params["weight"]


def linear_classifier_forward(x, weight, bias, activation: str = "sigmoid"):
    z = x @ np.asarray(weight).T + bias
    return sigmoid(z) if activation == "sigmoid" else softmax(z)
