"""Central finite-difference checks for every layer and the conditioned head.

Each check builds a small random instance, forms the scalar
``sum(upstream * layer(x))`` and compares the analytic gradients of the input
and of every parameter with central differences.  The reported error of one
tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)``;
the floor keeps gradients that are exactly zero in theory (e.g. a conv weight
feeding a batch norm through a positively homogeneous map) from turning
roundoff into a large ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .model import CDCNNHead, DCNNHead, ModelConfig, SEDModel
from .optim import LOSSES

STEP = 1e-5
TOLERANCE = 1e-4
SCALE_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_module(name: str, forward: Callable, backward: Callable, x: np.ndarray,
                 params: dict[str, tuple[np.ndarray, np.ndarray]], rng) -> CheckResult:
    """``params`` maps a label to ``(value, grad_slot)``; grad slots are zeroed here."""
    upstream = rng.standard_normal(np.shape(forward(x)))

    def scalar():
        return float((forward(x) * upstream).sum())

    for _, g in params.values():
        g.fill(0.0)
    forward(x)
    dx = backward(upstream)
    errors = {"input": rel_error(dx, numeric_grad(scalar, x))}
    for label, (p, g) in params.items():
        analytic = g.copy()
        errors[label] = rel_error(analytic, numeric_grad(scalar, p))
    worst = max(errors, key=errors.get)
    return CheckResult(name, errors[worst], worst)


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, gap * np.sign(x) + gap, x)


def _layer_params(layer: L.Layer, prefix=""):
    return {prefix + k: (layer.params[k], layer.grads[k]) for k in layer.params}


def check_depthwise(rng):
    layer = L.DepthwiseConv2d(3, (3, 3), (1, 1, 1, 1), rng=rng)
    return check_module("depthwise", layer.forward, layer.backward,
                        rng.standard_normal((2, 3, 5, 4)), _layer_params(layer), rng)


def check_pointwise(rng):
    layer = L.PointwiseConv2d(3, 4, rng=rng)
    return check_module("pointwise", layer.forward, layer.backward,
                        rng.standard_normal((2, 3, 4, 3)), _layer_params(layer), rng)


def check_lrelu(rng):
    layer = L.LeakyReLU(1e-2)
    return check_module("lrelu", layer.forward, layer.backward, _away_from_zero(rng, (2, 3, 4)), {}, rng)


def check_relu(rng):
    layer = L.LeakyReLU(0.0)
    return check_module("relu", layer.forward, layer.backward, _away_from_zero(rng, (2, 3, 4)), {}, rng)


def check_batchnorm(rng):
    layer = L.BatchNorm2d(3)
    layer.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    layer.params["beta"][...] = rng.standard_normal(3)
    return check_module("batchnorm", layer.forward, layer.backward,
                        rng.standard_normal((2, 3, 3, 4)), _layer_params(layer), rng)


def check_batchnorm_eval(rng):
    layer = L.BatchNorm2d(3)
    layer.training = False
    layer.running_mean = rng.standard_normal(3)
    layer.running_var = rng.uniform(0.5, 2.0, 3)
    layer.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    return check_module("batchnorm_eval", layer.forward, layer.backward,
                        rng.standard_normal((2, 3, 3, 4)), _layer_params(layer), rng)


def check_maxpool(rng):
    layer = L.MaxPoolWidth(2)
    # well separated values keep the argmax fixed under the finite-difference step
    x = rng.permutation(2 * 3 * 4 * 6).reshape(2, 3, 4, 6) * 0.1
    return check_module("maxpool", layer.forward, layer.backward, x.astype(np.float64), {}, rng)


def check_dropout(rng):
    layer = L.Dropout(0.25)
    seed = int(rng.integers(2**31))

    def forward(x):
        layer.rng = np.random.default_rng(seed)
        return layer.forward(x)

    return check_module("dropout", forward, layer.backward, rng.standard_normal((2, 3, 4)), {}, rng)


def check_conv_dilated(rng):
    layer = L.Conv2d(2, 3, (3, 3), dilation=(2, 1), pad=(2, 2, 1, 1), rng=rng)
    return check_module("conv_dilated", layer.forward, layer.backward,
                        rng.standard_normal((2, 2, 7, 4)), _layer_params(layer), rng)


def _check_classifier(rng, activation):
    layer = L.Classifier(5, 4, activation, rng=rng)
    return check_module(f"classifier_{activation}", layer.forward, layer.backward,
                        rng.standard_normal((2, 3, 5)), _layer_params(layer), rng)


def check_classifier_sigmoid(rng):
    return _check_classifier(rng, "sigmoid")


def check_classifier_softmax(rng):
    return _check_classifier(rng, "softmax")


def micro_config(**overrides) -> ModelConfig:
    """T=12 micro instance: W_f=6, C=3, K'=(3,3), xi=2, K'_o=2."""
    base = dict(n_features=6, num_classes=3, channels=[1], pool_widths=[1], kernel=(3, 3),
                out_channels=2, dilation=2, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def _head_params(head):
    out = {}
    for ln, layer in head.named_layers():
        for k in layer.params:
            out[f"{ln}.{k}"] = (layer.params[k], layer.grads[k])
    return out


def check_dcnn(rng, T=12):
    head = DCNNHead(micro_config(), rng)
    return check_module("dcnn", head.forward, head.backward, rng.standard_normal((2, T, 6)),
                        _head_params(head), rng)


def check_cdcnn(rng, T=12, **overrides):
    head = CDCNNHead(micro_config(**overrides), rng)
    for p in head.params.values():
        p[...] = rng.standard_normal(p.shape)
    name = "cdcnn" if not overrides else "cdcnn[" + ",".join(f"{k}={v}" for k, v in overrides.items()) + "]"
    return check_module(name, head.forward, head.backward, rng.standard_normal((2, T, 6)),
                        _head_params(head), rng)


def check_cdcnn_softmax(rng, T=12):
    return check_cdcnn(rng, T, activation="softmax")


def check_full_model(rng, T=12):
    """End-to-end: features -> DWS stack -> CDCNN -> BCE loss."""
    cfg = ModelConfig(n_features=8, num_classes=3, channels=[2, 3], pool_widths=[2, 2],
                      kernel=(3, 3), out_channels=2, dilation=2, dropout=0.0)
    model = SEDModel(cfg, seed=int(rng.integers(1000)))
    x = rng.standard_normal((2, T, 8))
    y = (rng.random((2, T, 3)) < 0.4).astype(np.float64)
    loss_fn = LOSSES[cfg.activation]
    # pin BN running stats; they drift on every training-mode forward but do not enter the loss
    bns = [layer for _, layer in model.named_layers() if isinstance(layer, L.BatchNorm2d)]

    def loss():
        saved = [(b.running_mean, b.running_var) for b in bns]
        value, _ = loss_fn(model.forward(x), y)
        for b, (m, v) in zip(bns, saved):
            b.running_mean, b.running_var = m, v
        return value

    model.zero_grad()
    _, dy = loss_fn(model.forward(x), y)
    dx = model.backward(dy)
    errors = {"input": rel_error(dx, numeric_grad(loss, x))}
    for name, p in model.parameters().items():
        errors[name] = rel_error(model.gradients()[name].copy(), numeric_grad(loss, p))
    worst = max(errors, key=errors.get)
    return CheckResult("full_model", errors[worst], worst)


LAYER_CHECKS: dict[str, Callable] = {
    "depthwise": check_depthwise,
    "pointwise": check_pointwise,
    "lrelu": check_lrelu,
    "relu": check_relu,
    "batchnorm": check_batchnorm,
    "batchnorm_eval": check_batchnorm_eval,
    "maxpool": check_maxpool,
    "dropout": check_dropout,
    "conv_dilated": check_conv_dilated,
    "classifier_sigmoid": check_classifier_sigmoid,
    "classifier_softmax": check_classifier_softmax,
    "dcnn": check_dcnn,
    "cdcnn": check_cdcnn,
    "cdcnn_softmax": check_cdcnn_softmax,
    "full_model": check_full_model,
}

SEQUENCE_CHECKS = {"dcnn", "cdcnn", "cdcnn_softmax", "full_model"}


def run_checks(names=None, seeds=(0,), T: int = 12, checks=None) -> list[CheckResult]:
    checks = LAYER_CHECKS if checks is None else checks
    names = list(checks) if not names else list(names)
    unknown = [n for n in names if n not in checks]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {unknown}")
    results = []
    for name in names:
        worst = None
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn = checks[name]
            r = fn(rng, T=T) if name in SEQUENCE_CHECKS else fn(rng)
            r.name = name
            if worst is None or r.max_rel_error > worst.max_rel_error:
                worst = r
        results.append(worst)
    return results
