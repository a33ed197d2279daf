"""DWS feature extractor, time-dilated convolution heads, and checkpoints.

Two temporal heads share the same interface:

* :class:`DCNNHead` is the non-conditioned baseline: one time-dilated
  convolution over ``H'`` with symmetric time padding, then a classifier with
  weights shared over time.
* :class:`CDCNNHead` adds a second input channel ``Q`` that starts at zero
  and is filled, one time step at a time, with an affine embedding of the
  classifier's own prediction.  Each step sees a causal dilated window
  ``{t - xi*(K_h-1), ..., t - xi, t}``, and ``Q[t]`` is written only after
  step ``t`` has been predicted.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layers as L
from .tensor import DimensionError, read_tensor, write_tensor


@dataclass
class ModelConfig:
    n_features: int = 40
    num_classes: int = 16
    channels: list[int] = field(default_factory=lambda: [256, 256, 256])
    depthwise_kernel: tuple[int, int] = (5, 5)
    depthwise_pad: tuple[int, int] = (2, 2)
    pool_widths: list[int] = field(default_factory=lambda: [5, 4, 2])
    dropout: float = 0.25
    lrelu_beta: float = 1e-2
    kernel: tuple[int, int] = (3, 3)
    out_channels: int = 32
    dilation: int = 10
    conditioning: bool = True
    teacher_forcing: bool = False
    detach_conditioning: bool = False
    activation: str = "sigmoid"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.pool_widths = [int(k) for k in self.pool_widths]
        self.depthwise_kernel = tuple(int(k) for k in self.depthwise_kernel)
        self.depthwise_pad = tuple(int(k) for k in self.depthwise_pad)
        self.kernel = tuple(int(k) for k in self.kernel)
        self.validate()

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @property
    def feature_width(self) -> int:
        """Columns of H' (channels of the last block times its remaining feature width)."""
        return self.channels[-1] * (self.n_features // int(np.prod(self.pool_widths)))

    def validate(self) -> None:
        if len(self.pool_widths) != len(self.channels):
            raise ValueError("pool_widths and channels must have one entry per DWS block")
        if self.n_features % int(np.prod(self.pool_widths)):
            raise ValueError(
                f"product of pool_widths {self.pool_widths} does not divide n_features={self.n_features}"
            )
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"dilated kernel must have odd height and width, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.activation not in ("sigmoid", "softmax"):
            raise ValueError(f"activation must be 'sigmoid' or 'softmax', got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


class DWSBlock:
    """depthwise conv -> LReLU -> BN -> pointwise conv -> ReLU -> BN -> max-pool (features) -> dropout"""

    def __init__(self, c_in, c_out, cfg: ModelConfig, pool: int, rng, drop_rng):
        ph, pw = cfg.depthwise_pad
        self.depthwise = L.DepthwiseConv2d(c_in, cfg.depthwise_kernel, (ph, ph, pw, pw), rng=rng)
        self.lrelu = L.LeakyReLU(cfg.lrelu_beta)
        self.bn1 = L.BatchNorm2d(c_in, cfg.bn_momentum, cfg.bn_eps)
        self.pointwise = L.PointwiseConv2d(c_in, c_out, rng=rng)
        self.relu = L.LeakyReLU(0.0)
        self.bn2 = L.BatchNorm2d(c_out, cfg.bn_momentum, cfg.bn_eps)
        self.pool = L.MaxPoolWidth(pool)
        self.dropout = L.Dropout(cfg.dropout, rng=drop_rng)
        self.sequence = [self.depthwise, self.lrelu, self.bn1, self.pointwise,
                         self.relu, self.bn2, self.pool, self.dropout]
        self.names = ["depthwise", "lrelu", "bn1", "pointwise", "relu", "bn2", "pool", "dropout"]

    def forward(self, x):
        for layer in self.sequence:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.sequence):
            dy = layer.backward(dy)
        return dy


class DWSStack:
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.cfg = cfg
        c_prev = 1
        self.blocks = []
        for c, k in zip(cfg.channels, cfg.pool_widths):
            self.blocks.append(DWSBlock(c_prev, c, cfg, k, rng, drop_rng))
            c_prev = c

    def named_layers(self) -> Iterator[tuple[str, L.Layer]]:
        for i, block in enumerate(self.blocks):
            for name, layer in zip(block.names, block.sequence):
                yield f"block{i}.{name}", layer

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(N, T, F) features -> (N, T, C_L * W_L) sequence ``H'``."""
        if x.ndim == 2:
            x = x[None]
        h = x[:, None]
        for block in self.blocks:
            h = block.forward(h)
        n, c, t, w = h.shape
        if t != x.shape[1]:
            raise DimensionError(f"time axis changed from {x.shape[1]} to {t}; check depthwise padding")
        self._shape = h.shape
        return h.transpose(0, 2, 1, 3).reshape(n, t, c * w)

    def backward(self, dh: np.ndarray) -> np.ndarray:
        n, c, t, w = self._shape
        d = dh.reshape(n, t, c, w).transpose(0, 2, 1, 3)
        for block in reversed(self.blocks):
            d = block.backward(d)
        return d[:, 0]


def _time_pad(kh: int, dilation: int, causal: bool) -> tuple[int, int]:
    span = dilation * (kh - 1)
    return (span, 0) if causal else (span // 2, span // 2)


class DCNNHead:
    """Time-dilated convolution over ``H'`` followed by the shared-weight classifier.

    ``in_channels=2`` with ``causal=True`` and a zero second channel reproduces
    the conditioned head with a zeroed affine embedding.
    """

    def __init__(self, cfg: ModelConfig, rng, in_channels: int = 1, causal: bool = False):
        kh, kw = cfg.kernel
        top, bottom = _time_pad(kh, cfg.dilation, causal)
        pw = (kw - 1) // 2
        self.conv = L.Conv2d(in_channels, cfg.out_channels, cfg.kernel, (cfg.dilation, 1),
                             (top, bottom, pw, pw), rng=rng)
        self.cls = L.Classifier(cfg.out_channels * cfg.feature_width, cfg.num_classes,
                                cfg.activation, rng=rng)

    def named_layers(self):
        yield "conv", self.conv
        yield "cls", self.cls

    def forward(self, h: np.ndarray, y=None) -> np.ndarray:
        x = h[:, None] if h.ndim == 3 else h
        o = self.conv.forward(x)
        n, k, t, w = o.shape
        self._shape = o.shape
        return self.cls.forward(o.transpose(0, 2, 1, 3).reshape(n, t, k * w))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, k, t, w = self._shape
        do = self.cls.backward(dy).reshape(n, t, k, w).transpose(0, 2, 1, 3)
        dx = self.conv.backward(np.ascontiguousarray(do))
        return dx[:, 0] if dx.shape[1] == 1 else dx


def window_rows(t: int, kh: int, dilation: int) -> list[int]:
    """Rows of ``H'``/``Q`` read when predicting step ``t``; negative rows are zero padding."""
    return [t - dilation * (kh - 1 - k) for k in range(kh)]


class CDCNNHead(L.Layer):
    """Conditioned time-dilated convolution with its classifier and affine embedding.

    Parameters: ``weight`` (K_o, 2, K_h, K_w), ``bias`` (K_o,), ``aff_weight``
    (W_f, C), ``aff_bias`` (W_f,); the classifier lives in ``self.cls``.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        kh, kw = cfg.kernel
        w_f, c = cfg.feature_width, cfg.num_classes
        bound = 1.0 / np.sqrt(2 * kh * kw)
        self.add_param("weight", rng.uniform(-bound, bound, size=(cfg.out_channels, 2, kh, kw)))
        self.add_param("bias", rng.uniform(-bound, bound, size=cfg.out_channels))
        ab = 1.0 / np.sqrt(c)
        self.add_param("aff_weight", rng.uniform(-ab, ab, size=(w_f, c)))
        self.add_param("aff_bias", rng.uniform(-ab, ab, size=w_f))
        self.cls = L.Classifier(cfg.out_channels * w_f, c, cfg.activation, rng=rng)
        self.dilation = cfg.dilation
        self.kernel = (kh, kw)
        self.teacher_forcing = cfg.teacher_forcing
        self.detach = cfg.detach_conditioning

    def named_layers(self):
        yield "cdcnn", self
        yield "cls", self.cls

    def zero_grad(self):
        super().zero_grad()
        self.cls.zero_grad()

    def forward(self, h: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        """``h`` is (N, T, W_f); returns predictions (N, T, C)."""
        if h.ndim == 2:
            h = h[None]
        if self.teacher_forcing and self.training:
            if y is None:
                raise ValueError("teacher forcing needs ground-truth labels")
            y = y[None] if y.ndim == 2 else y
        tf = self.teacher_forcing and self.training
        n, t_len, w_f = h.shape
        kh, kw = self.kernel
        xi = self.dilation
        span = xi * (kh - 1)
        pw = (kw - 1) // 2
        w = self.params["weight"]
        k_o = w.shape[0]
        aff_w, aff_b = self.params["aff_weight"], self.params["aff_bias"]
        cls_w, cls_b = self.cls.params["weight"], self.cls.params["bias"]

        # the H' channel never depends on Q, so its contribution is computed for all steps at once
        hp = np.pad(h[:, None], [(0, 0), (0, 0), (span, 0), (pw, pw)])
        a0 = L.conv_taps_forward(hp, w[:, :1], (xi, 1), (t_len, w_f))
        a0 += self.params["bias"][None, :, None, None]
        a0 = np.ascontiguousarray(a0.transpose(0, 2, 1, 3))  # N, T, K_o, W_f

        # Q rows live at offset `span` so that causal taps index it without bounds checks
        qpad = np.zeros((n, span + t_len, w_f + 2 * pw))
        wq = w[:, 1, : kh - 1, :]  # the tap on row t always meets the still-zero Q[t]
        taps = xi * np.arange(kh - 1)
        o_flat = np.empty((n, t_len, k_o * w_f))
        y_hat = np.empty((n, t_len, cls_b.shape[0]))
        for t in range(t_len):
            o = a0[:, t]
            if kh > 1:
                win = sliding_window_view(qpad[:, t + taps], kw, axis=2)  # N, K_h-1, W_f, K_w
                o = o + np.einsum("nkwj,okj->now", win, wq)
            of = o.reshape(n, k_o * w_f)
            yt = self.cls.activate(of @ cls_w.T + cls_b)
            src = y[:, t] if tf else yt
            qpad[:, span + t, pw : pw + w_f] = src @ aff_w.T + aff_b
            o_flat[:, t] = of
            y_hat[:, t] = yt
        self.cache = (h, hp, qpad, o_flat, y_hat, y if tf else None)
        return y_hat

    def conditioning_channel(self) -> np.ndarray:
        """Q of the last forward pass, (N, T, W_f)."""
        _, _, qpad, *_ = self.cache
        kh, kw = self.kernel
        span = self.dilation * (kh - 1)
        pw = (kw - 1) // 2
        return qpad[:, span:, pw : qpad.shape[2] - pw]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Backpropagation through time over the conditioning chain; returns dH'."""
        h, hp, qpad, o_flat, y_hat, y_true = self._pop_cache()
        squeeze = dy.ndim == 2
        if squeeze:
            dy = dy[None]
        n, t_len, w_f = h.shape
        kh, kw = self.kernel
        xi = self.dilation
        span = xi * (kh - 1)
        pw = (kw - 1) // 2
        w = self.params["weight"]
        k_o = w.shape[0]
        aff_w = self.params["aff_weight"]
        cls_w = self.cls.params["weight"]
        wq = w[:, 1, : kh - 1, :]
        taps = xi * np.arange(kh - 1)
        src = y_true if y_true is not None else y_hat
        flow_into_predictions = y_true is None and not self.detach

        dq = np.zeros_like(qpad)  # gradient w.r.t. padded Q
        do_all = np.empty((n, t_len, k_o, w_f))
        dz_all = np.empty_like(y_hat)
        for t in range(t_len - 1, -1, -1):
            dq_t = dq[:, span + t, pw : pw + w_f]
            dyt = dy[:, t]
            if flow_into_predictions:
                dyt = dyt + dq_t @ aff_w
            dz = self.cls.activation_backward(y_hat[:, t], dyt)
            dz_all[:, t] = dz
            do = (dz @ cls_w).reshape(n, k_o, w_f)
            do_all[:, t] = do
            if kh > 1:
                dwin = np.einsum("now,okj->nkwj", do, wq)
                rows = t + taps
                for j in range(kw):
                    dq[:, rows, j : j + w_f] += dwin[..., j]

        dq_rows = dq[:, span:, pw : pw + w_f]  # N, T, W_f
        self.params_grads_from(src, dq_rows, dz_all, o_flat)

        if kh > 1:
            gq = np.zeros((k_o, kh - 1, kw))
            for k, off in enumerate(taps):
                win = sliding_window_view(qpad[:, off : off + t_len], kw, axis=2)  # N, T, W_f, K_w
                gq[:, k] = np.einsum("ntwj,ntow->oj", win, do_all)
            self.grads["weight"][:, 1, : kh - 1] += gq
        do_conv = np.ascontiguousarray(do_all.transpose(0, 2, 1, 3))
        gw0, dhp = L.conv_taps_backward(hp, w[:, :1], (xi, 1), do_conv)
        self.grads["weight"][:, :1] += gw0
        self.grads["bias"] += do_conv.sum(axis=(0, 2, 3))
        dh = dhp[:, 0, span:, pw : pw + w_f]
        return dh[0] if squeeze else dh

    def params_grads_from(self, src, dq_rows, dz_all, o_flat):
        c = src.shape[-1]
        self.grads["aff_weight"] += dq_rows.reshape(-1, dq_rows.shape[-1]).T @ src.reshape(-1, c)
        self.grads["aff_bias"] += dq_rows.sum(axis=(0, 1))
        self.cls.grads["weight"] += dz_all.reshape(-1, c).T @ o_flat.reshape(-1, o_flat.shape[-1])
        self.cls.grads["bias"] += dz_all.sum(axis=(0, 1))


class SEDModel:
    """DWS stack plus a conditioned (default) or baseline time-dilated head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        init_rng = np.random.default_rng([seed, 0])
        drop_rng = np.random.default_rng([seed, 1])
        self.stack = DWSStack(cfg, init_rng, drop_rng)
        self.head = CDCNNHead(cfg, init_rng) if cfg.conditioning else DCNNHead(cfg, init_rng)
        self.training = True

    def named_layers(self) -> Iterator[tuple[str, L.Layer]]:
        for name, layer in self.stack.named_layers():
            yield f"stack.{name}", layer
        for name, layer in self.head.named_layers():
            yield f"head.{name}", layer

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers() for pn, p in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": g for ln, layer in self.named_layers() for pn, g in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for ln, layer in self.named_layers():
            if isinstance(layer, L.BatchNorm2d):
                for bn, b in layer.buffers().items():
                    out[f"{ln}.{bn}"] = b
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.parameters()) | set(self.buffers())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for ln, layer in self.named_layers():
            for pn, p in layer.params.items():
                v = state[f"{ln}.{pn}"]
                if v.shape != p.shape:
                    raise DimensionError(f"{ln}.{pn}: checkpoint shape {v.shape} vs model {p.shape}")
                p[...] = v
            if isinstance(layer, L.BatchNorm2d):
                layer.running_mean = state[f"{ln}.running_mean"].copy()
                layer.running_var = state[f"{ln}.running_var"].copy()

    def train(self, mode: bool = True) -> None:
        self.training = mode
        for _, layer in self.named_layers():
            layer.train(mode)

    def eval(self) -> None:
        self.train(False)

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def forward(self, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        return self.head.forward(self.stack.forward(x), y)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.stack.backward(self.head.backward(dy))

    def predict(self, x: np.ndarray) -> np.ndarray:
        was = self.training
        self.eval()
        out = self.forward(x)
        self.train(was)
        return out


# --- parameter counting ------------------------------------------------------

def dws_vs_standard(c_in: int, c_out: int, kh: int, kw: int) -> dict:
    """Bias-free parameter counts of a depthwise separable conv and the standard conv it replaces."""
    depthwise = c_in * kh * kw
    pointwise = c_out * c_in
    standard = c_out * c_in * kh * kw
    return {
        "depthwise": depthwise,
        "pointwise": pointwise,
        "dws": depthwise + pointwise,
        "standard": standard,
        "ratio": Fraction(depthwise + pointwise, standard),
    }


def param_count(cfg: ModelConfig) -> dict:
    model = SEDModel(cfg)
    counts: dict[str, int] = {}
    for name, p in model.parameters().items():
        key = ".".join(name.split(".")[:2])
        if name.startswith("head.cdcnn.aff_"):
            key = "head.aff"
        counts[key] = counts.get(key, 0) + p.size
    counts["total"] = sum(p.size for p in model.parameters().values())
    c_prev = 1
    dws = standard = 0
    for c in cfg.channels:
        d = dws_vs_standard(c_prev, c, *cfg.depthwise_kernel)
        dws += d["dws"]
        standard += d["standard"]
        c_prev = c
    counts["dws_conv_params"] = dws
    counts["standard_conv_params"] = standard
    return counts


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DLCK"


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    """Manifest (config echo + tensor index) followed by concatenated ``DLC1`` tensors."""
    names = sorted(state)
    manifest = {"config": config, "meta": meta or {},
                "tensors": [{"name": k, "shape": list(state[k].shape)} for k in names]}
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in names:
            write_tensor(f, state[k])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(n))
        state = {}
        for entry in manifest["tensors"]:
            x = read_tensor(f)
            if list(x.shape) != entry["shape"]:
                raise ValueError(f"{path}: tensor {entry['name']} shape does not match manifest")
            state[entry["name"]] = x
    return state, manifest["config"], manifest.get("meta", {})
