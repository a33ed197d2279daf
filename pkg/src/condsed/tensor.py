"""Dense float64 array primitives: convolution (direct and im2col), matmul, and
the ``DLC1`` binary tensor format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Convolutions use the cross-correlation convention (kernels are not flipped)
with unit stride and explicit ``(top, bottom, left, right)`` zero padding.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"DLC1"

Pad = tuple[int, int, int, int]


class DimensionError(ValueError):
    """Raised when tensor shapes disagree along a named axis."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces inf/nan."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _check_conv_args(x, k, dilation_h, dilation_w, pad):
    if x.ndim != 3:
        raise DimensionError(f"input must be C_in x H x W, got rank {x.ndim}")
    if k.ndim != 4:
        raise DimensionError(f"kernels must be C_out x C_in x K_h x K_w, got rank {k.ndim}")
    if x.shape[0] != k.shape[1]:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[0]} channels, kernels expect {k.shape[1]}"
        )
    if dilation_h < 1 or dilation_w < 1:
        raise ValueError("dilation must be a positive integer")
    top, bottom, left, right = pad
    if min(pad) < 0:
        raise ValueError("padding must be non-negative")
    _, h, w = x.shape
    _, _, kh, kw = k.shape
    span_h = dilation_h * (kh - 1) + 1
    span_w = dilation_w * (kw - 1) + 1
    if h + top + bottom < span_h:
        raise DimensionError(f"height axis too short: padded {h + top + bottom} < kernel span {span_h}")
    if w + left + right < span_w:
        raise DimensionError(f"width axis too short: padded {w + left + right} < kernel span {span_w}")
    return h + top + bottom - (span_h - 1), w + left + right - (span_w - 1)


def pad3(x: np.ndarray, pad: Pad) -> np.ndarray:
    top, bottom, left, right = pad
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right)))


def conv2d(
    x: np.ndarray,
    kernels: np.ndarray,
    dilation_h: int = 1,
    dilation_w: int = 1,
    pad: Pad = (0, 0, 0, 0),
) -> np.ndarray:
    """Direct 2D cross-correlation.

    ``out[o, i, j] = sum_{c, a, b} xpad[c, i + dilation_h*a, j + dilation_w*b] * k[o, c, a, b]``

    Taps are accumulated in fixed order (a, b ascending), each tap contracting
    over input channels, so every output element is computed from its own
    receptive field only.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    h_out, w_out = _check_conv_args(x, kernels, dilation_h, dilation_w, pad)
    xp = pad3(x, pad)
    c_out, _, kh, kw = kernels.shape
    out = np.zeros((c_out, h_out, w_out))
    for a in range(kh):
        r0 = a * dilation_h
        for b in range(kw):
            c0 = b * dilation_w
            patch = xp[:, r0 : r0 + h_out, c0 : c0 + w_out]
            out += np.tensordot(kernels[:, :, a, b], patch, axes=(1, 0))
    return out


def im2col(xp: np.ndarray, kh: int, kw: int, dilation_h: int, dilation_w: int,
           h_out: int, w_out: int) -> np.ndarray:
    """Columns of shape (C_in*K_h*K_w, H_out*W_out) from an already padded input."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, h_out, w_out))
    for a in range(kh):
        r0 = a * dilation_h
        for b in range(kw):
            c0 = b * dilation_w
            cols[:, a, b] = xp[:, r0 : r0 + h_out, c0 : c0 + w_out]
    return cols.reshape(c * kh * kw, h_out * w_out)


def conv2d_im2col(
    x: np.ndarray,
    kernels: np.ndarray,
    dilation_h: int = 1,
    dilation_w: int = 1,
    pad: Pad = (0, 0, 0, 0),
) -> np.ndarray:
    """Same contract as :func:`conv2d`, computed as one GEMM over unfolded columns."""
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    h_out, w_out = _check_conv_args(x, kernels, dilation_h, dilation_w, pad)
    c_out, c_in, kh, kw = kernels.shape
    cols = im2col(pad3(x, pad), kh, kw, dilation_h, dilation_w, h_out, w_out)
    out = kernels.reshape(c_out, c_in * kh * kw) @ cols
    return out.reshape(c_out, h_out, w_out)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    return a @ b


# --- serialization -------------------------------------------------------

def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = as_tensor(x)
    f.write(MAGIC)
    f.write(struct.pack("<I", x.ndim))
    f.write(struct.pack(f"<{x.ndim}I", *x.shape))
    f.write(x.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    n = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor data")
    return buf


def tensor_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def shape_size(shape: Sequence[int]) -> int:
    return int(np.prod(shape, dtype=np.int64))
