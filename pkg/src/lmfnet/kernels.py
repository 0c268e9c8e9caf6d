"""Differentiable CPU kernels with hand-written backward passes.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Arrays are dense ``(n, c, h, w)``
numpy arrays in C order; there is no wrapper tensor type.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class GateTrace:
    """Records or replays the discrete choices of ReLU and max pooling.

    In ``record`` mode each gate decision is appended in call order.  In
    ``replay`` mode the stored decisions are reused, so the forward pass
    becomes a smooth function of its inputs around the recorded point.
    """

    def __init__(self, mode: str = "record", gates=None):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown gate trace mode {mode!r}")
        self.mode = mode
        self.gates = list(gates) if gates is not None else []
        self._pos = 0

    def take(self, kind: str, compute):
        if self.mode == "record":
            g = compute()
            self.gates.append((kind, g))
            return g
        if self._pos >= len(self.gates):
            raise ShapeError("gate replay ran past the recorded trace")
        k, g = self.gates[self._pos]
        self._pos += 1
        if k != kind:
            raise ShapeError(f"gate replay expected {k}, forward asked for {kind}")
        return g

    def same_as(self, other: "GateTrace") -> bool:
        if len(self.gates) != len(other.gates):
            return False
        return all(ka == kb and np.array_equal(a, b) for (ka, a), (kb, b) in zip(self.gates, other.gates))


_TRACE: GateTrace | None = None


@contextmanager
def gate_trace(trace: GateTrace):
    global _TRACE
    prev, _TRACE = _TRACE, trace
    try:
        yield trace
    finally:
        _TRACE = prev


def _gate(kind: str, compute):
    if _TRACE is None:
        return compute()
    return _TRACE.take(kind, compute)


def _require_4d(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


@dataclass(frozen=True)
class ConvGeometry:
    kernel_size: int
    dilation: int = 1
    stride: int = 1
    padding: int | None = None  # None means "same" for stride 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be positive, got {self.dilation}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding is not None and self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    @property
    def pad(self) -> int:
        if self.padding is None:
            return self.dilation * (self.kernel_size - 1) // 2
        return self.padding

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        p, s = self.pad, self.stride
        ho = (h + 2 * p - self.span) // s + 1
        wo = (w + 2 * p - self.span) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo


# ---------------------------------------------------------------------------
# convolutions


def _tap_range(tap: int, pad: int, stride: int, size: int, out: int) -> tuple[slice, slice] | None:
    """Output and input slices where one kernel tap lands inside the unpadded input.

    Output index ``o`` reads input ``o * stride + tap - pad``; taps that only
    ever read padding are skipped, which is what makes large dilations on small
    maps cheap.
    """
    off = tap - pad
    lo = max(0, -(off // stride))
    hi = min(out, (size - 1 - off) // stride + 1) if size - 1 - off >= 0 else 0
    if hi <= lo:
        return None
    first = lo * stride + off
    return slice(lo, hi), slice(first, first + stride * (hi - lo - 1) + 1, stride)


def _depthwise_taps(shape, geom: ConvGeometry, ho: int, wo: int):
    _, _, h, wd = shape
    k, p, d, s = geom.kernel_size, geom.pad, geom.dilation, geom.stride
    for i in range(k):
        r = _tap_range(i * d, p, s, h, ho)
        if r is None:
            continue
        for j in range(k):
            c = _tap_range(j * d, p, s, wd, wo)
            if c is not None:
                yield i, j, r, c


def conv2d_depthwise(x: np.ndarray, w: np.ndarray, geom: ConvGeometry):
    """Per-channel dilated cross-correlation with zero padding.

    ``w`` has shape ``(c, 1, k, k)``.  Each tap is one shifted multiply-add
    over the part of the output it reaches, taken in a fixed order, so an
    output element sums its taps identically regardless of batch size.
    """
    _require_4d(x)
    n, c, h, wd = x.shape
    k = geom.kernel_size
    if w.shape != (c, 1, k, k):
        raise ShapeError(
            f"depthwise weight shape {w.shape} does not match input {x.shape} "
            f"(expected {(c, 1, k, k)})"
        )
    ho, wo = geom.output_size(h, wd)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, w))
    for i, j, (orow, irow), (ocol, icol) in _depthwise_taps(x.shape, geom, ho, wo):
        out[:, :, orow, ocol] += x[:, :, irow, icol] * w[:, 0, i, j][None, :, None, None]
    return out, (x, w, geom)


def conv2d_depthwise_backward(gout: np.ndarray, cache):
    x, w, geom = cache
    ho, wo = gout.shape[2:]
    dx = np.zeros(x.shape, dtype=np.result_type(gout, w))
    dw = np.zeros(w.shape, dtype=dx.dtype)
    for i, j, (orow, irow), (ocol, icol) in _depthwise_taps(x.shape, geom, ho, wo):
        g = gout[:, :, orow, ocol]
        dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, x[:, :, irow, icol])
        dx[:, :, irow, icol] += g * w[:, 0, i, j][None, :, None, None]
    return dx, dw


def conv2d_pointwise(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None):
    _require_4d(x)
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1:] != (c, 1, 1):
        raise ShapeError(
            f"pointwise weight shape {w.shape} does not match input {x.shape} "
            f"(expected (c_out, {c}, 1, 1))"
        )
    o = w.shape[0]
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {w.shape}")
    w2 = w.reshape(o, c)
    out = np.matmul(w2, x.reshape(n, c, h * wd)).reshape(n, o, h, wd)
    if bias is not None:
        out += bias[None, :, None, None]
    return out, (x, w2, bias is not None)


def conv2d_pointwise_backward(gout: np.ndarray, cache):
    x, w2, has_bias = cache
    n, c, h, wd = x.shape
    o = w2.shape[0]
    g = gout.reshape(n, o, h * wd)
    dw = np.tensordot(g, x.reshape(n, c, h * wd), axes=([0, 2], [0, 2])).reshape(o, c, 1, 1)
    dx = np.matmul(w2.T, g).reshape(n, c, h, wd)
    db = gout.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """Fully connected layer; ``w`` is ``(out, in)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear input {x.shape} does not match weight {w.shape}")
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(gout: np.ndarray, cache):
    x, w, has_bias = cache
    return gout @ w, gout.T @ x, (gout.sum(axis=0) if has_bias else None)


# ---------------------------------------------------------------------------
# resampling


def maxpool2(x: np.ndarray):
    """2x2 max pooling, stride 2.  Ties route to the first index in row-major window order."""
    _require_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = _gate("maxpool", lambda: win.argmax(axis=-1))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(gout: np.ndarray, cache):
    idx, shape = cache
    n, c, h, w = shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=gout.dtype)
    np.put_along_axis(dwin, idx[..., None], gout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix, align-corners=false.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped below at 0; the upper neighbour is clamped to the last index.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int):
    _require_4d(x)
    n, c, h, w = x.shape
    mh = interp_matrix(h, out_h).astype(x.dtype, copy=False)
    mw = interp_matrix(w, out_w).astype(x.dtype, copy=False)
    out = mh @ x @ mw.T
    return out, (mh, mw)


def resize_bilinear_backward(gout: np.ndarray, cache):
    mh, mw = cache
    return mh.T @ gout @ mw


def upsample_bilinear2(x: np.ndarray):
    _require_4d(x)
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


upsample_bilinear2_backward = resize_bilinear_backward


def resize_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize (no gradient; used for masks)."""
    h, w = x.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return x[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# normalisation and activations


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool,
              eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Batch norm over (n, h, w).  Updates the running buffers in place when training."""
    _require_4d(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params {gamma.shape}/{beta.shape} do not match input {x.shape}")
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError(f"batchnorm in train mode needs more than one value per channel, got {x.shape}")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
        xc = x - mean[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(gout, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = np.einsum("nchw,nchw->c", gout, xhat)
    dbeta = gout.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not training:
        return gout * scale, dgamma, dbeta
    count = gout.shape[0] * gout.shape[2] * gout.shape[3]
    dx = scale * (gout - (dbeta / count)[None, :, None, None]
                  - xhat * (dgamma / count)[None, :, None, None])
    return dx, dgamma, dbeta


def relu(x):
    mask = _gate("relu", lambda: x > 0)
    return x * mask, mask


def relu_backward(gout, mask):
    return gout * mask


def sigmoid(x):
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # strictly inside (0, 1) even where the exponential saturates
    fi = np.finfo(out.dtype)
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg)
    return out, out


def sigmoid_backward(gout, out):
    return gout * out * (1.0 - out)


def activation(x, kind: str):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(gout, cache, kind: str):
    if kind == "relu":
        return relu_backward(gout, cache)
    if kind == "sigmoid":
        return sigmoid_backward(gout, cache)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# channel concat


def concat_channels(xs):
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for x in xs:
        _require_4d(x)
    ref = xs[0].shape
    if any(x.shape[0] != ref[0] or x.shape[2:] != ref[2:] for x in xs):
        raise ShapeError(
            "concat_channels spatial/batch mismatch: " + ", ".join(str(x.shape) for x in xs)
        )
    sizes = [x.shape[1] for x in xs]
    if len(xs) == 1:
        return xs[0], sizes
    return np.concatenate(xs, axis=1), sizes


def split_channels(g, sizes):
    offsets = np.cumsum(sizes)[:-1]
    return np.split(g, offsets, axis=1)


def global_avg_pool(x):
    _require_4d(x)
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(gout, shape):
    n, c, h, w = shape
    return np.broadcast_to((gout / (h * w))[:, :, None, None], shape).copy()
