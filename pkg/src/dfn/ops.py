"""Differentiable primitives over NCHW feature maps.

Each function computes its forward result with numpy and registers a backward
closure through :func:`dfn.tensor.make_result`. No op mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, DimensionError, StatisticsError
from .tensor import Tensor, make_result


def _check_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D [N,C,H,W], got shape {x.shape}")


def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        before, after = (int(p) for p in padding)
    else:
        before = after = int(padding)
    if before < 0 or after < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    return before, after


def conv_output_size(size: int, k: int, stride: int, padding) -> int:
    before, after = _pads(padding)
    span = size + before + after - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"convolution output size ({size} + {before + after} - {k})/{stride} + 1 is not a positive integer"
        )
    return span // stride + 1


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``padding`` is either one int applied on all four sides or a
    ``(before, after)`` pair applied to both spatial axes; the pair form lets a
    stride-2 3x3 kernel halve an even-sized map exactly.
    """
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d kernel")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    n, cin, h, wd = x.shape
    cout, kcin, kh, kw = w.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 1 has {cin}, kernel axis 1 has {kcin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias axis 0 has {b.shape}, expected ({cout},) to match kernel axis 0")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    before, after = _pads(padding)

    xd = x.data
    if before or after:
        xd = np.pad(xd, ((0, 0), (0, 0), (before, after), (before, after)))
    hp, wp = xd.shape[2], xd.shape[3]
    # columns are laid out [cin*kh*kw, n*ho*wo] so the copy walks contiguous rows
    if kh == 1 and kw == 1:
        sub = xd[:, :, : stride * ho : stride, : stride * wo : stride]
        cols = sub.transpose(1, 0, 2, 3).reshape(cin, n * ho * wo)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            w_t = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
            gcols = (w_t @ g2).reshape(kh, kw, cin, n, ho, wo)
            gxp = np.zeros((cin, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
            gx = gxp[:, :, before : hp - after, before : wp - after].transpose(1, 0, 2, 3)
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_result(out, inputs, "conv2d", backward)


# ---------------------------------------------------------------------------
# resampling


def max_pool(x: Tensor, factor: int) -> Tensor:
    """Max-pooling with window == stride == ``factor``.

    Backward routes each window's gradient to its first maximal cell in
    row-major order.
    """
    _check_4d(x, "max_pool input")
    if factor < 1:
        raise ConfigurationError(f"pool factor must be positive, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ConfigurationError(f"spatial size {h}x{w} is not divisible by pool factor {factor}")
    ho, wo = h // factor, w // factor
    win = x.data.reshape(n, c, ho, factor, wo, factor).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, factor * factor), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, factor, factor).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), "max_pool", backward)


pool_or_stride_down = max_pool


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Rows of linear interpolation weights, half-pixel-centre convention.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid range. The returned array is shared and read-only.
    """
    return _interp_matrix(n_in, n_out, np.dtype(dtype))


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype: np.dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.flags.writeable = False
    return m


def _resize(x: Tensor, out_h: int, out_w: int, kind: str) -> Tensor:
    _check_4d(x, f"{kind} input")
    h, w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (h, w):
        return identity(x)
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return make_result(out, (x,), kind, backward)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align-corners false)."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    return _resize(x, x.shape[2] * factor, x.shape[3] * factor, "upsample_bilinear")


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to an arbitrary size with the same convention."""
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resize target must be positive, got {out_h}x{out_w}")
    return _resize(x, out_h, out_w, "resize_bilinear")


def identity(x: Tensor) -> Tensor:
    return make_result(x.data.copy(), (x,), "identity", lambda g: (g,))


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool input")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError(f"global_avg_pool needs non-empty spatial axes, got {h}x{w}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result(out, (x,), "global_avg_pool", backward)


def expand_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a [N,C,1,1] tensor over an h x w grid."""
    _check_4d(x, "expand_spatial input")
    if x.shape[2:] != (1, 1):
        raise DimensionError(f"expand_spatial needs 1x1 spatial axes, got {x.shape[2:]}")
    out = np.broadcast_to(x.data, x.shape[:2] + (h, w)).copy()
    return make_result(out, (x,), "expand_spatial", lambda g: (g.sum(axis=(2, 3), keepdims=True),))


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_result(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1, max-subtracted for stability."""
    if x.ndim < 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_channels needs a non-empty channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), "softmax_channels", backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_pair(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise DimensionError(f"{kind}: rank mismatch {a.shape} vs {b.shape}")
    for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
        if da != db and 1 not in (da, db):
            raise DimensionError(f"{kind}: axis {axis} mismatch {da} vs {db} (shapes {a.shape}, {b.shape})")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; size-1 axes broadcast (e.g. a [N,C,1,1] bias over H,W)."""
    _broadcast_pair(a, b, "add")
    out = a.data + b.data
    return make_result(out, (a, b), "add", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), "mul", backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = x.dtype.type(c)
    return make_result(x.data * c, (x,), "scale", lambda g: (g * c,))


def channel_scale(x: Tensor, alpha: Tensor) -> Tensor:
    """``out[n,c,h,w] = alpha[n,c,0,0] * x[n,c,h,w]``."""
    _check_4d(x, "channel_scale input")
    if alpha.shape != x.shape[:2] + (1, 1):
        raise DimensionError(f"channel_scale: alpha shape {alpha.shape} does not match x channels {x.shape[:2]}")
    out = x.data * alpha.data

    def backward(g):
        return g * alpha.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return make_result(out, (x, alpha), "channel_scale", backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels a")
    _check_4d(b, "concat_channels b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise DimensionError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), "concat_channels", lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    return make_result(
        np.asarray(x.data.mean()), (x,), "mean", lambda g: (np.broadcast_to(g / size, x.shape).copy(),)
    )


def average(terms: list[Tensor]) -> Tensor:
    """Arithmetic mean of same-shaped tensors."""
    if not terms:
        raise DimensionError("average of an empty list")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total if len(terms) == 1 else scale(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = field(default=0)

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    momentum_bn: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and updates ``stats`` in place with an
    exponential moving average (unbiased variance); eval mode uses ``stats``.
    """
    _check_4d(x, "batch_norm input")
    if eps <= 0:
        raise ConfigurationError(f"eps must be positive, got {eps}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    shape = (1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var.astype(x.dtype) + eps)
        xhat = (x.data - stats.mean.astype(x.dtype).reshape(shape)) * inv.reshape(shape)
    elif mode == "train":
        m = n * h * w
        if m < 2:
            raise StatisticsError(f"batch_norm in train mode needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        stats.mean = ((1 - momentum_bn) * stats.mean + momentum_bn * mu).astype(stats.mean.dtype)
        stats.var = ((1 - momentum_bn) * stats.var + momentum_bn * var * (m / (m - 1))).astype(stats.var.dtype)
        stats.count += 1
    else:
        raise ConfigurationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if mode == "eval":
            gx = dxhat * inv.reshape(shape)
        else:
            m = n * h * w
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), "batch_norm", backward)
