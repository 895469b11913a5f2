"""Segmentation, boundary and combined training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import ops
from .errors import ConfigurationError, DataError
from .tensor import Tensor, make_result

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.1
    gamma: float = 2.0
    alpha_f: float = 0.75
    ignore_label: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigurationError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not 0 < self.alpha_f <= 1:
            raise ConfigurationError(f"alpha_f must lie in (0, 1], got {self.alpha_f}")


def softmax_ce(scores: Tensor, labels: np.ndarray, ignore_label: int | None = None) -> Tensor:
    """Mean per-pixel softmax cross-entropy over non-ignored pixels.

    ``scores`` is [N,K,H,W]; ``labels`` is an integer array [N,H,W].
    """
    n, k, h, w = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DataError(f"labels shape {labels.shape} does not match scores {(n, h, w)}")
    valid = np.ones(labels.shape, bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[idx])} at pixel (n,h,w)={idx} is outside [0,{k})")
    count = int(valid.sum())
    y = scores.data
    zmax = y.max(axis=1, keepdims=True)
    e = np.exp(y - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = (np.log(se) + zmax)[:, 0]
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(y, safe[:, None], axis=1)[:, 0]
    per_pixel = np.where(valid, lse - picked, 0)
    loss = per_pixel.sum() / max(count, 1)

    def backward(g):
        grad = e / se
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None]
        return (grad * (g / max(count, 1)),)

    return make_result(np.asarray(loss, dtype=y.dtype), (scores,), "softmax_ce", backward)


def focal_loss(border_logits: Tensor, boundary: np.ndarray, gamma: float = 2.0, alpha_f: float = 0.75) -> Tensor:
    """Binary focal loss averaged over all pixels.

    Boundary pixels contribute ``alpha_f * (1-p)^gamma * -log(p)`` and the rest
    ``(1-alpha_f) * p^gamma * -log(1-p)`` where ``p = sigmoid(logit)`` clamped
    to ``[1e-7, 1 - 1e-7]``. Computed in float64 internally.
    """
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    n, c, h, w = border_logits.shape
    if c != 1:
        raise DataError(f"border logits need one channel, got {c}")
    target = np.asarray(boundary).reshape(n, 1, h, w).astype(bool)
    z = border_logits.data.astype(np.float64)
    raw = expit(z)
    p = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1 - PROB_CLAMP)
    q = 1.0 - p
    pos = alpha_f * q**gamma * -np.log(p)
    neg = (1.0 - alpha_f) * p**gamma * -np.log(q)
    per_pixel = np.where(target, pos, neg)
    size = per_pixel.size

    def backward(g):
        dpos = alpha_f * (gamma * q ** (gamma - 1) * np.log(p) - q**gamma / p)
        dneg = (1.0 - alpha_f) * (-gamma * p ** (gamma - 1) * np.log(q) + p**gamma / q)
        dp = np.where(target, dpos, dneg)
        dz = dp * raw * (1 - raw) * inside
        return ((dz * (float(g) / size)).astype(border_logits.dtype),)

    loss = np.asarray(per_pixel.mean(), dtype=border_logits.dtype)
    return make_result(loss, (border_logits,), "focal_loss", backward)


def combined_loss(output, labels: np.ndarray, boundary: np.ndarray, cfg: LossConfig, model_cfg):
    """``L = l_s + lambda * l_b`` with deep supervision over the seg stages.

    ``l_s`` averages the stage losses over every score map when ``use_ds`` is on
    (only the final map otherwise); the global-pooling branch never has its own
    head. ``l_b`` averages the focal loss over the border maps, or is 0 without
    a Border Network. Returns ``(L, l_s, l_b)``.
    """
    supervised = output.seg_scores if model_cfg.use_ds else [output.seg_final]
    l_s = ops.average([softmax_ce(s, labels, cfg.ignore_label) for s in supervised])
    if model_cfg.use_border and output.border_scores:
        l_b = ops.average([focal_loss(b, boundary, cfg.gamma, cfg.alpha_f) for b in output.border_scores])
        total = ops.add(l_s, ops.scale(l_b, cfg.lam))
    else:
        l_b = Tensor(np.zeros((), dtype=l_s.dtype))
        total = l_s
    return total, l_s, l_b
