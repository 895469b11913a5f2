"""Segmentation and boundary metrics plus multi-scale / flip inference."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import maximum_filter

from . import ops
from .data.augment import resize_image
from .errors import UsageError
from .model import DFN
from .tensor import Tensor, no_grad


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``M[i, j]`` counts pixels with ground truth ``i`` predicted as ``j``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, list[float]]:
    """Mean IoU over classes present in ground truth or prediction.

    Classes absent from both get ``nan`` in the per-class list and are left out
    of the mean.
    """
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = [float(t / u) if u > 0 else float("nan") for t, u in zip(tp, union)]
    present = [v for v in per_class if not np.isnan(v)]
    return (float(np.mean(present)) if present else float("nan")), per_class


def mean_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[float, list[float]]:
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes))


def _as_batch(images: np.ndarray) -> np.ndarray:
    return images[None] if images.ndim == 3 else images


def predict_scores(model: DFN, images: np.ndarray, batch_size: int = 16):
    """Eval-mode forward pass; returns (seg_final logits, border logits list) as arrays."""
    images = _as_batch(images)
    model.eval()
    seg, border = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = model(Tensor(images[i : i + batch_size].astype(model.dtype)))
            seg.append(out.seg_final.data)
            border.append([b.data for b in out.border_scores])
    seg_all = np.concatenate(seg)
    border_all = [np.concatenate([b[k] for b in border]) for k in range(len(border[0]))] if border and border[0] else []
    return seg_all, border_all


def predict_labels(model: DFN, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    seg, _ = predict_scores(model, images, batch_size)
    return seg.argmax(axis=1).astype(np.uint8)


def boundary_probability(border_logits: list[np.ndarray]) -> np.ndarray:
    """Boundary probability map [N,H,W] from the finest (stage-2) border head."""
    z = border_logits[0][:, 0].astype(np.float64)
    return 1.0 / (1.0 + np.exp(-z))


def snap32(size: float) -> int:
    return max(32, int(round(size / 32.0)) * 32)


def ms_flip_infer(model: DFN, image: np.ndarray, scales=(1.0,), use_flip: bool = False) -> np.ndarray:
    """Average softmax probabilities over input scales and horizontal flips.

    ``image`` is a normalised [3,H,W] or [N,3,H,W] array. Scaled inputs snap
    to multiples of 32; each probability map is resized back bilinearly.
    Returns probabilities shaped like the input batch: [K,H,W] or [N,K,H,W].
    """
    single = image.ndim == 3
    batch = _as_batch(image)
    h, w = batch.shape[-2:]
    maps = []
    model.eval()
    with no_grad():
        for s in scales:
            sh, sw = snap32(h * s), snap32(w * s)
            scaled = resize_image(batch, sh, sw) if (sh, sw) != (h, w) else batch
            variants = [False, True] if use_flip else [False]
            for flip in variants:
                x = scaled[..., ::-1] if flip else scaled
                out = model(Tensor(np.ascontiguousarray(x).astype(model.dtype)))
                probs = ops.softmax_channels(out.seg_final).data
                if flip:
                    probs = probs[..., ::-1]
                if probs.shape[-2:] != (h, w):
                    probs = resize_image(probs, h, w)
                maps.append(probs)
    avg = maps[0] if len(maps) == 1 else np.mean(maps, axis=0)
    avg = np.ascontiguousarray(avg)
    return avg[0] if single else avg


def boundary_counts(pred_prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5, tol_px: int = 1):
    """Raw matching counts (matched_pred, n_pred, matched_gt, n_gt) for one map or a batch."""
    pred_prob = np.asarray(pred_prob)
    gt = np.asarray(gt).astype(bool)
    if pred_prob.shape != gt.shape:
        raise UsageError(f"boundary maps differ in shape: {pred_prob.shape} vs {gt.shape}")
    pred = pred_prob >= threshold
    size = (1,) * (pred.ndim - 2) + (2 * tol_px + 1, 2 * tol_px + 1)
    near_gt = maximum_filter(gt, size=size, mode="constant", cval=False) if tol_px else gt
    near_pred = maximum_filter(pred, size=size, mode="constant", cval=False) if tol_px else pred
    return int((pred & near_gt).sum()), int(pred.sum()), int((gt & near_pred).sum()), int(gt.sum())


def f_from_counts(tp_p: int, n_pred: int, tp_r: int, n_gt: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    precision = tp_p / n_pred if n_pred else 0.0
    recall = tp_r / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def boundary_f_score(pred_prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5, tol_px: int = 1):
    """Precision, recall and F1 of a thresholded boundary map.

    A predicted pixel counts as correct if a ground-truth boundary pixel lies
    within Chebyshev distance ``tol_px``; recall is the symmetric quantity.
    Batches pool their counts before the ratios are taken.
    """
    if not 0 < threshold < 1:
        raise UsageError(f"threshold must lie in (0, 1), got {threshold}")
    return f_from_counts(*boundary_counts(pred_prob, gt, threshold, tol_px))
