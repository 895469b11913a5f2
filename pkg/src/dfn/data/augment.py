"""Training-time augmentation: random scale, horizontal flip, mean subtraction."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..errors import ConfigurationError
from ..ops import interp_matrix
from .boundary import extract_boundary
from .synth import SampleRecord

TRAIN_SCALES = (0.5, 0.75, 1.0, 1.5, 1.75)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] (or [N,C,H,W]) array, half-pixel centres."""
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ah = interp_matrix(h, out_h, image.dtype)
    aw = interp_matrix(w, out_w, image.dtype)
    return ah @ image @ aw.T


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def _fit(arr: np.ndarray, h: int, w: int, fill) -> np.ndarray:
    """Centre-crop or pad the last two axes to (h, w)."""
    ah, aw = arr.shape[-2:]
    out = np.full(arr.shape[:-2] + (h, w), fill, dtype=arr.dtype)
    # source window (crop) and destination window (pad), per axis
    sy, dy, ny = (ah - h) // 2 if ah > h else 0, (h - ah) // 2 if h > ah else 0, min(ah, h)
    sx, dx, nx = (aw - w) // 2 if aw > w else 0, (w - aw) // 2 if w > aw else 0, min(aw, w)
    out[..., dy : dy + ny, dx : dx + nx] = arr[..., sy : sy + ny, sx : sx + nx]
    return out


def augment(
    sample: SampleRecord,
    rng: np.random.Generator,
    scales=TRAIN_SCALES,
    mean=(0.0, 0.0, 0.0),
    flip: bool | None = None,
    thickness: int = 1,
) -> SampleRecord:
    """Return an augmented copy of ``sample``.

    One scale is drawn uniformly from ``scales``; the image is resized
    bilinearly and labels by nearest neighbour, flipped horizontally with
    probability 0.5 (``flip`` forces the choice), mean-subtracted and then
    centre-cropped or zero-padded back to the original size. Padded pixels get
    label 0. The boundary is re-derived from the new labels.
    """
    if len(scales) == 0:
        raise ConfigurationError("augment needs at least one scale")
    _, h, w = sample.image.shape
    s = float(scales[int(rng.integers(len(scales)))])
    do_flip = bool(rng.random() < 0.5)
    if flip is not None:
        do_flip = flip
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    image = resize_image(sample.image, nh, nw)
    labels = resize_nearest(sample.labels, nh, nw)
    if do_flip:
        image = image[..., ::-1]
        labels = labels[..., ::-1]
    image = image - np.asarray(mean, dtype=image.dtype).reshape(3, 1, 1)
    image = _fit(image, h, w, 0.0).astype(np.float32)
    labels = _fit(labels, h, w, 0).astype(np.uint8)
    return replace(sample, image=image, labels=labels, boundary=extract_boundary(labels, thickness))


def hflip(sample: SampleRecord) -> SampleRecord:
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[..., ::-1]),
        labels=np.ascontiguousarray(sample.labels[..., ::-1]),
        boundary=np.ascontiguousarray(sample.boundary[..., ::-1]),
    )
