"""Semantic boundary extraction from label maps."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError


def _dilate4(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[..., 1:, :] |= mask[..., :-1, :]
    out[..., :-1, :] |= mask[..., 1:, :]
    out[..., :, 1:] |= mask[..., :, :-1]
    out[..., :, :-1] |= mask[..., :, 1:]
    return out


def extract_boundary(labels: np.ndarray, thickness: int = 1) -> np.ndarray:
    """Mark pixels whose class differs from any in-bounds 4-neighbour.

    The mask is then grown ``thickness - 1`` times with a 4-neighbour cross.
    Works on a single [H,W] map or a batch [..., H, W]; returns uint8 {0,1}.
    """
    if thickness < 1:
        raise ConfigurationError(f"boundary thickness must be >= 1, got {thickness}")
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    dv = labels[..., 1:, :] != labels[..., :-1, :]
    edge[..., 1:, :] |= dv
    edge[..., :-1, :] |= dv
    dh = labels[..., :, 1:] != labels[..., :, :-1]
    edge[..., :, 1:] |= dh
    edge[..., :, :-1] |= dh
    for _ in range(thickness - 1):
        edge = _dilate4(edge)
    return edge.astype(np.uint8)
