"""Hand-branch losses, heatmap decoding and the combined training objective.

The object-branch terms (``p2d_loss``, ``conf_loss``) live in
:mod:`handobj.object_pose` next to the grid decoding they share.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NotNormalized

HEATMAP_WEIGHT = 0.1
P2D_WEIGHT = 0.5
CONF_WEIGHT = 0.1
HEATMAP_SIZE = 32


def soft_argmax_joints(heatmaps, tol=1e-6):
    """Expected ``(x, y)`` pixel coordinate per channel of an ``(H, W, J)`` heatmap stack.

    Each channel must already be a distribution (non-negative, unit sum).
    """
    h = np.asarray(heatmaps, dtype=np.float64)
    if h.ndim != 3:
        raise DimensionMismatch(f"heatmaps must be (H, W, J), got {h.shape}")
    if np.any(h < 0):
        raise NotNormalized("heatmaps contain negative values")
    sums = h.sum(axis=(0, 1))
    if np.any(np.abs(sums - 1.0) > tol):
        raise NotNormalized(f"heatmap channels must sum to 1, got {sums.min():.6g}..{sums.max():.6g}")
    ys, xs = np.arange(h.shape[0]), np.arange(h.shape[1])
    x = np.einsum("hwj,w->j", h, xs.astype(float))
    y = np.einsum("hwj,h->j", h, ys.astype(float))
    return np.column_stack([x, y])


def gaussian_heatmaps(points, size=HEATMAP_SIZE, sigma=1.0):
    """Unit-sum Gaussian targets centred at ``points`` (``(J, 2)`` as x, y)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    d2 = (xs[..., None] - pts[:, 0]) ** 2 + (ys[..., None] - pts[:, 1]) ** 2
    h = np.exp(-0.5 * d2 / sigma**2)
    return h / h.sum(axis=(0, 1))


def heatmap_loss(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.sum((pred - gt) ** 2))


MANO_TERMS = ("theta", "beta", "j3d", "vertices")


def mano_loss(pred, gt):
    """Sum of squared L2 distances over theta, beta, 3D joints and vertices.

    ``pred`` and ``gt`` are mappings with those four keys (or 4-tuples in that order).
    """
    if not isinstance(pred, dict):
        pred = dict(zip(MANO_TERMS, pred))
    if not isinstance(gt, dict):
        gt = dict(zip(MANO_TERMS, gt))
    total = 0.0
    for key in MANO_TERMS:
        a = np.asarray(pred[key], dtype=np.float64)
        b = np.asarray(gt[key], dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionMismatch(f"{key}: {a.shape} vs {b.shape}")
        total += float(np.sum((a - b) ** 2))
    return total


def hand_loss(heatmap_term, mano_term, heatmap_weight=HEATMAP_WEIGHT):
    return heatmap_weight * heatmap_term + mano_term


def object_loss(p2d_term, conf_term, p2d_weight=P2D_WEIGHT, conf_weight=CONF_WEIGHT):
    return p2d_weight * p2d_term + conf_weight * conf_term


def masked_total_loss(hand, obj, has_object_labels):
    """Object term only counts on samples that carry object annotations."""
    return hand + (obj if has_object_labels else 0.0)
