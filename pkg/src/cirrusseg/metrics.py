"""Segmentation metrics: IoU, Dice, and the coverage-histogram KL divergence.

Targets are consensus maps: pixels with y >= 0.5 count as positive, pixels in
the uncertain band (0.25, 0.5) are excluded from both numerator and
denominator, the rest are negative. Predictions are probabilities binarized
at a threshold.
"""

import math

import numpy as np
import torch
from torch import Tensor


def _to_tensor(x):
    return x if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x))


def _binarize(pred, target, threshold):
    pred = _to_tensor(pred)
    target = _to_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    valid = ~((target > 0.25) & (target < 0.5))
    p = (pred > threshold) & valid
    t = (target >= 0.5) & valid
    return p, t


def iou(pred, target, threshold=0.5) -> float:
    """|P & T| / |P | T| over valid pixels; 1.0 when both masks are empty."""
    p, t = _binarize(pred, target, threshold)
    union = (p | t).sum().item()
    if union == 0:
        return 1.0
    return (p & t).sum().item() / union


def dice(pred, target, threshold=0.5) -> float:
    """2 |P & T| / (|P| + |T|) over valid pixels; 1.0 when both are empty."""
    p, t = _binarize(pred, target, threshold)
    denom = p.sum().item() + t.sum().item()
    if denom == 0:
        return 1.0
    return 2.0 * (p & t).sum().item() / denom


def prediction_coverage(pred, threshold=0.5) -> float:
    p = _to_tensor(pred)
    return (p > threshold).float().mean().item()


def target_coverage(target) -> float:
    t = _to_tensor(target)
    return (t >= 0.5).float().mean().item()


def coverage_histogram(coverages, bins=10, eps=1e-6):
    """Smoothed probability histogram of per-image coverage fractions."""
    counts, _ = np.histogram(np.asarray(coverages, dtype=np.float64),
                             bins=bins, range=(0.0, 1.0))
    smoothed = counts.astype(np.float64) + eps
    return smoothed / smoothed.sum()


def coverage_kl(pred_masks, target_masks, bins=10, threshold=0.5, eps=1e-6) -> float:
    """KL(target coverage histogram || predicted coverage histogram).

    Per-image coverage is the positive-pixel fraction; histograms use
    ``bins`` equal-width bins on [0, 1] with additive smoothing ``eps``.
    """
    pred_masks = list(pred_masks)
    target_masks = list(target_masks)
    if not pred_masks or len(pred_masks) != len(target_masks):
        raise ValueError("need equal, non-zero numbers of prediction and target masks")
    pred_cov = [prediction_coverage(p, threshold) for p in pred_masks]
    target_cov = [target_coverage(t) for t in target_masks]
    p_hist = coverage_histogram(pred_cov, bins=bins, eps=eps)
    t_hist = coverage_histogram(target_cov, bins=bins, eps=eps)
    return float(np.sum(t_hist * np.log(t_hist / p_hist)))
