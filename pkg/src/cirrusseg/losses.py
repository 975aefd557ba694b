"""Focal loss, the quartile-gated super-majority loss, and the six-head
training objective.

Consensus targets y in [0, 1] are gated into quartile bands: confident
positives (y >= 0.75) get a boosted focal loss against a hard 1 target,
majority positives (0.5 <= y < 0.75) an unboosted one, uncertain pixels
(0.25 < y < 0.5) are ignored entirely (zero loss and zero gradient), and the
rest (y <= 0.25) are trained as hard negatives.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass
class LossConfig:
    boost: float = 1.25          # multiplier for super-majority pixels
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    soft_targets: bool = False   # use y itself inside each band instead of hard 0/1


def focal_loss(logits: Tensor, targets: Tensor, gamma=2.0, alpha=0.25) -> Tensor:
    """Per-element -alpha * (1 - p_t)^gamma * log(p_t) with hard targets.

    ``alpha`` weights positives and negatives alike, so gamma=0 reduces to
    alpha-scaled binary cross-entropy. Uses log-sigmoid throughout; finite
    logits always yield finite loss.
    """
    targets = targets.to(logits.dtype)
    # log p_t and (1 - p_t) for both target values, assembled by selection
    log_pt = torch.where(targets > 0.5, F.logsigmoid(logits), F.logsigmoid(-logits))
    one_minus_pt = torch.where(targets > 0.5, torch.sigmoid(-logits), torch.sigmoid(logits))
    return -alpha * one_minus_pt.pow(gamma) * log_pt


def focal_loss_soft(logits: Tensor, targets: Tensor, gamma=2.0, alpha=0.25) -> Tensor:
    """Soft-label focal loss: each class term is focal-weighted separately."""
    p = torch.sigmoid(logits)
    pos = (1 - p).pow(gamma) * targets * F.logsigmoid(logits)
    neg = p.pow(gamma) * (1 - targets) * F.logsigmoid(-logits)
    return -alpha * (pos + neg)


def quartile_bands(consensus: Tensor):
    """Boolean masks (super_majority, majority, ignored, negative).

    Boundaries follow the gating inequalities literally: y = 0.75 is
    super-majority, y = 0.5 majority, y = 0.25 negative.
    """
    super_majority = consensus >= 0.75
    majority = (consensus >= 0.5) & (consensus < 0.75)
    ignored = (consensus > 0.25) & (consensus < 0.5)
    negative = consensus <= 0.25
    return super_majority, majority, ignored, negative


def super_majority_loss(logits: Tensor, consensus: Tensor,
                        config: LossConfig | None = None) -> Tensor:
    """Per-pixel quartile-gated focal loss against consensus targets."""
    if config is None:
        config = LossConfig()
    if consensus.min() < 0 or consensus.max() > 1:
        raise ValueError("consensus values must lie in [0, 1]")
    gamma, alpha = config.focal_gamma, config.focal_alpha
    super_majority, majority, ignored, negative = quartile_bands(consensus)

    if config.soft_targets:
        pos_loss = focal_loss_soft(logits, consensus, gamma, alpha)
        neg_loss = pos_loss
    else:
        pos_loss = focal_loss(logits, torch.ones_like(consensus), gamma, alpha)
        neg_loss = focal_loss(logits, torch.zeros_like(consensus), gamma, alpha)

    loss = torch.zeros_like(pos_loss)
    loss = torch.where(super_majority, config.boost * pos_loss, loss)
    loss = torch.where(majority, pos_loss, loss)
    loss = torch.where(negative, neg_loss, loss)
    return loss


def total_loss(outputs, consensus: Tensor, config: LossConfig | None = None) -> Tensor:
    """Sum over the six heads of the mean per-valid-pixel super-majority loss.

    Valid pixels are those outside the ignored band. If the whole target is
    ignored the loss is zero (with a warning).
    """
    if config is None:
        config = LossConfig()
    _, _, ignored, _ = quartile_bands(consensus)
    valid = (~ignored).to(consensus.dtype)
    n_valid = valid.sum()
    logits_maps = outputs.all_logits()
    if len(logits_maps) != 6:
        raise ValueError(f"expected six logits maps, got {len(logits_maps)}")
    if n_valid == 0:
        warnings.warn("all target pixels fall in the ignored consensus band; loss is 0")
        return logits_maps[0].sum() * 0.0
    total = logits_maps[0].new_zeros(())
    for logits in logits_maps:
        per_pixel = super_majority_loss(logits, consensus, config)
        total = total + (per_pixel * valid).sum() / n_valid
    return total


def rounded_focal_loss(outputs, consensus: Tensor, config: LossConfig | None = None) -> Tensor:
    """Baseline objective: plain focal loss on consensus rounded at 0.5,
    summed over the six heads. No ignore band, no boost."""
    if config is None:
        config = LossConfig()
    hard = (consensus >= 0.5).to(consensus.dtype)
    logits_maps = outputs.all_logits()
    total = logits_maps[0].new_zeros(())
    for logits in logits_maps:
        total = total + focal_loss(logits, hard, config.focal_gamma,
                                   config.focal_alpha).mean()
    return total
