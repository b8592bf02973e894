"""
Segmentation loss and the composite objective.

The overall objective is ``L_seg + L_align + gamma * L_contrast``; with
``gamma = 0`` it reduces to the plain pixel-text alignment objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import torch.nn.functional as F
from torch import Tensor

from promptseg.core.constants import GAMMA, IGNORE_INDEX
from promptseg.utils.errors import AllIgnoredError, DimensionError, NonFiniteLossError


@dataclass(frozen=True)
class LossWeights:
    """
    :param gamma: Weight of the contrastive term, finite and ``>= 0``.
    """
    gamma: float = GAMMA

    def __post_init__(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


@dataclass
class LossBreakdown:
    """
    The three loss terms and their weighted total.

    Fields are scalar tensors so ``total`` can be backpropagated.
    """
    seg: Tensor
    align: Tensor
    contrast: Tensor
    gamma: float
    total: Tensor

    def as_record(self) -> Dict[str, float]:
        """
        Plain floats for the metrics log; ``total`` is recomputed from the
        logged parts so the record satisfies the weighted sum exactly.
        """
        seg, align, contrast = float(self.seg), float(self.align), float(self.contrast)
        return {
            "seg": seg,
            "align": align,
            "contrast": contrast,
            "gamma": self.gamma,
            "total": seg + align + self.gamma * contrast,
        }


def seg_loss(logits: Tensor, labels: Tensor, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """
    Mean softmax cross-entropy over non-ignored pixels.

    :param logits: ``(B, K, H, W)`` or ``(K, H, W)`` logits.
    :type logits: Tensor
    :param labels: ``(B, H, W)`` or ``(H, W)`` labels.
    :type labels: Tensor
    :param ignore_index: Label excluded from the mean.
    :type ignore_index: int
    :return: Scalar loss, ``>= 0``.
    :rtype: Tensor
    :raises DimensionError: If spatial sizes differ.
    :raises AllIgnoredError: If no pixel carries a real label.
    """
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if logits.shape[-2:] != labels.shape[-2:] or logits.shape[0] != labels.shape[0]:
        raise DimensionError((labels.shape[0], *labels.shape[-2:]),
                             (logits.shape[0], *logits.shape[-2:]), "logit size")
    if not bool((labels != ignore_index).any()):
        raise AllIgnoredError("Every pixel of the label map is ignored")
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_index)


def total_loss(seg: Tensor, align: Tensor, contrast: Tensor,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """
    Combine the loss terms.

    :param seg: Segmentation loss.
    :type seg: Tensor
    :param align: Alignment loss.
    :type align: Tensor
    :param contrast: Contrastive loss.
    :type contrast: Tensor
    :param weights: Balancing weights.
    :type weights: LossWeights
    :return: The breakdown, ``total = seg + align + gamma * contrast``.
    :rtype: LossBreakdown
    :raises NonFiniteLossError: If any part is NaN or infinite.
    """
    parts = {"seg": float(seg), "align": float(align), "contrast": float(contrast)}
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError(parts)

    total = seg + align + weights.gamma * contrast
    return LossBreakdown(seg, align, contrast, weights.gamma, total)
