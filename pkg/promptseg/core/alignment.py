"""
Dense pixel-text alignment.

Every pixel embedding is scored against every class embedding, giving a
``(B, K, H, W)`` alignment map. The multi-scale variant builds maps at
strides 32, 16, 8 and 4 with learned 2x transposed convolutions:

* ``A32 = I . T``
* ``A16 = Up2(I) . T``
* ``A8  = Up4(A32) + Up2(A16)``
* ``A4  = Up8(A32) + Up4(A16) + Up2(A8)``

where ``I`` is the stride-32 feature map.
"""

from __future__ import annotations

import math
from typing import Dict, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from typing_extensions import TypeAlias

from promptseg.core.constants import ALIGN_TEMPERATURE, IGNORE_INDEX, STRIDES
from promptseg.core.encoders import FeaturePyramid
from promptseg.utils.errors import AllIgnoredError, DimensionError

AlignmentPyramid: TypeAlias = Dict[int, Tensor]
"""Mapping from stride to a ``(B, K, H/stride, W/stride)`` alignment map."""


def align(feat: Tensor, text: Tensor, normalize: bool = True) -> Tensor:
    """
    Per-pixel dot product between a feature map and the class embeddings.

    :param feat: ``(B, C, H, W)`` or ``(C, H, W)`` feature map.
    :type feat: Tensor
    :param text: ``(K, C)`` or ``(B, K, C)`` text embeddings.
    :type text: Tensor
    :param normalize: L2-normalise pixels and class embeddings first.
    :type normalize: bool
    :return: ``(B, K, H, W)`` scores (``(K, H, W)`` for unbatched input).
    :rtype: Tensor
    :raises DimensionError: If channel widths differ.
    """
    single = feat.dim() == 3
    if single:
        feat = feat.unsqueeze(0)
    if feat.shape[1] != text.shape[-1]:
        raise DimensionError(text.shape[-1], feat.shape[1], "channel width")

    if normalize:
        feat = F.normalize(feat, dim=1)
        text = F.normalize(text, dim=-1)

    if text.dim() == 2:
        scores = torch.einsum("bchw,kc->bkhw", feat, text)
    else:
        scores = torch.einsum("bchw,bkc->bkhw", feat, text)
    return scores[0] if single else scores


def _upsampler(channels: int, depthwise: bool) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(channels, channels, kernel_size=2, stride=2,
                              groups=channels if depthwise else 1)


class MultiScaleUpsampler(nn.Module):
    """
    Learned 2x transposed convolutions for the multi-scale alignment.

    One full 2x stage upsamples features for the stride-16 line. Score maps
    use depthwise stages (class channels stay independent); each upsampling
    factor (2, 4, 8) owns one 2x stage that is applied ``log2(factor)`` times.

    :param embed_dim: Feature width ``C``.
    :type embed_dim: int
    :param num_classes: Score width ``K``.
    :type num_classes: int
    """
    factors: Tuple[int, ...] = (2, 4, 8)

    def __init__(self, embed_dim: int, num_classes: int) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.feature_up2 = _upsampler(embed_dim, depthwise=False)
        self.score_up = nn.ModuleDict(
            {str(f): _upsampler(num_classes, depthwise=True) for f in self.factors}
        )

    def upsample_features(self, feat: Tensor) -> Tensor:
        if feat.shape[1] != self.embed_dim:
            raise DimensionError(self.embed_dim, feat.shape[1], "feature upsampler width")
        return self.feature_up2(feat)

    def upsample_scores(self, scores: Tensor, factor: int) -> Tensor:
        """
        Upsample a score map by ``factor`` (2, 4 or 8).
        """
        if scores.shape[1] != self.num_classes:
            raise DimensionError(self.num_classes, scores.shape[1], "score upsampler width")
        stage = self.score_up[str(factor)]
        for _ in range(int(math.log2(factor))):
            scores = stage(scores)
        return scores


def _check_size(tensor: Tensor, target: Tuple[int, int], stride: int) -> None:
    if tuple(tensor.shape[-2:]) != tuple(target):
        raise DimensionError(tuple(target), tuple(tensor.shape[-2:]),
                             f"spatial size at stride {stride}")


def multi_scale_align(pyr: FeaturePyramid, text: Tensor, up: MultiScaleUpsampler,
                      normalize: bool = True) -> AlignmentPyramid:
    """
    Alignment maps at strides 32, 16, 8 and 4.

    The stride-16 line upsamples the stride-32 *features* then aligns; the
    stride-8 and stride-4 lines sum upsampled *score* maps.

    :param pyr: Feature pyramid; strides 16 and 32 are required, 8 and 4 are
                used only to check target sizes when present.
    :type pyr: FeaturePyramid
    :param text: ``(K, C)`` or ``(B, K, C)`` text embeddings.
    :type text: Tensor
    :param up: Learned upsamplers.
    :type up: MultiScaleUpsampler
    :param normalize: L2-normalise before scoring.
    :type normalize: bool
    :return: Alignment pyramid keyed by stride.
    :rtype: AlignmentPyramid
    :raises DimensionError: If an upsampled map misses its target size.
    """
    base = pyr[32]
    height, width = base.shape[-2:]
    targets = {s: (height * 32 // s, width * 32 // s) for s in STRIDES}
    for stride, level in pyr.items():
        _check_size(level, targets[stride], stride)

    a32 = align(base, text, normalize)
    a16 = align(up.upsample_features(base), text, normalize)
    _check_size(a16, targets[16], 16)

    a8 = up.upsample_scores(a32, 4) + up.upsample_scores(a16, 2)
    _check_size(a8, targets[8], 8)

    a4 = up.upsample_scores(a32, 8) + up.upsample_scores(a16, 4) + up.upsample_scores(a8, 2)
    _check_size(a4, targets[4], 4)

    return {32: a32, 16: a16, 8: a8, 4: a4}


def resize_labels(labels: Tensor, size: Tuple[int, int]) -> Tensor:
    """
    Nearest-neighbour resize of an integer label map.

    :param labels: ``(B, H, W)`` labels.
    :type labels: Tensor
    :param size: Target ``(H', W')``.
    :type size: Tuple[int, int]
    :return: ``(B, H', W')`` int64 labels.
    :rtype: Tensor
    """
    if tuple(labels.shape[-2:]) == tuple(size):
        return labels.long()
    resized = F.interpolate(labels[:, None].float(), size=tuple(size), mode="nearest")
    return resized[:, 0].long()


def alignment_loss(scores: Tensor, labels: Tensor,
                   temp_align: float = ALIGN_TEMPERATURE,
                   ignore_index: int = IGNORE_INDEX) -> Tensor:
    """
    Per-pixel cross-entropy over classes applied to ``scores / temp_align``,
    averaged over non-ignored pixels.

    Labels are resized to the score map by nearest neighbour.

    :param scores: ``(B, K, H, W)`` or ``(K, H, W)`` alignment map.
    :type scores: Tensor
    :param labels: ``(B, H_img, W_img)`` or ``(H_img, W_img)`` labels.
    :type labels: Tensor
    :param temp_align: Positive temperature.
    :type temp_align: float
    :param ignore_index: Label excluded from the mean.
    :type ignore_index: int
    :return: Scalar loss.
    :rtype: Tensor
    :raises AllIgnoredError: If no pixel carries a real label.
    """
    if temp_align <= 0:
        raise ValueError(f"temp_align must be positive, got {temp_align}")
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)

    target = resize_labels(labels, scores.shape[-2:])
    if not bool((target != ignore_index).any()):
        raise AllIgnoredError("Every pixel of the label map is ignored")
    return F.cross_entropy(scores / temp_align, target, ignore_index=ignore_index)


def concat_for_decoder(pyr: FeaturePyramid, apyr: AlignmentPyramid) -> FeaturePyramid:
    """
    Concatenate each pyramid level with the alignment map of the same stride
    along channels, giving ``C + K`` channels per stride.

    :param pyr: Feature pyramid.
    :type pyr: FeaturePyramid
    :param apyr: Alignment pyramid covering the same strides.
    :type apyr: AlignmentPyramid
    :return: Decorated pyramid.
    :rtype: FeaturePyramid
    :raises DimensionError: If strides or spatial sizes disagree.
    """
    if set(pyr) != set(apyr):
        raise DimensionError(sorted(pyr), sorted(apyr), "pyramid strides")

    decorated: FeaturePyramid = {}
    for stride, feat in pyr.items():
        scores = apyr[stride]
        if feat.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(tuple(feat.shape[-2:]), tuple(scores.shape[-2:]),
                                 f"alignment size at stride {stride}")
        decorated[stride] = torch.cat([feat, scores], dim=1)
    return decorated
