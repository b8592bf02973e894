"""
Lightweight fusion decoder over the decorated pyramid.
"""

from __future__ import annotations

from typing import Tuple

import torch.nn.functional as F
from torch import Tensor, nn

from promptseg.core.constants import STRIDES
from promptseg.core.encoders import FeaturePyramid
from promptseg.utils.errors import DimensionError


class FusionDecoder(nn.Module):
    """
    Project every level to a common width, upsample to stride 4 and sum,
    refine once, then classify and upsample to the image size.

    :param in_channels: Channels per level, ``C + K``.
    :type in_channels: int
    :param width: Fusion width.
    :type width: int
    :param num_classes: Output classes ``K``.
    :type num_classes: int
    """
    def __init__(self, in_channels: int, width: int, num_classes: int) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.lateral = nn.ModuleDict(
            {str(s): nn.Conv2d(in_channels, width, kernel_size=1) for s in STRIDES}
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(width, width, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.classifier = nn.Conv2d(width, num_classes, kernel_size=1)

    def forward(self, decorated: FeaturePyramid, size: Tuple[int, int]) -> Tensor:
        finest = decorated[STRIDES[0]].shape[-2:]
        fused: Tensor | None = None
        for stride in STRIDES:
            level = decorated[stride]
            if level.shape[1] != self.in_channels:
                raise DimensionError(self.in_channels, level.shape[1],
                                     f"decoder input width at stride {stride}")
            x = self.lateral[str(stride)](level)
            if x.shape[-2:] != finest:
                x = F.interpolate(x, size=finest, mode="bilinear", align_corners=False)
            fused = x if fused is None else fused + x

        logits = self.classifier(self.fuse(fused))
        return F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)
