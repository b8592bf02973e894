"""
The full segmentation model: encoders, prompt learner, text refinement,
(multi-scale) alignment and the fusion decoder wired together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from promptseg.core.alignment import (
    AlignmentPyramid,
    MultiScaleUpsampler,
    align,
    concat_for_decoder,
    multi_scale_align,
)
from promptseg.core.constants import STRIDES
from promptseg.core.encoders import (
    FeaturePyramid,
    ImageEncoder,
    Projector,
    TextEncoder,
    encode_image,
    encode_text,
    project_global,
)
from promptseg.core.prompting import (
    CrossAttentionRefiner,
    PromptLearner,
    PromptMode,
    prompt_length,
    refine_text,
    zero_shot_probs,
)
from promptseg.pipeline.config import ModelConfig
from promptseg.pipeline.decoder import FusionDecoder

logger = logging.getLogger(__name__)

PARAMETER_GROUPS: Tuple[str, ...] = ("image_encoder", "text_encoder", "prompt", "head")
"""Named parameter groups, in optimiser order."""


@dataclass
class SegmentationOutput:
    """
    Everything one forward pass produces.

    :param logits: ``(B, K, H, W)`` decoder logits at image size.
    :param alignments: Alignment maps keyed by stride.
    :param text: ``(B, K, C)`` refined text embeddings.
    :param pyramid: Image feature pyramid.
    :param global_feature: ``(B, D)`` global image feature.
    """
    logits: Tensor
    alignments: AlignmentPyramid
    text: Tensor
    pyramid: FeaturePyramid
    global_feature: Tensor


class PromptSegmentor(nn.Module):
    """
    Segmentation model conditioned on learned class prompts.

    :param cfg: Architecture settings.
    :type cfg: ModelConfig
    :param num_classes: Number of classes ``K``.
    :type num_classes: int
    """
    def __init__(self, cfg: ModelConfig, num_classes: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.mode = PromptMode.parse(cfg.prompt_mode)
        width = cfg.embed_dim

        self.image_encoder = ImageEncoder(width, cfg.global_dim)
        self.text_encoder = TextEncoder(
            width, max_length=prompt_length(PromptMode.ICPC, cfg.context_length),
            num_layers=cfg.text_layers, num_heads=cfg.text_heads,
        )
        self.projector = Projector(cfg.global_dim, width, cfg.projector_hidden,
                                   cfg.projector_activation)
        self.prompt_learner = PromptLearner(num_classes, width, cfg.context_length)
        self.refiner = CrossAttentionRefiner(width, width, cfg.refine_heads,
                                             cfg.lambda_init, cfg.freeze_lambda)
        self.upsampler = MultiScaleUpsampler(width, num_classes)
        self.decoder = FusionDecoder(width + num_classes, cfg.decoder_width, num_classes)

    def group_modules(self) -> Dict[str, List[nn.Module]]:
        return {
            "image_encoder": [self.image_encoder],
            "text_encoder": [self.text_encoder],
            "prompt": [self.prompt_learner, self.projector],
            "head": [self.refiner, self.upsampler, self.decoder],
        }

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """
        Parameters of every named group (frozen ones included).
        """
        return {
            name: [p for module in modules for p in module.parameters()]
            for name, modules in self.group_modules().items()
        }

    def set_trainable(self, group: str, trainable: bool) -> None:
        for module in self.group_modules()[group]:
            for param in module.parameters():
                param.requires_grad_(trainable)
        if group == "head" and trainable and self.cfg.freeze_lambda:
            self.refiner.trade_off.requires_grad_(False)

    def trainable_flags(self) -> Dict[str, bool]:
        return {
            name: any(p.requires_grad for p in params)
            for name, params in self.parameter_groups().items()
        }

    def class_embeddings(self, pyramid: FeaturePyramid, global_feature: Tensor) -> Tensor:
        """
        Refined ``(B, K, C)`` text embeddings for a batch.
        """
        inst = project_global(global_feature, self.projector) if self.mode.uses_instance else None
        prompts = self.prompt_learner(inst, self.mode)
        text = encode_text(prompts, self.text_encoder)
        return refine_text(text, pyramid[STRIDES[-1]], self.refiner)

    def alignment_pyramid(self, pyramid: FeaturePyramid, text: Tensor) -> AlignmentPyramid:
        normalize = self.cfg.normalize_embeddings
        if self.cfg.multi_scale:
            return multi_scale_align(pyramid, text, self.upsampler, normalize)

        coarse = align(pyramid[STRIDES[-1]], text, normalize)
        alignments: AlignmentPyramid = {
            s: coarse.new_zeros(coarse.shape[0], self.num_classes, *pyramid[s].shape[-2:])
            for s in STRIDES[:-1]
        }
        alignments[STRIDES[-1]] = coarse
        return alignments

    def forward(self, images: Tensor) -> SegmentationOutput:
        pyramid, global_feature = encode_image(images, self.image_encoder)
        text = self.class_embeddings(pyramid, global_feature)
        alignments = self.alignment_pyramid(pyramid, text)
        decorated = concat_for_decoder(pyramid, alignments)
        logits = self.decoder(decorated, images.shape[-2:])
        return SegmentationOutput(logits, alignments, text, pyramid, global_feature)

    def raw_alignment_logits(self, images: Tensor) -> Tensor:
        """
        Alignment scores used directly as segmentation logits: the finest
        available map, bilinearly upsampled to image size. The decoder is
        not run.
        """
        pyramid, global_feature = encode_image(images, self.image_encoder)
        text = self.class_embeddings(pyramid, global_feature)
        alignments = self.alignment_pyramid(pyramid, text)
        finest = alignments[STRIDES[0]] if self.cfg.multi_scale else alignments[STRIDES[-1]]
        return F.interpolate(finest, size=tuple(images.shape[-2:]),
                             mode="bilinear", align_corners=False)

    def zero_shot(self, images: Tensor, temp: float | None = None) -> Tensor:
        """
        ``(B, K)`` image-level class probabilities from the global feature,
        at ``cfg.zero_shot_temp`` unless ``temp`` is given. Needs
        ``global_dim == embed_dim``.
        """
        temp = self.cfg.zero_shot_temp if temp is None else temp
        pyramid, global_feature = encode_image(images, self.image_encoder)
        text = self.class_embeddings(pyramid, global_feature)
        return zero_shot_probs(global_feature, text, temp)


def build_model(cfg: ModelConfig, num_classes: int, freeze_text_encoder: bool = True,
                dtype: torch.dtype = torch.float32) -> PromptSegmentor:
    """
    Construct a model and apply the freezing protocol.

    :param cfg: Architecture settings.
    :type cfg: ModelConfig
    :param num_classes: Number of classes.
    :type num_classes: int
    :param freeze_text_encoder: Exclude the text encoder from optimisation.
    :type freeze_text_encoder: bool
    :param dtype: Parameter dtype.
    :type dtype: torch.dtype
    :return: The model.
    :rtype: PromptSegmentor
    """
    model = PromptSegmentor(cfg, num_classes).to(dtype)
    if freeze_text_encoder:
        model.set_trainable("text_encoder", False)
    logger.debug("Built %s model with %d parameters (%s)", model.mode.value,
                 sum(p.numel() for p in model.parameters()), model.trainable_flags())
    return model
