"""
Core building blocks: toy encoders, prompting, alignment and the
align-guided contrastive objective.
"""

from .alignment import (
    AlignmentPyramid,
    MultiScaleUpsampler,
    align,
    alignment_loss,
    concat_for_decoder,
    multi_scale_align,
    resize_labels,
)
from .constants import IGNORE_INDEX, STRIDES
from .contrastive import (
    AlignmentPoint,
    ContrastiveConfig,
    PointSet,
    SampleSet,
    SamplingStrategy,
    ScheduleState,
    contrastive_loss,
    partition_easy_hard,
    sample_points,
    schedule_counts,
)
from .encoders import (
    FeaturePyramid,
    ImageEncoder,
    Projector,
    TextEncoder,
    encode_image,
    encode_text,
    project_global,
)
from .prompting import (
    CrossAttentionRefiner,
    PromptLearner,
    PromptMode,
    build_prompts,
    prompt_length,
    refine_text,
    zero_shot_probs,
)

__all__ = [
    "IGNORE_INDEX",
    "STRIDES",

    "FeaturePyramid",
    "ImageEncoder",
    "TextEncoder",
    "Projector",
    "encode_image",
    "encode_text",
    "project_global",

    "PromptMode",
    "PromptLearner",
    "CrossAttentionRefiner",
    "build_prompts",
    "prompt_length",
    "refine_text",
    "zero_shot_probs",

    "AlignmentPyramid",
    "MultiScaleUpsampler",
    "align",
    "multi_scale_align",
    "alignment_loss",
    "concat_for_decoder",
    "resize_labels",

    "SamplingStrategy",
    "ContrastiveConfig",
    "AlignmentPoint",
    "PointSet",
    "SampleSet",
    "ScheduleState",
    "partition_easy_hard",
    "schedule_counts",
    "sample_points",
    "contrastive_loss",
]
