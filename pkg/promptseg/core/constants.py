"""
Fixed values and defaults used throughout the library.

Defaults are desk-scale: they train on one CPU in minutes. Values quoted
for the full-scale setting (context of 8 vectors, temperature 0.1, five
sampled points, balancing weight 0.5) are kept as they are.
"""

from typing import Final, Tuple

STRIDES: Final[Tuple[int, ...]] = (4, 8, 16, 32)
"""Output strides of the image feature pyramid, finest first."""

IMAGE_MULTIPLE: Final[int] = 32
"""Image height and width must be multiples of the coarsest stride."""

IGNORE_INDEX: Final[int] = 255
"""Label value excluded from every loss and metric."""

EMBED_DIM: Final[int] = 64
"""Default prompt token / text embedding width C."""

GLOBAL_DIM: Final[int] = 64
"""Default global image feature width D."""

CONTEXT_LENGTH: Final[int] = 8
"""Default number N of learnable context vectors."""

REFINE_LAMBDA_INIT: Final[float] = 1e-4
"""Initial value of the trainable text refinement trade-off."""

ALIGN_TEMPERATURE: Final[float] = 0.07
"""Softmax temperature applied to alignment scores in the alignment loss."""

ZERO_SHOT_TEMPERATURE: Final[float] = 0.01
"""Softmax temperature of the image-level zero-shot probabilities."""

CONTRAST_TEMPERATURE: Final[float] = 0.1
"""InfoNCE temperature of the align-guided contrastive loss."""

POSITIVES_PER_CLASS: Final[int] = 5
"""Positive points sampled per class from a mini-batch."""

NEGATIVES_CAP: Final[int] = 64
"""Negative points sampled per anchor."""

GAMMA: Final[float] = 0.5
"""Weight of the contrastive term in the overall objective."""

IMAGE_ENCODER_LR_MULT: Final[float] = 0.1
"""Learning-rate multiplier of the image encoder parameter group."""

CHECKPOINT_FORMAT_VERSION: Final[int] = 1
"""Version tag written into every checkpoint manifest."""
