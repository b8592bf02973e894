"""
promptseg utilities package initialization.

This package provides the error classes, decorators, logging setup and
terminal rendering helpers shared by the rest of the library.
"""

from .decorators import timed
from .display import banner, center_text, make_divider, print_iou_table, print_summary_table
from .errors import (
    AllIgnoredError,
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    EmptyAnchorWarning,
    EmptyFeatureMapError,
    EmptySplitError,
    FrozenWeightsChangedError,
    InfeasibleSpecError,
    NonFiniteLossError,
    PromptSegError,
    RaggedSequenceError,
    RunArtifactError,
    UnknownModeError,
    ZeroNormError,
)
from .logs import configure_logging

__all__ = [
    "PromptSegError",
    "DimensionError",
    "RaggedSequenceError",
    "UnknownModeError",
    "EmptyFeatureMapError",
    "ZeroNormError",
    "AllIgnoredError",
    "InfeasibleSpecError",
    "NonFiniteLossError",
    "DivergenceError",
    "CheckpointError",
    "ConfigError",
    "EmptySplitError",
    "RunArtifactError",
    "FrozenWeightsChangedError",
    "EmptyAnchorWarning",

    "timed",

    "banner",
    "center_text",
    "make_divider",
    "print_iou_table",
    "print_summary_table",

    "configure_logging",
]
