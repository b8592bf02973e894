"""
promptseg Package Initialization.

This package implements instance-conditioned prompting with dense
pixel-text alignment for semantic segmentation, at a scale that trains on
one CPU: toy encoders, prompt learning, multi-scale alignment, the
align-guided contrastive objective, a training pipeline and a command line.

Attributes:
    __version__ (str): The current version of promptseg.
    __author__ (str): The author of the library.
"""

from . import core
from . import pipeline
from . import utils

from .pipeline import RunConfig, load_run_config, train, evaluate, load_checkpoint

__all__ = [
    "core",
    "pipeline",
    "utils",
    "RunConfig",
    "load_run_config",
    "train",
    "evaluate",
    "load_checkpoint",
]

__version__ = "0.1.0"
__author__ = "Razka Rizaldi"
