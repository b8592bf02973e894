"""
Command-line surface: ``train``, ``eval``, ``ablate`` and ``plot``.
"""

from .ablate import AblationMatrix, AblationRow, SweepSummary, preset, run_sweep
from .main import build_parser, main
from .plot import EmbeddingProjection, plot_convergence, plot_embeddings, project_embeddings

__all__ = [
    "main",
    "build_parser",

    "AblationRow",
    "AblationMatrix",
    "SweepSummary",
    "preset",
    "run_sweep",

    "EmbeddingProjection",
    "project_embeddings",
    "plot_convergence",
    "plot_embeddings",
]
