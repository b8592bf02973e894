"""
Checkpoint files.

A checkpoint is one ``torch.save`` archive holding a dict with two entries:

* ``manifest``: format version, dimensions (``N`` context vectors, token
  width ``C``, global width ``D``, ``K`` classes), per-group trainability
  flags and learning-rate multipliers, the model config and the step;
* ``state_dict``: named parameter and buffer tensors.

Only plain containers and tensors are stored, so archives load with
``weights_only=True``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple

import torch
from torch import nn

from promptseg.core.constants import CHECKPOINT_FORMAT_VERSION
from promptseg.pipeline.config import ModelConfig
from promptseg.pipeline.model import PromptSegmentor
from promptseg.utils.errors import CheckpointError

logger = logging.getLogger(__name__)


def parameter_hash(params: nn.Module | Iterable[torch.Tensor]) -> str:
    """
    SHA-256 over the raw bytes of a module's parameters (or a list of tensors).

    :param params: Module or tensors.
    :type params: nn.Module | Iterable[torch.Tensor]
    :return: Hex digest.
    :rtype: str
    """
    tensors = params.parameters() if isinstance(params, nn.Module) else params
    digest = hashlib.sha256()
    for tensor in tensors:
        data = tensor.detach().cpu().contiguous()
        digest.update(str(tuple(data.shape)).encode())
        digest.update(data.numpy().tobytes())
    return digest.hexdigest()


def build_manifest(model: PromptSegmentor, lr_multipliers: Dict[str, float],
                   step: int) -> Dict[str, Any]:
    cfg = model.cfg
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dims": {
            "N": cfg.context_length,
            "C": cfg.embed_dim,
            "D": cfg.global_dim,
            "K": model.num_classes,
        },
        "trainable": model.trainable_flags(),
        "lr_multipliers": dict(lr_multipliers),
        "model": asdict(cfg),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "step": int(step),
    }


def save_checkpoint(model: PromptSegmentor, path: str | Path,
                    lr_multipliers: Dict[str, float] | None = None, step: int = 0) -> Path:
    """
    Write a checkpoint.

    :param model: The model to save.
    :type model: PromptSegmentor
    :param path: Destination file.
    :type path: str | Path
    :param lr_multipliers: Learning-rate multiplier per parameter group.
    :type lr_multipliers: Dict[str, float] | None
    :param step: Training step the weights belong to.
    :type step: int
    :return: The written path.
    :rtype: Path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "manifest": build_manifest(model, lr_multipliers or {}, step),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    logger.info("Saved checkpoint at step %d to %s", step, path)
    return path


def load_checkpoint(path: str | Path) -> Tuple[PromptSegmentor, Dict[str, Any]]:
    """
    Rebuild a model from a checkpoint.

    Trainability flags are restored from the manifest.

    :param path: Checkpoint file.
    :type path: str | Path
    :return: The model (in eval mode) and the manifest.
    :rtype: Tuple[PromptSegmentor, Dict[str, Any]]
    :raises CheckpointError: If the file is missing, unreadable or of an
                             unknown format version.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        manifest = payload["manifest"]
        state = payload["state_dict"]
    except Exception as exc:
        raise CheckpointError(f"Unreadable checkpoint {path}: {exc}") from exc

    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint format {version!r} (expected {CHECKPOINT_FORMAT_VERSION})"
        )

    model = PromptSegmentor(ModelConfig(**manifest["model"]), manifest["dims"]["K"])
    model.to(getattr(torch, manifest.get("dtype", "float32")))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"Checkpoint {path} does not match its manifest: {exc}") from exc

    for group, trainable in manifest["trainable"].items():
        model.set_trainable(group, trainable)
    model.eval()
    return model, manifest
