from __future__ import annotations

import pytest
import torch

from promptseg.pipeline.config import RunConfig, load_run_config
from promptseg.pipeline.data import generate_dataset

TINY_OVERRIDES = [
    "model.embed_dim=16",
    "model.global_dim=16",
    "model.context_length=2",
    "model.text_heads=2",
    "model.decoder_width=16",
    "contrast.negatives_cap=8",
    "train.total_steps=4",
    "train.batch_size=2",
    "train.eval_every=2",
    "train.log_every=2",
    "data.num_classes=4",
    "data.train_images=4",
    "data.val_images=2",
    "data.image_size=32",
    "data.max_shapes=3",
]
"""Overrides shrinking a run to a few seconds."""


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return load_run_config(None, TINY_OVERRIDES + ["name=tiny", f"out_dir={tmp_path}"])


@pytest.fixture
def tiny_splits(tiny_config):
    return generate_dataset(tiny_config.data)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
