"""
Training loop.

The text encoder is frozen by default and the image encoder learns at a
tenth of the base learning rate. Each step logs one JSON record with the
three loss terms, their weighted total and the easy/hard split of the
sampled positives; the log holds no wall-clock data, so two runs with the
same configuration produce identical files.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import torch
from torch import Tensor

from promptseg.core.alignment import alignment_loss
from promptseg.core.constants import STRIDES
from promptseg.core.contrastive import (
    ScheduleState,
    contrastive_loss,
    partition_easy_hard,
    sample_points,
)
from promptseg.pipeline.checkpoint import parameter_hash, save_checkpoint
from promptseg.pipeline.config import RunConfig, TrainConfig, save_run_config
from promptseg.pipeline.data import SegmentationSplit, generate_dataset
from promptseg.pipeline.losses import LossBreakdown, LossWeights, seg_loss, total_loss
from promptseg.pipeline.metrics import EvalSource, evaluate
from promptseg.pipeline.model import PromptSegmentor, SegmentationOutput, build_model
from promptseg.utils.errors import (
    DivergenceError,
    EmptyAnchorWarning,
    EmptySplitError,
    FrozenWeightsChangedError,
    NonFiniteLossError,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.pt"
CONFIG_FILE = "config.yaml"


@dataclass
class TrainResult:
    """
    Outcome of one training run.

    :param run_dir: Directory holding every artifact of the run.
    :param checkpoint: Final checkpoint path.
    :param final: Final mIoU values keyed ``train``, ``val`` and ``val_raw``.
    :param text_encoder_hash: Text encoder weight hash before and after training.
    """
    run_dir: Path
    checkpoint: Path
    final: Dict[str, float] = field(default_factory=dict)
    text_encoder_hash: Tuple[str, str] = ("", "")
    records: List[dict] = field(default_factory=list)


def lr_multipliers(cfg: TrainConfig) -> Dict[str, float]:
    """
    Learning-rate multiplier of every parameter group.
    """
    return {
        "image_encoder": cfg.image_encoder_lr_mult,
        "text_encoder": 0.0 if cfg.freeze_text_encoder else 1.0,
        "prompt": 1.0,
        "head": 1.0,
    }


def build_optimizer(model: PromptSegmentor, cfg: TrainConfig) -> torch.optim.Optimizer:
    """
    One optimiser parameter group per model group, at ``lr * multiplier``.

    Frozen parameters are left out. ``sgd`` is plain gradient descent
    (no momentum, no weight decay).

    :param model: The model.
    :type model: PromptSegmentor
    :param cfg: Training settings.
    :type cfg: TrainConfig
    :return: The optimiser.
    :rtype: torch.optim.Optimizer
    """
    multipliers = lr_multipliers(cfg)
    groups = []
    for name, params in model.parameter_groups().items():
        trainable = [p for p in params if p.requires_grad]
        if trainable:
            groups.append({"params": trainable, "lr": cfg.lr * multipliers[name], "name": name})

    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=cfg.lr)
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


def batch_indices(count: int, batch_size: int, seed: int) -> Iterator[Tensor]:
    """
    Endless stream of shuffled mini-batch indices; an epoch's trailing
    partial batch is dropped unless the split is smaller than one batch.
    """
    generator = torch.Generator().manual_seed(int(seed))
    while True:
        order = torch.randperm(count, generator=generator)
        for start in range(0, count, batch_size):
            chunk = order[start:start + batch_size]
            if chunk.numel() == batch_size or count < batch_size:
                yield chunk


def compute_losses(out: SegmentationOutput, labels: Tensor, step: int,
                   cfg: RunConfig) -> Tuple[LossBreakdown, int, int]:
    """
    Loss terms of one mini-batch.

    The alignment loss uses the stride-32 map (every stride with
    ``train.align_all_scales``); the contrastive term samples points from
    the stride-32 map.

    :return: The breakdown and the numbers of easy and hard positives drawn.
    :raises NonFiniteLossError: If a term is not finite.
    """
    tc = cfg.train
    seg = seg_loss(out.logits, labels)

    coarse = out.alignments[STRIDES[-1]]
    if tc.align_all_scales and cfg.model.multi_scale:
        align = torch.stack([
            alignment_loss(out.alignments[s], labels, tc.temp_align) for s in STRIDES
        ]).mean()
    else:
        align = alignment_loss(coarse, labels, tc.temp_align)

    n_easy = n_hard = 0
    if tc.contrastive:
        easy, hard = partition_easy_hard(coarse, labels)
        state = ScheduleState(step, tc.total_steps, cfg.contrast.positives_per_class)
        samples = sample_points(easy, hard, state, cfg.contrast,
                                seed=tc.seed * 1_000_003 + step)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyAnchorWarning)
            contrast = contrastive_loss(samples, cfg.contrast).to(seg.dtype)
        n_easy = sum(s.num_easy for s in samples.values())
        n_hard = sum(s.num_hard for s in samples.values())
    else:
        contrast = seg.new_zeros(())

    return total_loss(seg, align, contrast, LossWeights(tc.gamma)), n_easy, n_hard


def _write(log, record: dict, records: List[dict]) -> None:
    log.write(json.dumps(record) + "\n")
    records.append(record)


def train(cfg: RunConfig, train_split: SegmentationSplit | None = None,
          val_split: SegmentationSplit | None = None,
          run_dir: str | Path | None = None) -> TrainResult:
    """
    Train a model and write its artifacts.

    The run directory receives ``config.yaml`` (the effective config),
    ``metrics.jsonl``, ``checkpoint.pt`` and any interval checkpoints.

    :param cfg: Run configuration.
    :type cfg: RunConfig
    :param train_split: Training split; generated from ``cfg.data`` when omitted.
    :type train_split: SegmentationSplit | None
    :param val_split: Validation split; generated with the training split.
    :type val_split: SegmentationSplit | None
    :param run_dir: Output directory; ``cfg.run_dir`` when omitted.
    :type run_dir: str | Path | None
    :return: The run's outcome.
    :rtype: TrainResult
    :raises EmptySplitError: If the training split is empty.
    :raises DivergenceError: If a loss turns non-finite.
    :raises FrozenWeightsChangedError: If the frozen text encoder changed;
                                       the final checkpoint is not written.
    """
    run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, run_dir / CONFIG_FILE)

    if train_split is None:
        train_split, generated_val = generate_dataset(cfg.data)
        val_split = generated_val if val_split is None else val_split
    if len(train_split) == 0:
        raise EmptySplitError("Cannot train on an empty split")

    tc = cfg.train
    dtype = getattr(torch, tc.dtype)
    torch.manual_seed(tc.seed)
    model = build_model(cfg.model, cfg.data.num_classes, tc.freeze_text_encoder, dtype)
    optimizer = build_optimizer(model, tc)
    multipliers = lr_multipliers(tc)
    hash_before = parameter_hash(model.text_encoder)
    batches = batch_indices(len(train_split), tc.batch_size, tc.seed)
    has_val = val_split is not None and len(val_split) > 0

    logger.info("Training %s for %d steps (mode=%s, contrastive=%s, multi_scale=%s, gamma=%g)",
                cfg.name, tc.total_steps, cfg.model.prompt_mode, tc.contrastive,
                cfg.model.multi_scale, tc.gamma)

    records: List[dict] = []
    model.train()
    with open(run_dir / METRICS_FILE, "w", encoding="utf-8") as log:
        for step in range(tc.total_steps):
            images, labels = train_split[next(batches)]
            out = model(images.to(dtype))
            try:
                breakdown, n_easy, n_hard = compute_losses(out, labels, step, cfg)
            except NonFiniteLossError as exc:
                raise DivergenceError(step, exc.parts) from None

            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()

            record = {"kind": "step", "step": step, **breakdown.as_record(),
                      "n_easy": n_easy, "n_hard": n_hard}
            _write(log, record, records)

            done = step + 1
            if done % tc.log_every == 0:
                logger.info("step %d/%d  total=%.4f  seg=%.4f  align=%.4f  contrast=%.4f",
                            done, tc.total_steps, record["total"], record["seg"],
                            record["align"], record["contrast"])
            if has_val and tc.eval_every and done % tc.eval_every == 0 and done < tc.total_steps:
                miou = evaluate(model, val_split).miou
                _write(log, {"kind": "eval", "step": done, "split": "val",
                             "source": EvalSource.DECODER.value, "miou": miou}, records)
                logger.info("step %d  val mIoU %.4f", done, miou)
            if tc.checkpoint_every and done % tc.checkpoint_every == 0 and done < tc.total_steps:
                save_checkpoint(model, run_dir / f"checkpoint_{done:06d}.pt", multipliers, done)

        hash_after = parameter_hash(model.text_encoder)
        if tc.freeze_text_encoder and hash_after != hash_before:
            raise FrozenWeightsChangedError("text_encoder", hash_before, hash_after)
        checkpoint = save_checkpoint(model, run_dir / CHECKPOINT_FILE, multipliers, tc.total_steps)

        final: Dict[str, float] = {}
        splits = [("train", train_split, EvalSource.DECODER)]
        if has_val:
            splits += [("val", val_split, EvalSource.DECODER),
                       ("val_raw", val_split, EvalSource.RAW_ALIGNMENT)]
        for key, split, source in splits:
            final[key] = evaluate(model, split, source).miou
            _write(log, {"kind": "eval", "step": tc.total_steps, "split": split.name,
                         "source": source.value, "miou": final[key]}, records)

    logger.info("Finished %s: %s", cfg.name,
                ", ".join(f"{k} mIoU {v:.4f}" for k, v in final.items()))
    return TrainResult(run_dir, checkpoint, final, (hash_before, hash_after), records)

