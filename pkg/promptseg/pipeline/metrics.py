"""
Confusion-matrix based evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import torch
from torch import Tensor

from promptseg.core.constants import IGNORE_INDEX
from promptseg.pipeline.data import SegmentationSplit
from promptseg.utils.errors import AllIgnoredError, EmptySplitError, UnknownModeError

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 16


class EvalSource(str, Enum):
    """
    Which prediction is scored: the decoder logits or the raw alignment map.
    """
    DECODER = "decoder"
    RAW_ALIGNMENT = "raw-alignment"

    @classmethod
    def parse(cls, value: str | EvalSource) -> EvalSource:
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownModeError("evaluation source", value, [s.value for s in cls]) from None


@dataclass
class EvalReport:
    """
    Per-class IoU, mIoU and the pooled confusion matrix of one evaluation.

    ``per_class`` holds ``None`` for classes absent from the ground truth;
    those are left out of ``miou``. ``confusion[t][p]`` counts pixels of
    true class ``t`` predicted as ``p``.
    """
    split: str
    source: str
    per_class: Dict[int, Optional[float]]
    miou: float
    confusion: List[List[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return data


def confusion_matrix(pred: Tensor, target: Tensor, num_classes: int,
                     ignore_index: int = IGNORE_INDEX) -> Tensor:
    """
    ``(K, K)`` int64 counts of (true, predicted) pixel pairs, ignored pixels
    excluded.
    """
    keep = target != ignore_index
    index = target[keep].long() * num_classes + pred[keep].long()
    return torch.bincount(index, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(confusion: Tensor) -> Dict[int, Optional[float]]:
    """
    ``IoU_k = TP / (TP + FP + FN)`` for every class present in the ground truth.
    """
    confusion = confusion.to(torch.float64)
    tp = confusion.diagonal()
    fp = confusion.sum(dim=0) - tp
    fn = confusion.sum(dim=1) - tp
    present = confusion.sum(dim=1) > 0
    return {
        k: float(tp[k] / (tp[k] + fp[k] + fn[k])) if bool(present[k]) else None
        for k in range(confusion.shape[0])
    }


def mean_iou(per_class: Dict[int, Optional[float]]) -> float:
    """
    :raises AllIgnoredError: If no class is present in the ground truth.
    """
    values = [v for v in per_class.values() if v is not None]
    if not values:
        raise AllIgnoredError("No ground-truth pixels to score")
    return sum(values) / len(values)


@torch.no_grad()
def evaluate(model, split: SegmentationSplit, source: str | EvalSource = EvalSource.DECODER,
             batch_size: int = EVAL_BATCH_SIZE) -> EvalReport:
    """
    Score a model on a split.

    :param model: A :class:`~promptseg.pipeline.model.PromptSegmentor`.
    :param split: The split to score.
    :type split: SegmentationSplit
    :param source: ``decoder`` or ``raw-alignment``.
    :type source: str | EvalSource
    :param batch_size: Images per forward pass.
    :type batch_size: int
    :return: The report.
    :rtype: EvalReport
    :raises EmptySplitError: If the split holds no image.
    """
    source = EvalSource.parse(source)
    if len(split) == 0:
        raise EmptySplitError(f"Split {split.name!r} is empty")

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    num_classes = model.num_classes
    confusion = torch.zeros(num_classes, num_classes, dtype=torch.long)

    for start in range(0, len(split), batch_size):
        images, labels = split[start:start + batch_size]
        images = images.to(dtype)
        if source is EvalSource.DECODER:
            logits = model(images).logits
        else:
            logits = model.raw_alignment_logits(images)
        confusion += confusion_matrix(logits.argmax(dim=1), labels, num_classes)

    model.train(was_training)
    per_class = iou_from_confusion(confusion)
    report = EvalReport(split.name, source.value, per_class, mean_iou(per_class),
                        confusion.tolist())
    logger.debug("Evaluated %s on %s: mIoU %.4f", source.value, split.name, report.miou)
    return report
