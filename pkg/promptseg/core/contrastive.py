"""
Align-guided contrastive learning.

Each non-ignored pixel of a mini-batch's alignment maps is an *alignment
point*: its ``K``-dimensional score vector together with its ground-truth
class. A point is *easy* when its highest score is at its true class and
*hard* otherwise. For every class present in the batch a handful of
positive points is drawn (shifting linearly from easy to hard points over
training), each positive is paired with the others as anchor, and an
InfoNCE loss pulls same-class points together while pushing sampled
other-class points away.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from promptseg.core.alignment import resize_labels
from promptseg.core.constants import (
    CONTRAST_TEMPERATURE,
    IGNORE_INDEX,
    NEGATIVES_CAP,
    POSITIVES_PER_CLASS,
)
from promptseg.utils.errors import ConfigError, EmptyAnchorWarning, UnknownModeError

logger = logging.getLogger(__name__)


class SamplingStrategy(str, Enum):
    """
    How positive points are drawn for each class.
    """
    RANDOM = "random"
    EASY_TO_HARD = "easy-to-hard"

    @classmethod
    def parse(cls, value: str | SamplingStrategy) -> SamplingStrategy:
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownModeError("sampling strategy", value, [s.value for s in cls]) from None


@dataclass
class ContrastiveConfig:
    """
    Settings of the align-guided contrastive loss.

    :param temperature: InfoNCE temperature.
    :param positives_per_class: Cap on positive points per class.
    :param negatives_cap: Cap on negative points per anchor.
    :param sampling_strategy: ``random`` or ``easy-to-hard``.
    :param cosine_points: Compare points by cosine instead of raw dot product.
    """
    temperature: float = CONTRAST_TEMPERATURE
    positives_per_class: int = POSITIVES_PER_CLASS
    negatives_cap: int = NEGATIVES_CAP
    sampling_strategy: str = SamplingStrategy.EASY_TO_HARD.value
    cosine_points: bool = False

    def validate(self, prefix: str = "contrast") -> None:
        """
        :raises ConfigError: Naming the first offending key.
        """
        if not self.temperature > 0:
            raise ConfigError(f"{prefix}.temperature must be > 0, got {self.temperature}",
                              f"{prefix}.temperature")
        if self.positives_per_class < 1:
            raise ConfigError(f"{prefix}.positives_per_class must be >= 1, "
                              f"got {self.positives_per_class}",
                              f"{prefix}.positives_per_class")
        if self.negatives_cap < 1:
            raise ConfigError(f"{prefix}.negatives_cap must be >= 1, got {self.negatives_cap}",
                              f"{prefix}.negatives_cap")
        try:
            SamplingStrategy.parse(self.sampling_strategy)
        except UnknownModeError as exc:
            raise ConfigError(f"{prefix}.sampling_strategy: {exc}",
                              f"{prefix}.sampling_strategy") from None


@dataclass(frozen=True)
class AlignmentPoint:
    """
    One pixel's score vector with its label, difficulty tag and provenance.
    """
    score: Tensor
    label: int
    easy: bool
    batch_index: int
    pixel_index: int


@dataclass
class PointSet:
    """
    A collection of alignment points stored column-wise.

    :param scores: ``(M, K)`` score vectors (autograd-connected to the maps).
    :param labels: ``(M,)`` class labels.
    :param easy: ``(M,)`` True where the argmax class equals the label.
    :param batch_index: ``(M,)`` image index within the mini-batch.
    :param pixel_index: ``(M,)`` flattened pixel index within the map.
    """
    scores: Tensor
    labels: Tensor
    easy: Tensor
    batch_index: Tensor
    pixel_index: Tensor

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> AlignmentPoint:
        return AlignmentPoint(
            score=self.scores[i],
            label=int(self.labels[i]),
            easy=bool(self.easy[i]),
            batch_index=int(self.batch_index[i]),
            pixel_index=int(self.pixel_index[i]),
        )

    def select(self, mask: Tensor) -> PointSet:
        return PointSet(self.scores[mask], self.labels[mask], self.easy[mask],
                        self.batch_index[mask], self.pixel_index[mask])

    @classmethod
    def empty(cls, num_classes: int = 0, dtype: torch.dtype = torch.float32) -> PointSet:
        index = torch.zeros(0, dtype=torch.long)
        return cls(torch.zeros(0, num_classes, dtype=dtype), index.clone(),
                   torch.zeros(0, dtype=torch.bool), index.clone(), index.clone())

    @classmethod
    def cat(cls, sets: Sequence[PointSet]) -> PointSet:
        return cls(
            torch.cat([s.scores for s in sets]),
            torch.cat([s.labels for s in sets]),
            torch.cat([s.easy for s in sets]),
            torch.cat([s.batch_index for s in sets]),
            torch.cat([s.pixel_index for s in sets]),
        )


@dataclass
class SampleSet:
    """
    Sampled points of one anchor class.

    :param class_id: The class the positives belong to.
    :param positives: ``(P, K)`` positive points; each serves as anchor in turn.
    :param negatives: ``(P, M, K)`` negatives drawn for each anchor.
    :param positive_easy: ``(P,)`` difficulty tags of the positives.
    """
    class_id: int
    positives: Tensor
    negatives: Tensor
    positive_easy: Tensor

    @property
    def num_easy(self) -> int:
        return int(self.positive_easy.sum())

    @property
    def num_hard(self) -> int:
        return int(self.positive_easy.numel() - self.positive_easy.sum())


@dataclass(frozen=True)
class ScheduleState:
    """
    Position in training used by the easy-to-hard schedule.

    :param step: Current step ``t``, ``0 <= t <= total_steps``.
    :param total_steps: Total training steps ``T``.
    :param cap: Positive points per class.
    """
    step: int
    total_steps: int
    cap: int = POSITIVES_PER_CLASS

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(f"step must lie in [0, {self.total_steps}], got {self.step}")
        if self.cap <= 0:
            raise ValueError(f"cap must be positive, got {self.cap}")


def _points_of(scores: Tensor, labels: Tensor, ignore_index: int,
               batch_offset: int) -> PointSet:
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)

    num_classes = scores.shape[1]
    target = resize_labels(labels, scores.shape[-2:]).reshape(-1)
    flat = scores.permute(0, 2, 3, 1).reshape(-1, num_classes)

    keep = torch.nonzero(target != ignore_index, as_tuple=True)[0]
    pixels_per_image = scores.shape[-2] * scores.shape[-1]
    point_scores = flat[keep]
    point_labels = target[keep]
    easy = point_scores.detach().argmax(dim=1) == point_labels
    return PointSet(point_scores, point_labels, easy,
                    keep // pixels_per_image + batch_offset, keep % pixels_per_image)


def partition_easy_hard(scores: Tensor | Sequence[Tensor],
                        labels: Tensor | Sequence[Tensor],
                        ignore_index: int = IGNORE_INDEX) -> Tuple[PointSet, PointSet]:
    """
    Turn every non-ignored pixel of a mini-batch into an alignment point and
    split the points into easy and hard ones.

    :param scores: ``(B, K, H, W)`` alignment maps or a list of per-image maps.
    :type scores: Tensor | Sequence[Tensor]
    :param labels: Matching ``(B, H_img, W_img)`` labels or a list; resized to
                   the map size by nearest neighbour.
    :type labels: Tensor | Sequence[Tensor]
    :param ignore_index: Label that never becomes a point.
    :type ignore_index: int
    :return: ``(easy, hard)`` point sets.
    :rtype: Tuple[PointSet, PointSet]
    """
    if isinstance(scores, Tensor):
        points = _points_of(scores, labels, ignore_index, 0)  # type: ignore[arg-type]
    else:
        if len(scores) == 0:
            return PointSet.empty(), PointSet.empty()
        parts = []
        offset = 0
        for score_map, label_map in zip(scores, labels):
            part = _points_of(score_map, label_map, ignore_index, offset)
            offset += 1 if score_map.dim() == 3 else score_map.shape[0]
            parts.append(part)
        points = PointSet.cat(parts)

    return points.select(points.easy), points.select(~points.easy)


def schedule_counts(state: ScheduleState) -> Tuple[int, int]:
    """
    Split the positive budget between easy and hard points with a linear
    schedule: ``n_hard = floor(t / T * cap)`` and ``n_easy = cap - n_hard``.

    :param state: Current schedule state.
    :type state: ScheduleState
    :return: ``(n_easy, n_hard)``.
    :rtype: Tuple[int, int]
    """
    n_hard = state.step * state.cap // state.total_steps
    return state.cap - n_hard, n_hard


def _draw(indices: Tensor, count: int, generator: torch.Generator) -> Tensor:
    if count <= 0 or indices.numel() == 0:
        return indices[:0]
    order = torch.randperm(indices.numel(), generator=generator)
    return indices[order[:count]]


def sample_points(easy: PointSet, hard: PointSet, state: ScheduleState,
                  cfg: ContrastiveConfig, seed: int = 0) -> Dict[int, SampleSet]:
    """
    Draw positives and negatives for every class present in the batch.

    With ``easy-to-hard`` sampling the positive budget ``state.cap`` is split
    by :func:`schedule_counts`; when one pool is short, the shortfall is taken
    from the other, and the result is truncated to what is available. With
    ``random`` sampling the split is ignored. Each positive gets up to
    ``cfg.negatives_cap`` negatives drawn uniformly from other-class points.
    Classes with fewer than two positives contribute no anchor.

    :param easy: Easy points of the batch.
    :type easy: PointSet
    :param hard: Hard points of the batch.
    :type hard: PointSet
    :param state: Schedule state (its ``cap`` bounds the positives).
    :type state: ScheduleState
    :param cfg: Contrastive settings.
    :type cfg: ContrastiveConfig
    :param seed: Seed of the sampling generator.
    :type seed: int
    :return: Sample sets keyed by class.
    :rtype: Dict[int, SampleSet]
    """
    strategy = SamplingStrategy.parse(cfg.sampling_strategy)
    generator = torch.Generator().manual_seed(int(seed))

    pool = PointSet.cat([easy, hard]) if len(easy) or len(hard) else easy
    if len(pool) == 0:
        return {}

    positions = torch.arange(len(pool))
    n_easy_quota, n_hard_quota = schedule_counts(state)
    samples: Dict[int, SampleSet] = {}

    for class_id in torch.unique(pool.labels).tolist():
        same = pool.labels == class_id
        easy_idx = positions[same & pool.easy]
        hard_idx = positions[same & ~pool.easy]

        if strategy is SamplingStrategy.RANDOM:
            chosen = _draw(torch.cat([easy_idx, hard_idx]), state.cap, generator)
        else:
            take_easy = min(n_easy_quota, easy_idx.numel())
            take_hard = min(n_hard_quota, hard_idx.numel())
            backfill_hard = n_easy_quota - take_easy
            backfill_easy = n_hard_quota - take_hard
            take_easy = min(easy_idx.numel(), take_easy + backfill_easy)
            take_hard = min(hard_idx.numel(), take_hard + backfill_hard)
            chosen = torch.cat([
                _draw(easy_idx, take_easy, generator),
                _draw(hard_idx, take_hard, generator),
            ])

        if chosen.numel() < 2:
            continue

        others = positions[~same]
        per_anchor = min(cfg.negatives_cap, others.numel())
        if per_anchor:
            neg_idx = torch.stack([_draw(others, per_anchor, generator) for _ in range(chosen.numel())])
            negatives = pool.scores[neg_idx]
        else:
            negatives = pool.scores.new_zeros(chosen.numel(), 0, pool.scores.shape[1])

        samples[class_id] = SampleSet(
            class_id=class_id,
            positives=pool.scores[chosen],
            negatives=negatives,
            positive_easy=pool.easy[chosen],
        )

    logger.debug("Sampled %d anchor classes (quota easy=%d, hard=%d)",
                 len(samples), n_easy_quota, n_hard_quota)
    return samples


def contrastive_loss(samples: Mapping[int, SampleSet] | Iterable[SampleSet],
                     cfg: ContrastiveConfig) -> Tensor:
    """
    InfoNCE over alignment points.

    For an anchor ``p`` with positives ``q+`` (the other sampled points of its
    class) and negatives ``N``, the anchor term is the mean over ``q+`` of
    ``-log(exp(p.q+/tau) / (exp(p.q+/tau) + sum_N exp(p.q-/tau)))``; the loss
    is the mean over all anchors. Evaluated with log-sum-exp so large
    ``|p.q| / tau`` stays finite.

    :param samples: Sample sets, as returned by :func:`sample_points`.
    :type samples: Mapping[int, SampleSet] | Iterable[SampleSet]
    :param cfg: Contrastive settings (temperature, cosine flag).
    :type cfg: ContrastiveConfig
    :return: Scalar loss; an exact zero (with :class:`EmptyAnchorWarning`)
             when there is no anchor.
    :rtype: Tensor
    """
    if not cfg.temperature > 0:
        raise ValueError(f"temperature must be positive, got {cfg.temperature}")
    sets = list(samples.values()) if isinstance(samples, Mapping) else list(samples)

    anchor_terms: List[Tensor] = []
    for sample in sets:
        pos, neg = sample.positives, sample.negatives
        count = pos.shape[0]
        if count < 2:
            continue
        if cfg.cosine_points:
            pos = F.normalize(pos, dim=-1)
            neg = F.normalize(neg, dim=-1)

        pos_logits = pos @ pos.T / cfg.temperature
        if neg.shape[1]:
            neg_lse = torch.logsumexp(torch.einsum("pk,pmk->pm", pos, neg) / cfg.temperature, dim=1)
        else:
            neg_lse = torch.full((count,), float("-inf"), dtype=pos.dtype, device=pos.device)

        pair = torch.logaddexp(pos_logits, neg_lse[:, None]) - pos_logits
        off_diag = ~torch.eye(count, dtype=torch.bool, device=pos.device)
        anchor_terms.append((pair * off_diag).sum(dim=1) / (count - 1))

    if not anchor_terms:
        warnings.warn("No contrastive anchors in this batch; loss set to 0",
                      EmptyAnchorWarning, stacklevel=2)
        return torch.zeros(())

    return torch.cat(anchor_terms).mean()
