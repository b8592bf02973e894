from __future__ import annotations

import math

import pytest
import torch

from promptseg.core.constants import IGNORE_INDEX
from promptseg.core.contrastive import (
    ContrastiveConfig,
    PointSet,
    SampleSet,
    ScheduleState,
    contrastive_loss,
    partition_easy_hard,
    sample_points,
    schedule_counts,
)
from promptseg.utils.errors import ConfigError, EmptyAnchorWarning, UnknownModeError


def _points(labels, easy, num_classes=3):
    labels = torch.tensor(labels)
    easy = torch.tensor(easy)
    scores = torch.randn(len(labels), num_classes)
    index = torch.arange(len(labels))
    return PointSet(scores, labels, easy, torch.zeros_like(index), index)


# -- EASY / HARD PARTITION -- #

def test_partition_by_argmax():
    scores = torch.zeros(1, 3, 2, 2)
    scores[0, 0, 0, 0] = 1.0  # label 0 -> easy
    scores[0, 2, 0, 1] = 1.0  # label 1 -> hard
    scores[0, 1, 1, 0] = 1.0  # label 1 -> easy
    labels = torch.tensor([[[0, 1], [1, IGNORE_INDEX]]])

    easy, hard = partition_easy_hard(scores, labels)
    assert len(easy) == 2 and len(hard) == 1
    assert sorted(easy.labels.tolist()) == [0, 1]
    assert hard.labels.tolist() == [1]
    assert hard[0].pixel_index == 1
    assert not hard[0].easy


def test_partition_of_image_list_tracks_batch_index():
    maps = [torch.randn(3, 2, 2), torch.randn(3, 2, 2)]
    labels = [torch.zeros(2, 2, dtype=torch.long), torch.ones(2, 2, dtype=torch.long)]
    easy, hard = partition_easy_hard(maps, labels)

    points = PointSet.cat([easy, hard])
    assert len(points) == 8
    assert sorted(points.batch_index.tolist()) == [0] * 4 + [1] * 4


def test_partition_resizes_labels():
    easy, hard = partition_easy_hard(torch.randn(2, 4, 2, 2), torch.zeros(2, 64, 64, dtype=torch.long))
    assert len(easy) + len(hard) == 8


# -- SCHEDULE -- #

@pytest.mark.parametrize("total,cap", [(1, 5), (7, 5), (100, 3), (2000, 5), (10_000, 10)])
def test_schedule_law(total, cap):
    previous_hard = -1
    for step in range(total + 1):
        n_easy, n_hard = schedule_counts(ScheduleState(step, total, cap))
        assert n_easy + n_hard == cap
        assert n_hard >= previous_hard
        previous_hard = n_hard

    assert schedule_counts(ScheduleState(0, total, cap)) == (cap, 0)
    assert schedule_counts(ScheduleState(total, total, cap)) == (0, cap)


def test_schedule_midpoint_uses_floor():
    assert schedule_counts(ScheduleState(1000, 2000, 5)) == (3, 2)


@pytest.mark.parametrize("step,total,cap", [(-1, 10, 5), (11, 10, 5), (0, 0, 5), (0, 10, 0)])
def test_schedule_state_bounds(step, total, cap):
    with pytest.raises(ValueError):
        ScheduleState(step, total, cap)


# -- SAMPLING -- #

def test_start_of_training_takes_easy_points():
    easy = _points([0] * 6, [True] * 6)
    hard = _points([0] * 6, [False] * 6)
    samples = sample_points(easy, hard, ScheduleState(0, 10, 5), ContrastiveConfig())

    assert samples[0].num_easy == 5
    assert samples[0].num_hard == 0


def test_end_of_training_takes_hard_points():
    easy = _points([0] * 6, [True] * 6)
    hard = _points([0] * 6, [False] * 6)
    samples = sample_points(easy, hard, ScheduleState(10, 10, 5), ContrastiveConfig())
    assert (samples[0].num_easy, samples[0].num_hard) == (0, 5)


def test_shortfall_is_backfilled_from_other_pool():
    easy = _points([0, 0], [True, True])
    hard = _points([0] * 6, [False] * 6)
    samples = sample_points(easy, hard, ScheduleState(0, 10, 5), ContrastiveConfig())
    assert (samples[0].num_easy, samples[0].num_hard) == (2, 3)


def test_truncated_when_class_is_short():
    easy = _points([1, 1], [True, True])
    hard = _points([1], [False])
    samples = sample_points(easy, hard, ScheduleState(5, 10, 5), ContrastiveConfig())
    assert samples[1].positives.shape[0] == 3


def test_random_strategy_respects_cap():
    easy = _points([0] * 4, [True] * 4)
    hard = _points([0] * 4, [False] * 4)
    cfg = ContrastiveConfig(sampling_strategy="random", positives_per_class=6)
    samples = sample_points(easy, hard, ScheduleState(0, 10, 6), cfg)
    assert samples[0].positives.shape[0] == 6


def test_single_point_class_gives_no_anchor():
    easy = _points([0, 0, 0, 2], [True] * 4)
    samples = sample_points(easy, PointSet.empty(3), ScheduleState(0, 10, 5), ContrastiveConfig())
    assert set(samples) == {0}


def test_negatives_come_from_other_classes():
    labels = [0] * 5 + [1] * 5 + [2] * 5
    points = _points(labels, [True] * 15)
    points.scores[:] = torch.tensor(labels, dtype=torch.float32)[:, None]
    cfg = ContrastiveConfig(negatives_cap=4)
    samples = sample_points(points, PointSet.empty(3), ScheduleState(0, 10, 5), cfg)

    for class_id, sample in samples.items():
        assert sample.negatives.shape == (5, 4, 3)
        assert not bool((sample.negatives[..., 0] == class_id).any())


def test_sampling_is_seeded():
    easy = _points([0] * 10 + [1] * 10, [True] * 20)
    state = ScheduleState(3, 10, 5)
    first = sample_points(easy, PointSet.empty(3), state, ContrastiveConfig(), seed=7)
    second = sample_points(easy, PointSet.empty(3), state, ContrastiveConfig(), seed=7)
    for k in first:
        assert torch.equal(first[k].positives, second[k].positives)
        assert torch.equal(first[k].negatives, second[k].negatives)


def test_empty_batch_samples_nothing():
    assert sample_points(PointSet.empty(3), PointSet.empty(3), ScheduleState(0, 1),
                         ContrastiveConfig()) == {}


# -- INFONCE -- #

def _direct_infonce(samples, tau):
    terms = []
    for sample in samples:
        pos, neg = sample.positives.tolist(), sample.negatives.tolist()
        for i, anchor in enumerate(pos):
            dot = lambda a, b: sum(x * y for x, y in zip(a, b))
            negatives = sum(math.exp(dot(anchor, q) / tau) for q in neg[i])
            pair_terms = []
            for j, other in enumerate(pos):
                if i == j:
                    continue
                num = math.exp(dot(anchor, other) / tau)
                pair_terms.append(-math.log(num / (num + negatives)))
            terms.append(sum(pair_terms) / len(pair_terms))
    return sum(terms) / len(terms)


def test_infonce_matches_direct_evaluation():
    gen = torch.Generator().manual_seed(5)
    for _ in range(100):
        k = int(torch.randint(2, 17, (1,), generator=gen))
        sets = []
        for class_id in range(int(torch.randint(1, 4, (1,), generator=gen))):
            p = int(torch.randint(2, 6, (1,), generator=gen))
            m = int(torch.randint(0, 5, (1,), generator=gen))
            sets.append(SampleSet(
                class_id,
                torch.randn(p, k, generator=gen, dtype=torch.float64) * 0.3,
                torch.randn(p, m, k, generator=gen, dtype=torch.float64) * 0.3,
                torch.ones(p, dtype=torch.bool),
            ))
        cfg = ContrastiveConfig(temperature=0.5)
        assert contrastive_loss(sets, cfg).item() == pytest.approx(_direct_infonce(sets, 0.5),
                                                                   abs=1e-6)


def test_infonce_is_stable_for_large_scores():
    pos = torch.randn(4, 8, dtype=torch.float64) * 1e3
    neg = torch.randn(4, 6, 8, dtype=torch.float64) * 1e3
    loss = contrastive_loss([SampleSet(0, pos, neg, torch.ones(4, dtype=torch.bool))],
                            ContrastiveConfig(temperature=0.01))
    assert math.isfinite(loss.item())


def test_infonce_without_negatives_is_zero():
    pos = torch.randn(3, 4)
    loss = contrastive_loss([SampleSet(0, pos, torch.zeros(3, 0, 4), torch.ones(3, dtype=torch.bool))],
                            ContrastiveConfig())
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_infonce_gradients():
    pos = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    neg = torch.randn(3, 5, 4, dtype=torch.float64, requires_grad=True)
    cfg = ContrastiveConfig(temperature=0.7)

    def loss(p, n):
        return contrastive_loss([SampleSet(0, p, n, torch.ones(3, dtype=torch.bool))], cfg)

    assert torch.autograd.gradcheck(loss, (pos, neg), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_cosine_points_are_scale_free():
    pos = torch.randn(3, 4, dtype=torch.float64)
    neg = torch.randn(3, 2, 4, dtype=torch.float64)
    cfg = ContrastiveConfig(cosine_points=True)
    easy = torch.ones(3, dtype=torch.bool)

    small = contrastive_loss([SampleSet(0, pos, neg, easy)], cfg)
    large = contrastive_loss([SampleSet(0, pos * 9.0, neg * 4.0, easy)], cfg)
    torch.testing.assert_close(small, large)


def _pair_loss(pos, neg, tau=0.5):
    easy = torch.ones(pos.shape[0], dtype=torch.bool)
    return contrastive_loss([SampleSet(0, pos, neg, easy)], ContrastiveConfig(temperature=tau)).item()


def test_infonce_decreases_with_positive_similarity():
    losses = []
    for s in (0.1, 0.5, 1.0, 2.0):
        pos = torch.tensor([[1.0, 0.0], [s, 0.0]], dtype=torch.float64)
        neg = torch.tensor([[[0.5, 0.5]], [[0.0, 1.0]]], dtype=torch.float64)
        losses.append(_pair_loss(pos, neg))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_infonce_increases_with_negative_similarity():
    losses = []
    for c in (-1.0, 0.0, 0.5, 1.5):
        pos = torch.tensor([[1.0, 0.0], [0.8, 0.6]], dtype=torch.float64)
        neg = torch.tensor([[[c, 0.0], [0.0, 0.3]], [[0.0, 0.2], [0.1, 0.0]]], dtype=torch.float64)
        losses.append(_pair_loss(pos, neg))
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_infonce_ignores_point_order():
    gen = torch.Generator().manual_seed(11)
    pos = torch.randn(5, 6, generator=gen, dtype=torch.float64)
    neg = torch.randn(5, 4, 6, generator=gen, dtype=torch.float64)

    anchors = torch.randperm(5, generator=gen)
    within = torch.randperm(4, generator=gen)
    shuffled = _pair_loss(pos[anchors], neg[anchors][:, within])
    assert shuffled == pytest.approx(_pair_loss(pos, neg), abs=1e-9)


@pytest.mark.parametrize("m", [1, 3, 8])
def test_infonce_high_temperature_limit(m):
    gen = torch.Generator().manual_seed(m)
    pos = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    neg = torch.randn(2, m, 4, generator=gen, dtype=torch.float64)
    assert _pair_loss(pos, neg, tau=1e6) == pytest.approx(math.log(1 + m), abs=1e-3)


def test_infonce_single_pair_value():
    pos = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    neg = torch.tensor([[[0.0, 1.0]], [[0.0, 1.0]]], dtype=torch.float64)
    assert _pair_loss(pos, neg, tau=0.1) == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-6)


def test_no_anchor_warns_and_returns_zero():
    with pytest.warns(EmptyAnchorWarning):
        loss = contrastive_loss({}, ContrastiveConfig())
    assert loss.item() == 0.0


def test_end_to_end_from_score_maps():
    scores = torch.randn(2, 3, 4, 4, requires_grad=True)
    labels = torch.randint(0, 3, (2, 4, 4))
    easy, hard = partition_easy_hard(scores, labels)
    samples = sample_points(easy, hard, ScheduleState(1, 4, 3), ContrastiveConfig(), seed=1)

    contrastive_loss(samples, ContrastiveConfig()).backward()
    assert scores.grad is not None and scores.grad.abs().sum() > 0


# -- CONFIG -- #

@pytest.mark.parametrize("field,value", [
    ("temperature", 0.0),
    ("positives_per_class", 0),
    ("negatives_cap", 0),
])
def test_config_validation_names_key(field, value):
    cfg = ContrastiveConfig(**{field: value})
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert info.value.key == f"contrast.{field}"


def test_config_rejects_unknown_strategy():
    with pytest.raises(ConfigError):
        ContrastiveConfig(sampling_strategy="hard-first").validate()
    with pytest.raises(UnknownModeError):
        sample_points(PointSet.empty(), PointSet.empty(), ScheduleState(0, 1),
                      ContrastiveConfig(sampling_strategy="hard-first"))
