from __future__ import annotations

import json
import math
from pathlib import Path

import pytest
import torch
from torch import nn

from promptseg.cli.ablate import preset, run_sweep
from promptseg.core.constants import IGNORE_INDEX, STRIDES
from promptseg.core.prompting import zero_shot_probs
from promptseg.pipeline.checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from promptseg.pipeline.config import (
    RunConfig,
    TrainConfig,
    load_run_config,
    save_run_config,
)
from promptseg.pipeline.data import SegmentationSplit, SyntheticDatasetSpec, generate_dataset
from promptseg.pipeline.losses import LossWeights, seg_loss, total_loss
from promptseg.pipeline.metrics import (
    EvalSource,
    confusion_matrix,
    evaluate,
    iou_from_confusion,
    mean_iou,
)
from promptseg.pipeline.model import build_model
import importlib
train_module = importlib.import_module("promptseg.pipeline.train")
from promptseg.pipeline.train import build_optimizer, compute_losses, train
from promptseg.utils.errors import (
    AllIgnoredError,
    CheckpointError,
    ConfigError,
    DimensionError,
    EmptySplitError,
    FrozenWeightsChangedError,
    InfeasibleSpecError,
    NonFiniteLossError,
)


# -- SYNTHETIC DATA -- #

def test_desk_dataset_shapes_and_labels():
    train_split, val_split = generate_dataset(SyntheticDatasetSpec())

    assert len(train_split) == 64 and len(val_split) == 16
    assert train_split.images.shape == (64, 3, 64, 64)
    assert val_split.images.shape == (16, 3, 64, 64)
    assert train_split.labels.shape == (64, 64, 64)
    assert train_split.images.dtype == torch.float32
    assert 0.0 <= train_split.images.min() and train_split.images.max() <= 1.0

    values = set(torch.unique(train_split.labels).tolist())
    assert values <= set(range(8)) | {IGNORE_INDEX}
    assert IGNORE_INDEX in values


def test_dataset_is_deterministic():
    spec = SyntheticDatasetSpec(train_images=6, val_images=3, seed=4)
    (a_train, a_val), (b_train, b_val) = generate_dataset(spec), generate_dataset(spec)
    assert torch.equal(a_train.images, b_train.images)
    assert torch.equal(a_train.labels, b_train.labels)
    assert torch.equal(a_val.images, b_val.images)


def test_different_seed_different_data():
    a, _ = generate_dataset(SyntheticDatasetSpec(train_images=4, seed=0))
    b, _ = generate_dataset(SyntheticDatasetSpec(train_images=4, seed=1))
    assert not torch.equal(a.images, b.images)


@pytest.mark.parametrize("train_images", [8, 16, 64])
def test_training_split_covers_every_class(train_images):
    spec = SyntheticDatasetSpec(num_classes=8, train_images=train_images, max_shapes=5)
    train_split, _ = generate_dataset(spec)
    assert bool((train_split.class_histogram(8) > 0).all())


@pytest.mark.parametrize("changes", [
    {"image_size": 48},
    {"max_shapes": 1000},
    {"min_shapes": 4, "max_shapes": 2},
    {"num_classes": 1},
    {"train_images": 1, "max_shapes": 2, "num_classes": 8},
])
def test_infeasible_specs(changes):
    with pytest.raises(InfeasibleSpecError):
        generate_dataset(SyntheticDatasetSpec(**changes))


@pytest.mark.parametrize("grid", [8, 16, 32])
def test_coarse_grid_fits_shapes_to_the_image(grid):
    spec = SyntheticDatasetSpec(num_classes=2, image_size=32, min_shapes=1, max_shapes=1,
                                grid=grid, train_images=64, val_images=2)
    train_split, val_split = generate_dataset(spec)
    assert train_split.images.shape == (64, 3, 32, 32)
    assert val_split.labels.shape == (2, 32, 32)


# -- LOSSES -- #

def test_perfect_logits_give_zero_seg_loss():
    labels = torch.randint(0, 4, (2, 8, 8))
    logits = 50.0 * torch.nn.functional.one_hot(labels, 4).permute(0, 3, 1, 2).float()
    assert seg_loss(logits, labels).item() < 1e-6


def test_uniform_logits_give_log_k():
    labels = torch.randint(0, 5, (1, 4, 4))
    assert seg_loss(torch.zeros(1, 5, 4, 4), labels).item() == pytest.approx(math.log(5))


def test_seg_loss_matches_direct_evaluation():
    logits = torch.randn(3, 2, 2, dtype=torch.float64)
    labels = torch.tensor([[2, 0], [1, IGNORE_INDEX]])

    terms = [
        -math.log(math.exp(logits[y, i, j]) / sum(math.exp(logits[k, i, j]) for k in range(3)))
        for (i, j), y in zip([(0, 0), (0, 1), (1, 0)], [2, 0, 1])
    ]
    assert seg_loss(logits, labels).item() == pytest.approx(sum(terms) / 3, abs=1e-6)


def test_seg_loss_errors():
    with pytest.raises(AllIgnoredError):
        seg_loss(torch.randn(1, 3, 2, 2), torch.full((1, 2, 2), IGNORE_INDEX))
    with pytest.raises(DimensionError):
        seg_loss(torch.randn(1, 3, 4, 4), torch.zeros(1, 2, 2, dtype=torch.long))


def test_total_loss_weighting():
    parts = torch.tensor(1.0), torch.tensor(2.0), torch.tensor(4.0)
    assert total_loss(*parts, LossWeights(0.5)).total.item() == 5.0
    assert total_loss(*parts, LossWeights(0.0)).total.item() == 3.0
    assert LossWeights().gamma == 0.5


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLossError) as info:
        total_loss(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(0.0))
    assert "align" in info.value.parts


@pytest.mark.parametrize("gamma", [-0.1, float("inf")])
def test_loss_weights_bounds(gamma):
    with pytest.raises(ValueError):
        LossWeights(gamma)


def test_loss_record_total_is_exact():
    record = total_loss(torch.tensor(0.3), torch.tensor(0.7), torch.tensor(0.11),
                        LossWeights(0.5)).as_record()
    assert record["total"] == record["seg"] + record["align"] + 0.5 * record["contrast"]


# -- METRICS -- #

def test_half_half_prediction_all_zero():
    target = torch.tensor([[0, 0, 1, 1]])
    confusion = confusion_matrix(torch.zeros_like(target), target, 2)
    per_class = iou_from_confusion(confusion)

    assert per_class == {0: 0.5, 1: 0.0}
    assert mean_iou(per_class) == 0.25


def test_absent_class_is_excluded():
    target = torch.tensor([[0, 1, IGNORE_INDEX]])
    per_class = iou_from_confusion(confusion_matrix(target.clone(), target, 3))
    assert per_class[2] is None
    assert mean_iou(per_class) == 1.0


class _Oracle(nn.Module):
    """Predicts stored labels; used to exercise evaluate() alone."""

    def __init__(self, split: SegmentationSplit, num_classes: int) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.scale = nn.Parameter(torch.ones(()))
        self.lookup = {float(img.sum()): lbl for img, lbl in zip(split.images, split.labels)}

    def _logits(self, images):
        labels = torch.stack([self.lookup[float(img.sum())] for img in images])
        labels = labels.clamp(max=self.num_classes - 1)
        return self.scale * torch.nn.functional.one_hot(labels, self.num_classes).permute(0, 3, 1, 2).float()

    def forward(self, images):
        return type("Out", (), {"logits": self._logits(images)})()

    def raw_alignment_logits(self, images):
        return self._logits(images)


def test_perfect_prediction_gives_unit_miou(tiny_splits):
    train_split, _ = tiny_splits
    model = _Oracle(train_split, 4)
    for source in EvalSource:
        report = evaluate(model, train_split, source, batch_size=3)
        assert report.miou == 1.0
        assert report.source == source.value


def test_empty_split():
    empty = SegmentationSplit("val", torch.zeros(0, 3, 32, 32), torch.zeros(0, 32, 32, dtype=torch.long))
    with pytest.raises(EmptySplitError):
        evaluate(nn.Linear(1, 1), empty)


# -- MODEL -- #

def test_model_output_shapes(tiny_config):
    model = build_model(tiny_config.model, 4)
    out = model(torch.rand(2, 3, 64, 32))

    assert out.logits.shape == (2, 4, 64, 32)
    assert out.text.shape == (2, 4, 16)
    for stride in STRIDES:
        assert out.alignments[stride].shape == (2, 4, 64 // stride, 32 // stride)
    assert model.decoder.in_channels == 16 + 4


def test_single_scale_fills_zero_scores(tiny_config):
    tiny_config.model.multi_scale = False
    out = build_model(tiny_config.model, 4)(torch.rand(1, 3, 32, 32))
    for stride in STRIDES[:-1]:
        assert torch.equal(out.alignments[stride], torch.zeros_like(out.alignments[stride]))
    assert out.alignments[32].abs().sum() > 0


@pytest.mark.parametrize("mode", ["fixed", "learnable", "instance", "icpc", "cocoop"])
def test_every_prompt_mode_runs(tiny_config, mode):
    tiny_config.model.prompt_mode = mode
    assert build_model(tiny_config.model, 4)(torch.rand(1, 3, 32, 32)).logits.shape == (1, 4, 32, 32)


def test_zero_shot_probabilities(tiny_config):
    probs = build_model(tiny_config.model, 4).zero_shot(torch.rand(3, 3, 32, 32))
    assert probs.shape == (3, 4)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(3))


def test_zero_shot_uses_configured_temperature(tiny_config):
    tiny_config.model.zero_shot_temp = 0.5
    model = build_model(tiny_config.model, 4).eval()
    images = torch.rand(2, 3, 32, 32)

    with torch.no_grad():
        out = model(images)
        expected = zero_shot_probs(out.global_feature, out.text, 0.5)
        torch.testing.assert_close(model.zero_shot(images), expected)
        assert not torch.allclose(model.zero_shot(images, temp=0.01), expected)


def test_zero_shot_temperature_must_be_positive():
    with pytest.raises(ConfigError) as info:
        load_run_config(None, ["model.zero_shot_temp=0"])
    assert info.value.key == "model.zero_shot_temp"


def test_text_encoder_frozen_by_default(tiny_config):
    model = build_model(tiny_config.model, 4)
    flags = model.trainable_flags()
    assert flags == {"image_encoder": True, "text_encoder": False, "prompt": True, "head": True}


def test_image_encoder_learns_at_a_tenth(tiny_config):
    model = build_model(tiny_config.model, 4)
    model.image_encoder.marker = nn.Parameter(torch.tensor(1.0))
    model.decoder.marker = nn.Parameter(torch.tensor(1.0))
    optimizer = build_optimizer(model, TrainConfig(optimizer="sgd", lr=0.5))

    (3.0 * model.image_encoder.marker + 3.0 * model.decoder.marker).backward()
    optimizer.step()

    encoder_move = 1.0 - model.image_encoder.marker.item()
    decoder_move = 1.0 - model.decoder.marker.item()
    assert decoder_move == pytest.approx(1.5)
    assert encoder_move == pytest.approx(0.1 * decoder_move, rel=1e-6)


def test_optimizer_groups_skip_frozen_encoder(tiny_config):
    model = build_model(tiny_config.model, 4)
    optimizer = build_optimizer(model, TrainConfig())
    names = [group["name"] for group in optimizer.param_groups]
    assert names == ["image_encoder", "prompt", "head"]
    lrs = {group["name"]: group["lr"] for group in optimizer.param_groups}
    assert lrs["image_encoder"] == pytest.approx(0.1 * lrs["head"])


def test_end_to_end_finite_differences(tiny_config, tiny_splits):
    tiny_config.train.dtype = "float64"
    model = build_model(tiny_config.model, 4, dtype=torch.float64)
    images, labels = tiny_splits[0][:2]
    images = images.double()

    def objective():
        return compute_losses(model(images), labels, 1, tiny_config)[0].total

    picks = [
        (model.prompt_learner.context, (0, 1)),
        (model.projector.fc1.weight, (2, 3)),
        (model.upsampler.score_up["2"].weight, (1, 0, 1, 0)),
    ]
    model.zero_grad()
    objective().backward()

    eps = 1e-6
    for param, index in picks:
        analytic = param.grad[index].item()
        with torch.no_grad():
            original = param[index].item()
            param[index] = original + eps
            plus = objective().item()
            param[index] = original - eps
            minus = objective().item()
            param[index] = original
        numeric = (plus - minus) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / scale <= 1e-2


# -- CONFIG -- #

def test_default_config_is_valid():
    cfg = load_run_config()
    assert cfg.train.gamma == 0.5
    assert cfg.train.image_encoder_lr_mult == 0.1
    assert cfg.train.freeze_text_encoder


def test_negative_gamma_names_key():
    with pytest.raises(ConfigError) as info:
        load_run_config(None, ["train.gamma=-1"])
    assert info.value.key == "train.gamma"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        load_run_config(None, ["train.gama=0.5"])


def test_short_override_names():
    cfg = load_run_config(None, ["gamma=0.25", "prompt_mode=cocoop", "multi_scale=false"])
    assert cfg.train.gamma == 0.25
    assert cfg.model.prompt_mode == "cocoop"
    assert cfg.model.multi_scale is False


def test_bad_prompt_mode_rejected():
    with pytest.raises(ConfigError) as info:
        load_run_config(None, ["model.prompt_mode=coop"])
    assert info.value.key == "model.prompt_mode"


def test_config_echo_round_trip(tmp_path, tiny_config):
    path = save_run_config(tiny_config, tmp_path / "config.yaml")
    assert load_run_config(path) == tiny_config


def test_shipped_configs_load():
    root = Path(__file__).resolve().parents[2] / "configs"
    for name in ("desk.yaml", "overfit.yaml"):
        assert isinstance(load_run_config(root / name), RunConfig)


# -- TRAINING, CHECKPOINTS -- #

def _read(path: Path) -> list:
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_training_writes_artifacts(tiny_config):
    result = train(tiny_config)

    for name in ("config.yaml", "metrics.jsonl", "checkpoint.pt"):
        assert (result.run_dir / name).is_file()

    records = _read(result.run_dir / "metrics.jsonl")
    steps = [r for r in records if r["kind"] == "step"]
    assert [r["step"] for r in steps] == list(range(4))
    for r in steps:
        assert abs(r["total"] - (r["seg"] + r["align"] + r["gamma"] * r["contrast"])) <= 1e-9
        assert r["n_easy"] >= 0 and r["n_hard"] >= 0

    evals = [r for r in records if r["kind"] == "eval"]
    assert [r["step"] for r in evals if r["split"] == "val" and r["source"] == "decoder"] == [2, 4]
    assert set(result.final) == {"train", "val", "val_raw"}


def test_frozen_text_encoder_is_unchanged(tiny_config):
    result = train(tiny_config)
    before, after = result.text_encoder_hash
    assert before == after

    model, manifest = load_checkpoint(result.checkpoint)
    assert parameter_hash(model.text_encoder) == before
    assert manifest["trainable"]["text_encoder"] is False


def test_unfrozen_text_encoder_moves(tiny_config):
    tiny_config.train.freeze_text_encoder = False
    before, after = train(tiny_config).text_encoder_hash
    assert before != after


def test_changed_frozen_encoder_aborts_before_checkpoint(tiny_config, monkeypatch):
    built = {}

    def leaky_model(*args, **kwargs):
        model = build_model(*args, **kwargs)
        model.set_trainable("text_encoder", True)
        built["model"] = model
        return model

    def leaky_optimizer(model, cfg):
        optimizer = build_optimizer(model, cfg)
        optimizer.add_param_group({"params": list(model.text_encoder.parameters()), "lr": cfg.lr})
        return optimizer

    monkeypatch.setattr(train_module, "build_model", leaky_model)
    monkeypatch.setattr(train_module, "build_optimizer", leaky_optimizer)

    with pytest.raises(FrozenWeightsChangedError) as info:
        train(tiny_config)
    assert info.value.group == "text_encoder"
    assert info.value.before != info.value.after
    assert not (tiny_config.run_dir / "checkpoint.pt").exists()


def test_positive_budget_beyond_coarse_points_is_truncated(tiny_config):
    tiny_config.contrast.positives_per_class = 50
    steps = [r for r in train(tiny_config).records if r["kind"] == "step"]

    assert len(steps) == tiny_config.train.total_steps
    # two 32 px images hold two stride-32 points
    assert all(r["n_easy"] + r["n_hard"] <= 2 for r in steps)


def test_training_is_reproducible(tiny_config, tmp_path):
    first = train(tiny_config, run_dir=tmp_path / "a")
    second = train(tiny_config, run_dir=tmp_path / "b")
    assert (first.run_dir / "metrics.jsonl").read_bytes() == \
        (second.run_dir / "metrics.jsonl").read_bytes()


def test_interval_checkpoints(tiny_config):
    tiny_config.train.checkpoint_every = 2
    result = train(tiny_config)
    assert (result.run_dir / "checkpoint_000002.pt").is_file()
    _, manifest = load_checkpoint(result.run_dir / "checkpoint_000002.pt")
    assert manifest["step"] == 2


def test_checkpoint_round_trip(tiny_config, tiny_splits):
    result = train(tiny_config)
    model, manifest = load_checkpoint(result.checkpoint)

    assert manifest["dims"] == {"N": 2, "C": 16, "D": 16, "K": 4}
    assert manifest["lr_multipliers"]["image_encoder"] == 0.1
    assert evaluate(model, tiny_splits[1]).miou == result.final["val"]
    assert evaluate(model, tiny_splits[1], "raw-alignment").miou == result.final["val_raw"]


def test_raw_alignment_does_not_use_decoder(tiny_config, tiny_splits):
    model = build_model(tiny_config.model, 4)

    def broken(*args, **kwargs):
        raise AssertionError("decoder was called")

    model.decoder.forward = broken
    report = evaluate(model, tiny_splits[1], EvalSource.RAW_ALIGNMENT)
    assert 0.0 <= report.miou <= 1.0


def test_checkpoint_errors(tmp_path, tiny_config):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")

    model = build_model(tiny_config.model, 4)
    path = save_checkpoint(model, tmp_path / "ckpt.pt")
    payload = torch.load(path, weights_only=True)
    payload["manifest"]["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_empty_training_split(tiny_config):
    empty = SegmentationSplit("train", torch.zeros(0, 3, 32, 32), torch.zeros(0, 32, 32, dtype=torch.long))
    with pytest.raises(EmptySplitError):
        train(tiny_config, empty, None)


@pytest.mark.slow
def test_overfit_ten_images(tmp_path):
    root = Path(__file__).resolve().parents[2] / "configs"
    cfg = load_run_config(root / "overfit.yaml", [f"out_dir={tmp_path}"])
    result = train(cfg)

    assert result.final["train"] >= 0.95

    train_split, _ = generate_dataset(cfg.data)
    model, _ = load_checkpoint(result.checkpoint)
    raw = evaluate(model, train_split, EvalSource.RAW_ALIGNMENT).miou
    assert math.isfinite(raw) and raw > 0.0
    assert raw <= result.final["train"] + 0.02


@pytest.mark.slow
def test_ablation_trend_over_seeds(tmp_path):
    root = Path(__file__).resolve().parents[2] / "configs"
    base = load_run_config(root / "desk.yaml", ["train.total_steps=600", "train.eval_every=0",
                                                f"out_dir={tmp_path}"])
    margin = 0.005

    factors = preset("factor-table")
    factors.rows = [r for r in factors.rows if r.name in ("ic", "cl", "ms", "ic+cl+ms")]
    run_sweep(base, factors, tmp_path / "factors", workers=4)
    means = {r["row"]: r["mean"]
             for r in json.loads((tmp_path / "factors" / "summary.json").read_text())["rows"]}
    for single in ("ic", "cl", "ms"):
        assert means["ic+cl+ms"] >= means[single] - margin

    run_sweep(base, preset("prompt-modes"), tmp_path / "modes", workers=4)
    means = {r["row"]: r["mean"]
             for r in json.loads((tmp_path / "modes" / "summary.json").read_text())["rows"]}
    for mode in ("instance", "icpc", "cocoop"):
        assert means[f"prompt_mode-{mode}"] >= means["prompt_mode-fixed"] - margin
