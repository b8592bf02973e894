"""
Run configuration.

A run is described by one :class:`RunConfig`, a tree of dataclasses that
OmegaConf turns into a struct-mode config: YAML files and dotted
``key=value`` overrides are merged onto the defaults, and unknown keys are
rejected. The merged tree is converted back to dataclasses and validated.
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from promptseg.core.constants import (
    ALIGN_TEMPERATURE,
    CONTEXT_LENGTH,
    EMBED_DIM,
    GAMMA,
    GLOBAL_DIM,
    IMAGE_ENCODER_LR_MULT,
    REFINE_LAMBDA_INIT,
    ZERO_SHOT_TEMPERATURE,
)
from promptseg.core.contrastive import ContrastiveConfig
from promptseg.core.encoders import ACTIVATIONS
from promptseg.core.prompting import PromptMode
from promptseg.pipeline.data import SyntheticDatasetSpec
from promptseg.utils.errors import ConfigError, InfeasibleSpecError, UnknownModeError

OPTIMIZERS = ("adamw", "sgd")
DTYPES = ("float32", "float64")

KEY_ALIASES: Dict[str, str] = {
    "prompt_mode": "model.prompt_mode",
    "multi_scale": "model.multi_scale",
    "contrastive": "train.contrastive",
    "gamma": "train.gamma",
    "seed": "train.seed",
    "sampling_strategy": "contrast.sampling_strategy",
    "positives_per_class": "contrast.positives_per_class",
}
"""Short names accepted for the ablation switches in overrides and matrices."""


def resolve_key(key: str) -> str:
    return KEY_ALIASES.get(key, key)


@dataclass
class ModelConfig:
    """
    Architecture switches and widths.

    ``embed_dim`` is the shared width ``C`` of pyramid levels, prompt tokens
    and text embeddings; ``global_dim`` is the width ``D`` of the global
    image feature.
    """
    embed_dim: int = EMBED_DIM
    global_dim: int = GLOBAL_DIM
    context_length: int = CONTEXT_LENGTH
    projector_hidden: Optional[int] = None
    projector_activation: str = "tanh"
    text_layers: int = 2
    text_heads: int = 4
    refine_heads: int = 1
    lambda_init: float = REFINE_LAMBDA_INIT
    freeze_lambda: bool = False
    prompt_mode: str = PromptMode.ICPC.value
    multi_scale: bool = True
    normalize_embeddings: bool = True
    decoder_width: int = 64
    zero_shot_temp: float = ZERO_SHOT_TEMPERATURE


@dataclass
class TrainConfig:
    """
    Optimisation settings and the objective's switches.

    :param image_encoder_lr_mult: Learning-rate multiplier of the image encoder group.
    :param freeze_text_encoder: Exclude the text encoder from optimisation.
    :param gamma: Weight of the contrastive term.
    :param contrastive: Include the contrastive term at all.
    :param align_all_scales: Average the alignment loss over every stride
                             instead of using the stride-32 map only.
    :param optimizer: ``adamw`` or ``sgd`` (plain gradient descent).
    :param eval_every: Validation interval in steps; 0 disables it.
    :param checkpoint_every: Interval checkpoint period; 0 keeps only the final one.
    """
    total_steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    image_encoder_lr_mult: float = IMAGE_ENCODER_LR_MULT
    freeze_text_encoder: bool = True
    batch_size: int = 8
    seed: int = 0
    gamma: float = GAMMA
    contrastive: bool = True
    temp_align: float = ALIGN_TEMPERATURE
    align_all_scales: bool = False
    optimizer: str = "adamw"
    dtype: str = "float32"
    eval_every: int = 200
    checkpoint_every: int = 0
    log_every: int = 50


@dataclass
class RunConfig:
    """
    Everything needed to reproduce one run.
    """
    name: str = "desk"
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    contrast: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    def validate(self) -> None:
        """
        Check every section.

        :raises ConfigError: Naming the first offending dotted key.
        """
        _validate_model(self.model, self.data.num_classes)
        self.contrast.validate("contrast")
        _validate_train(self.train)
        try:
            self.data.check()
        except InfeasibleSpecError as exc:
            raise ConfigError(f"data: {exc}", "data") from None
        if not self.name:
            raise ConfigError("name must not be empty", "name")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _positive(value: float, key: str, allow_zero: bool = False) -> None:
    ok = value >= 0 if allow_zero else value > 0
    if not ok or not math.isfinite(value):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"{key} must be {bound} and finite, got {value}", key)


def _validate_model(cfg: ModelConfig, num_classes: int) -> None:
    for key in ("embed_dim", "global_dim", "context_length", "text_layers",
                "text_heads", "refine_heads", "decoder_width"):
        _positive(getattr(cfg, key), f"model.{key}")
    if cfg.projector_hidden is not None:
        _positive(cfg.projector_hidden, "model.projector_hidden")
    if cfg.embed_dim % cfg.text_heads:
        raise ConfigError(f"model.text_heads ({cfg.text_heads}) must divide "
                          f"model.embed_dim ({cfg.embed_dim})", "model.text_heads")
    if cfg.embed_dim % cfg.refine_heads:
        raise ConfigError(f"model.refine_heads ({cfg.refine_heads}) must divide "
                          f"model.embed_dim ({cfg.embed_dim})", "model.refine_heads")
    if cfg.projector_activation not in ACTIVATIONS:
        raise ConfigError(f"model.projector_activation must be one of {sorted(ACTIVATIONS)}, "
                          f"got {cfg.projector_activation!r}", "model.projector_activation")
    _positive(cfg.zero_shot_temp, "model.zero_shot_temp")
    if not math.isfinite(cfg.lambda_init):
        raise ConfigError("model.lambda_init must be finite", "model.lambda_init")
    try:
        PromptMode.parse(cfg.prompt_mode)
    except UnknownModeError as exc:
        raise ConfigError(f"model.prompt_mode: {exc}", "model.prompt_mode") from None


def _validate_train(cfg: TrainConfig) -> None:
    for key in ("total_steps", "lr", "batch_size", "temp_align", "log_every"):
        _positive(getattr(cfg, key), f"train.{key}")
    for key in ("weight_decay", "image_encoder_lr_mult", "gamma",
                "eval_every", "checkpoint_every"):
        _positive(getattr(cfg, key), f"train.{key}", allow_zero=True)
    if cfg.optimizer not in OPTIMIZERS:
        raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got {cfg.optimizer!r}",
                          "train.optimizer")
    if cfg.dtype not in DTYPES:
        raise ConfigError(f"train.dtype must be one of {DTYPES}, got {cfg.dtype!r}",
                          "train.dtype")


def _config_error(exc: OmegaConfBaseException, source: str) -> ConfigError:
    key = getattr(exc, "full_key", None) or None
    where = f" (key {key})" if key else ""
    message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    return ConfigError(f"{source}{where}: {message}", key)


def load_run_config(path: Union[str, Path, None] = None,
                    overrides: Sequence[str] = (),
                    base: Optional[RunConfig] = None) -> RunConfig:
    """
    Build a validated run configuration.

    :param path: Optional YAML file merged onto the defaults.
    :type path: str | Path | None
    :param overrides: Dotted ``key=value`` strings applied last; the short
                      names of :data:`KEY_ALIASES` are accepted too.
    :type overrides: Sequence[str]
    :param base: Starting point instead of the defaults.
    :type base: RunConfig | None
    :return: The merged configuration.
    :rtype: RunConfig
    :raises ConfigError: On unreadable files, unknown keys, bad values or
                         failed validation.
    """
    merged = OmegaConf.structured(base if base is not None else RunConfig)

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            merged = OmegaConf.merge(merged, OmegaConf.load(path))
        except OmegaConfBaseException as exc:
            raise _config_error(exc, str(path)) from None
        except Exception as exc:  # yaml parse errors surface as plain exceptions
            raise ConfigError(f"{path}: {exc}") from None

    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override {item!r} is not of the form key=value")
        try:
            dotted = f"{resolve_key(key.strip())}={value}"
            merged = OmegaConf.merge(merged, OmegaConf.from_dotlist([dotted]))
        except OmegaConfBaseException as exc:
            raise _config_error(exc, f"override {item!r}") from None

    try:
        cfg = OmegaConf.to_object(merged)
    except OmegaConfBaseException as exc:
        raise _config_error(exc, "config") from None

    assert isinstance(cfg, RunConfig)
    cfg.validate()
    return cfg


def save_run_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """
    Write the effective configuration as YAML.

    :param cfg: Configuration to echo.
    :type cfg: RunConfig
    :param path: Destination file.
    :type path: str | Path
    :return: The written path.
    :rtype: Path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    OmegaConf.save(OmegaConf.structured(cfg), path)
    return path
