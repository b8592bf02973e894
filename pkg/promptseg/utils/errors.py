"""
Custom exception classes for the promptseg library.

This module defines the error types raised throughout the library so that
callers (and the command line) can tell shape problems, numeric failures
and configuration mistakes apart.
"""

from __future__ import annotations

from typing import Any, Sequence


class PromptSegError(Exception):
    """
    Base class of every error raised by promptseg.
    """
    pass


class DimensionError(PromptSegError):
    """
    Raised when two tensors (or a tensor and a contract) disagree on a size.

    :param expected: The size or shape the operation required.
    :type expected: Any
    :param actual: The size or shape that was received.
    :type actual: Any
    :param what: Short name of the offending quantity, e.g. ``"channel width"``.
    :type what: str
    :param message: Custom error message.
    :type message: str | None
    """
    def __init__(self, expected: Any, actual: Any, what: str = "dimension",
                 message: str | None = None) -> None:
        self.expected = expected
        self.actual = actual
        self.what = what

        if message is None:
            message = (
                f"Mismatched {what}: expected {_fmt(expected)}, "
                f"got {_fmt(actual)}"
            )

        super().__init__(message)


def _fmt(value: Any) -> str:
    if isinstance(value, Sequence) and not isinstance(value, str):
        return "(" + ", ".join(str(v) for v in value) + ")"
    return str(value)


class RaggedSequenceError(PromptSegError):
    """
    Raised when prompt sequences handed to the text encoder differ in length.
    """
    pass


class UnknownModeError(PromptSegError):
    """
    Raised when an enum-like option (prompt mode, sampling strategy,
    evaluation source) receives a value it does not know.

    :param kind: Name of the option.
    :type kind: str
    :param value: The rejected value.
    :type value: Any
    :param choices: The accepted values.
    :type choices: Sequence[str]
    """
    def __init__(self, kind: str, value: Any, choices: Sequence[str]) -> None:
        self.kind = kind
        self.value = value
        self.choices = tuple(choices)
        super().__init__(
            f"Unknown {kind} {value!r}; expected one of: {', '.join(self.choices)}"
        )


class EmptyFeatureMapError(PromptSegError):
    """
    Raised when cross-attention is asked to attend over zero pixels.
    """
    pass


class ZeroNormError(PromptSegError):
    """
    Raised when a cosine similarity involves a zero-norm vector.
    """
    pass


class AllIgnoredError(PromptSegError):
    """
    Raised when every pixel of a label map carries the ignore index, so a
    per-pixel loss has nothing to average over.
    """
    pass


class InfeasibleSpecError(PromptSegError):
    """
    Raised when a synthetic dataset specification cannot be satisfied.
    """
    pass


class NonFiniteLossError(PromptSegError, ArithmeticError):
    """
    Raised when a loss term is NaN or infinite.

    :param parts: Mapping of loss term name to its value at failure time.
    :type parts: dict[str, float]
    """
    def __init__(self, parts: dict[str, float], message: str | None = None) -> None:
        self.parts = dict(parts)
        if message is None:
            joined = ", ".join(f"{k}={v!r}" for k, v in self.parts.items())
            message = f"Non-finite loss ({joined})"
        super().__init__(message)


class DivergenceError(NonFiniteLossError):
    """
    Raised by the training loop when it aborts on a non-finite loss.

    :param step: The optimisation step that diverged.
    :type step: int
    """
    def __init__(self, step: int, parts: dict[str, float]) -> None:
        self.step = step
        joined = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        super().__init__(parts, f"Training diverged at step {step} ({joined})")


class CheckpointError(PromptSegError):
    """
    Raised when a checkpoint is missing, unreadable or of an unknown format.
    """
    pass


class ConfigError(PromptSegError):
    """
    Raised when a run configuration cannot be parsed or fails validation.

    :param key: Dotted key that caused the failure, if known.
    :type key: str | None
    """
    def __init__(self, message: str, key: str | None = None) -> None:
        self.key = key
        super().__init__(message)


class EmptySplitError(PromptSegError):
    """
    Raised when evaluation or training receives a split without images.
    """
    pass


class RunArtifactError(PromptSegError):
    """
    Raised when a run directory lacks a file a command needs (metrics log,
    echoed config, checkpoint).
    """
    pass


class EmptyAnchorWarning(UserWarning):
    """
    Warning emitted when the contrastive loss receives no anchor; the loss is
    then an exact zero.
    """
    pass


class FrozenWeightsChangedError(PromptSegError):
    """
    Raised when a parameter group marked frozen has different weights after
    training than before.

    :param group: Name of the parameter group.
    :type group: str
    :param before: Weight hash when training started.
    :type before: str
    :param after: Weight hash when training ended.
    :type after: str
    """
    def __init__(self, group: str, before: str, after: str) -> None:
        self.group = group
        self.before = before
        self.after = after
        super().__init__(
            f"Frozen {group} changed during training (hash {before[:12]} -> {after[:12]})"
        )
