"""
Prompt assembly, cross-attention text refinement and zero-shot scoring.

A prompt for class ``k`` is a sequence of token embeddings fed to the text
encoder in place of a sentence. In the instance-conditioned layout it reads
``[V_1 .. V_N, I, CLS_k]``: shared learnable context, a token projected from
the current image's global feature, and the class token.
"""

from __future__ import annotations

from enum import Enum

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from promptseg.core.attention import MultiHeadAttention
from promptseg.core.constants import CONTEXT_LENGTH, EMBED_DIM, REFINE_LAMBDA_INIT
from promptseg.utils.errors import (
    DimensionError,
    EmptyFeatureMapError,
    UnknownModeError,
    ZeroNormError,
)


class PromptMode(str, Enum):
    """
    Prompt layouts compared in the prompting ablations.

    ``FIXED`` uses a frozen random context, ``LEARNABLE`` a trainable one,
    ``INSTANCE`` only the instance token and ``ICPC`` the context followed by
    the instance token. ``COCOOP`` adds the instance token to every context
    vector instead of appending it.
    """
    FIXED = "fixed"
    LEARNABLE = "learnable"
    INSTANCE = "instance"
    ICPC = "icpc"
    COCOOP = "cocoop"

    @classmethod
    def parse(cls, value: str | PromptMode) -> PromptMode:
        """
        Accept a mode or its string value.

        :raises UnknownModeError: For unknown values.
        """
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownModeError("prompt mode", value, [m.value for m in cls]) from None

    @property
    def uses_instance(self) -> bool:
        return self in (PromptMode.INSTANCE, PromptMode.ICPC, PromptMode.COCOOP)


def prompt_length(mode: str | PromptMode, context_length: int) -> int:
    """
    Sequence length produced by :func:`build_prompts` for a mode.

    :param mode: Prompt mode.
    :type mode: str | PromptMode
    :param context_length: Number of context vectors ``N``.
    :type context_length: int
    :return: Tokens per prompt, class token included.
    :rtype: int
    """
    mode = PromptMode.parse(mode)
    if mode is PromptMode.ICPC:
        return context_length + 2
    if mode is PromptMode.INSTANCE:
        return 2
    return context_length + 1


def build_prompts(ctx: Tensor, inst: Tensor | None, cls: Tensor,
                  mode: str | PromptMode = PromptMode.ICPC) -> Tensor:
    """
    Assemble one prompt per class.

    ``inst`` may be a single ``(C,)`` vector or a batch ``(B, C)``; in the
    batched case one set of ``K`` prompts is produced per image.

    :param ctx: ``(N, C)`` context vectors (the frozen table in ``fixed`` mode).
    :type ctx: Tensor
    :param inst: Instance vector(s); ignored by ``fixed`` and ``learnable``.
    :type inst: Tensor | None
    :param cls: ``(K, C)`` class token table.
    :type cls: Tensor
    :param mode: Prompt layout.
    :type mode: str | PromptMode
    :return: ``(K, L, C)`` or ``(B, K, L, C)`` prompt tokens.
    :rtype: Tensor
    :raises UnknownModeError: For an unknown mode.
    :raises DimensionError: If token widths disagree or an instance mode
                            receives no instance vector.
    """
    mode = PromptMode.parse(mode)
    width = cls.shape[-1]
    if ctx.shape[-1] != width:
        raise DimensionError(width, ctx.shape[-1], "context width")

    num_classes = cls.shape[0]
    if not mode.uses_instance:
        ctx_k = ctx.unsqueeze(0).expand(num_classes, -1, -1)
        return torch.cat([ctx_k, cls.unsqueeze(1)], dim=1)

    if inst is None:
        raise DimensionError(width, None, f"instance vector width (mode {mode.value!r})")
    if inst.shape[-1] != width:
        raise DimensionError(width, inst.shape[-1], "instance vector width")

    batched = inst.dim() == 2
    inst_b = inst if batched else inst.unsqueeze(0)
    batch = inst_b.shape[0]

    cls_b = cls[None, :, None, :].expand(batch, -1, 1, -1)
    inst_tok = inst_b[:, None, None, :].expand(-1, num_classes, 1, -1)

    if mode is PromptMode.INSTANCE:
        prompts = torch.cat([inst_tok, cls_b], dim=2)
    else:
        ctx_b = ctx[None, None].expand(batch, num_classes, -1, -1)
        if mode is PromptMode.ICPC:
            prompts = torch.cat([ctx_b, inst_tok, cls_b], dim=2)
        else:
            prompts = torch.cat([ctx_b + inst_tok, cls_b], dim=2)

    return prompts if batched else prompts[0]


class PromptLearner(nn.Module):
    """
    Holds the learnable context, the frozen context used by ``fixed`` mode and
    the class token table.

    :param num_classes: Number of classes ``K``.
    :type num_classes: int
    :param width: Token width ``C``.
    :type width: int
    :param context_length: Number of context vectors ``N``.
    :type context_length: int
    """
    def __init__(self, num_classes: int, width: int = EMBED_DIM,
                 context_length: int = CONTEXT_LENGTH) -> None:
        super().__init__()
        self.context = nn.Parameter(torch.empty(context_length, width))
        nn.init.normal_(self.context, std=0.02)
        self.register_buffer("fixed_context", torch.randn(context_length, width) * 0.02)
        self.class_tokens = nn.Parameter(torch.empty(num_classes, width))
        nn.init.normal_(self.class_tokens, std=0.02)

    def forward(self, inst: Tensor | None, mode: str | PromptMode) -> Tensor:
        mode = PromptMode.parse(mode)
        ctx = self.fixed_context if mode is PromptMode.FIXED else self.context
        return build_prompts(ctx, inst, self.class_tokens, mode)


class CrossAttentionRefiner(nn.Module):
    """
    Single cross-attention block refining text embeddings with image pixels.

    Text embeddings are the queries, the flattened feature map supplies keys
    and values, and the result is added back scaled by a trainable ``lambda``.

    :param width: Text embedding width ``C``.
    :type width: int
    :param feature_width: Channel width of the feature map.
    :type feature_width: int | None
    :param num_heads: Attention heads.
    :type num_heads: int
    :param lambda_init: Initial trade-off value.
    :type lambda_init: float
    :param freeze_lambda: Keep ``lambda`` fixed at its initial value.
    :type freeze_lambda: bool
    """
    def __init__(self, width: int = EMBED_DIM, feature_width: int | None = None,
                 num_heads: int = 1, lambda_init: float = REFINE_LAMBDA_INIT,
                 freeze_lambda: bool = False) -> None:
        super().__init__()
        self.width = width
        self.feature_width = width if feature_width is None else feature_width
        self.attn = MultiHeadAttention(width, num_heads, kv_width=self.feature_width)
        self.trade_off = nn.Parameter(torch.tensor(float(lambda_init)),
                                      requires_grad=not freeze_lambda)

    def cross_attend(self, text: Tensor, memory: Tensor) -> Tensor:
        """
        The attention term, before scaling by ``lambda``.

        :param text: ``(K, C)`` or ``(B, K, C)`` text embeddings.
        :param memory: ``(B, HW, C_feat)`` flattened pixels.
        """
        if text.dim() == 2:
            text = text.unsqueeze(0).expand(memory.shape[0], -1, -1)
        return self.attn(text, memory)

    def forward(self, text: Tensor, feat: Tensor) -> Tensor:
        return refine_text(text, feat, self)


def refine_text(text: Tensor, feat: Tensor, params: CrossAttentionRefiner) -> Tensor:
    """
    Refine text embeddings: ``T + lambda * cross_attn(T, pixels)``.

    :param text: ``(K, C)`` or ``(B, K, C)`` text embeddings.
    :type text: Tensor
    :param feat: ``(B, C_feat, H, W)`` or ``(C_feat, H, W)`` feature map.
    :type feat: Tensor
    :param params: The refinement block.
    :type params: CrossAttentionRefiner
    :return: ``(K, C)`` when both inputs are unbatched, else ``(B, K, C)``.
    :rtype: Tensor
    :raises EmptyFeatureMapError: If the feature map has no pixels.
    :raises DimensionError: If widths disagree with the refinement block.
    """
    single = feat.dim() == 3 and text.dim() == 2
    if feat.dim() == 3:
        feat = feat.unsqueeze(0)
    if feat.shape[-2] * feat.shape[-1] == 0:
        raise EmptyFeatureMapError("Cannot refine text against an empty feature map")
    if feat.shape[1] != params.feature_width:
        raise DimensionError(params.feature_width, feat.shape[1], "feature channel width")
    if text.shape[-1] != params.width:
        raise DimensionError(params.width, text.shape[-1], "text embedding width")

    memory = feat.flatten(2).transpose(1, 2)
    refined = text + params.trade_off * params.cross_attend(text, memory)
    return refined[0] if single else refined


def zero_shot_probs(g: Tensor, text: Tensor, temp: float) -> Tensor:
    """
    Class probabilities from the cosine similarity between a global image
    feature and each class embedding: ``softmax(cos(g, T_k) / temp)``.

    :param g: ``(C,)`` or ``(B, C)`` global feature.
    :type g: Tensor
    :param text: ``(K, C)`` or ``(B, K, C)`` text embeddings.
    :type text: Tensor
    :param temp: Positive temperature.
    :type temp: float
    :return: ``(K,)`` or ``(B, K)`` probabilities.
    :rtype: Tensor
    :raises ValueError: If ``temp`` is not positive.
    :raises ZeroNormError: If any vector has zero norm.
    """
    if temp <= 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    if g.shape[-1] != text.shape[-1]:
        raise DimensionError(text.shape[-1], g.shape[-1], "global feature width")
    if bool((g.norm(dim=-1) == 0).any()) or bool((text.norm(dim=-1) == 0).any()):
        raise ZeroNormError("Cosine similarity is undefined for zero-norm vectors")

    sims = (F.normalize(text, dim=-1) @ F.normalize(g, dim=-1).unsqueeze(-1)).squeeze(-1)
    return F.softmax(sims / temp, dim=-1)
