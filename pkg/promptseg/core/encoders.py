"""
Toy image encoder, text encoder and instance projector.

These small trainable networks stand in for a pre-trained vision-language
model. They keep the interfaces the prompting and alignment code relies on:
an image becomes a four-level feature pyramid plus one global vector, and a
sequence of prompt tokens becomes one text embedding.
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import torch
from torch import Tensor, nn
from typing_extensions import TypeAlias

from promptseg.core.attention import SelfAttentionBlock
from promptseg.core.constants import EMBED_DIM, GLOBAL_DIM, IMAGE_MULTIPLE, STRIDES
from promptseg.utils.errors import DimensionError, RaggedSequenceError, UnknownModeError


FeaturePyramid: TypeAlias = Dict[int, Tensor]
"""Mapping from stride to a ``(B, C, H/stride, W/stride)`` feature map."""

ACTIVATIONS = {
    "tanh": nn.Tanh,
    "relu": nn.ReLU,
    "gelu": nn.GELU,
}


class ImageEncoder(nn.Module):
    """
    Strided convolutional stack producing a feature pyramid.

    A 4x4 patchify stem reaches stride 4; three stride-2 stages reach 8, 16
    and 32. Each stage output passes through a 1x1 convolution that yields
    the (signed) embedding of that level. The global feature is the spatial
    mean of the stride-32 embedding, mapped to width ``global_dim`` by a
    linear layer when it differs from ``embed_dim``.

    :param embed_dim: Channel width ``C`` shared by every level.
    :type embed_dim: int
    :param global_dim: Width ``D`` of the global feature.
    :type global_dim: int
    """
    def __init__(self, embed_dim: int = EMBED_DIM, global_dim: int = GLOBAL_DIM) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.global_dim = global_dim

        self.stem = nn.Sequential(
            nn.Conv2d(3, embed_dim, kernel_size=4, stride=4),
            nn.ReLU(),
            nn.Conv2d(embed_dim, embed_dim, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(embed_dim, embed_dim, kernel_size=3, stride=2, padding=1),
                nn.ReLU(),
            )
            for _ in STRIDES[1:]
        )
        self.heads = nn.ModuleDict(
            {str(s): nn.Conv2d(embed_dim, embed_dim, kernel_size=1) for s in STRIDES}
        )
        self.global_proj: nn.Module = (
            nn.Identity() if global_dim == embed_dim else nn.Linear(embed_dim, global_dim)
        )

    def forward(self, images: Tensor) -> Tuple[FeaturePyramid, Tensor]:
        x = self.stem(images)
        pyramid: FeaturePyramid = {STRIDES[0]: self.heads[str(STRIDES[0])](x)}
        for stride, stage in zip(STRIDES[1:], self.stages):
            x = stage(x)
            pyramid[stride] = self.heads[str(stride)](x)

        pooled = pyramid[STRIDES[-1]].mean(dim=(-2, -1))
        return pyramid, self.global_proj(pooled)


class TextEncoder(nn.Module):
    """
    Two-layer self-attention encoder over prompt token sequences.

    Tokens get a learned positional embedding; the final token's output,
    layer-normalised and projected, is the sequence embedding.

    :param width: Token width ``C``.
    :type width: int
    :param max_length: Longest prompt the positional table covers.
    :type max_length: int
    :param num_layers: Number of attention blocks.
    :type num_layers: int
    :param num_heads: Attention heads per block.
    :type num_heads: int
    """
    def __init__(self, width: int = EMBED_DIM, max_length: int = 16,
                 num_layers: int = 2, num_heads: int = 4) -> None:
        super().__init__()
        self.width = width
        self.max_length = max_length
        self.positional = nn.Parameter(torch.empty(max_length, width))
        nn.init.normal_(self.positional, std=0.01)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(width, num_heads) for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(width)
        self.projection = nn.Linear(width, width, bias=False)

    def forward(self, tokens: Tensor) -> Tensor:
        length = tokens.shape[-2]
        if length > self.max_length:
            raise DimensionError(self.max_length, length, "prompt length (max)")
        x = tokens + self.positional[:length]
        for block in self.blocks:
            x = block(x)
        return self.projection(self.final_norm(x[..., -1, :]))


class Projector(nn.Module):
    """
    Two affine maps with an elementwise nonlinearity between them, mapping a
    global image feature (width ``D``) to one prompt token (width ``C``).

    :param in_dim: Input width ``D``.
    :type in_dim: int
    :param out_dim: Output width ``C``.
    :type out_dim: int
    :param hidden_dim: Hidden width; defaults to ``out_dim``.
    :type hidden_dim: int | None
    :param activation: One of ``tanh``, ``relu``, ``gelu``.
    :type activation: str
    """
    def __init__(self, in_dim: int = GLOBAL_DIM, out_dim: int = EMBED_DIM,
                 hidden_dim: int | None = None, activation: str = "tanh") -> None:
        super().__init__()
        if activation not in ACTIVATIONS:
            raise UnknownModeError("projector activation", activation, list(ACTIVATIONS))
        hidden_dim = out_dim if hidden_dim is None else hidden_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, g: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(g)))


def encode_image(image: Tensor, encoder: ImageEncoder) -> Tuple[FeaturePyramid, Tensor]:
    """
    Encode an image batch into a feature pyramid and a global feature.

    :param image: ``(B, 3, H, W)`` or ``(3, H, W)`` tensor with values in [0, 1].
    :type image: Tensor
    :param encoder: The image encoder.
    :type encoder: ImageEncoder
    :return: Pyramid keyed by stride (4, 8, 16, 32) and the ``(B, D)`` global feature.
    :rtype: Tuple[FeaturePyramid, Tensor]
    :raises DimensionError: If the image is not 3-channel or its height or
                            width is not a multiple of 32.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise DimensionError("(B, 3, H, W)", tuple(image.shape), "image shape")

    height, width = image.shape[-2:]
    if height % IMAGE_MULTIPLE or width % IMAGE_MULTIPLE:
        raise DimensionError(
            f"multiples of {IMAGE_MULTIPLE}", (height, width), "image size",
        )
    return encoder(image)


def encode_text(prompts: Tensor | Sequence[Tensor], encoder: TextEncoder) -> Tensor:
    """
    Encode prompt sequences into text embeddings.

    Gradients reach the prompt tokens even when the encoder parameters are
    frozen, since the tokens are inputs rather than encoder weights.

    :param prompts: ``(K, L, C)`` or ``(B, K, L, C)`` tensor, or a sequence of
                    ``(L, C)`` tensors.
    :type prompts: Tensor | Sequence[Tensor]
    :param encoder: The text encoder.
    :type encoder: TextEncoder
    :return: ``(K, C)`` (or ``(B, K, C)``) text embedding matrix.
    :rtype: Tensor
    :raises RaggedSequenceError: If sequences differ in length.
    :raises DimensionError: If the token width differs from the encoder width.
    """
    if not isinstance(prompts, Tensor):
        lengths = {p.shape[0] for p in prompts}
        if len(lengths) > 1:
            raise RaggedSequenceError(
                f"Prompt sequences must share one length, got lengths {sorted(lengths)}"
            )
        prompts = torch.stack(list(prompts))

    if prompts.shape[-1] != encoder.width:
        raise DimensionError(encoder.width, prompts.shape[-1], "token width")
    return encoder(prompts)


def project_global(g: Tensor, projector: Projector) -> Tensor:
    """
    Map a global image feature to the instance-conditioned prompt token.

    :param g: ``(D,)`` or ``(B, D)`` global feature.
    :type g: Tensor
    :param projector: The projector.
    :type projector: Projector
    :return: ``(C,)`` or ``(B, C)`` instance vector.
    :rtype: Tensor
    :raises DimensionError: If the feature width is not ``D``.
    """
    if g.shape[-1] != projector.in_dim:
        raise DimensionError(projector.in_dim, g.shape[-1], "global feature width")
    return projector(g)
