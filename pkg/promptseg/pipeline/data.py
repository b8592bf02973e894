"""
Synthetic segmentation data.

Images are tiled with grid-aligned rectangles and crosses on a background
region. Every class owns a colour (evenly spaced hues) and a stripe texture
direction; each shape jitters its class colour and each image applies a
global brightness factor, so images of the same classes still differ from
one another. Label boundaries (the last pixel before a class change, along
rows and columns) carry the ignore index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from torch import Tensor

from promptseg.core.constants import IGNORE_INDEX, IMAGE_MULTIPLE
from promptseg.utils.errors import InfeasibleSpecError

logger = logging.getLogger(__name__)


@dataclass
class SyntheticDatasetSpec:
    """
    Parameters of the synthetic dataset.

    :param num_classes: Number of classes ``K``.
    :param train_images: Images in the training split.
    :param val_images: Images in the validation split.
    :param image_size: Height and width; a multiple of 32.
    :param min_shapes: Fewest shapes drawn over the background.
    :param max_shapes: Most shapes drawn over the background.
    :param grid: Shape edges snap to multiples of this many pixels.
    :param seed: Generator seed.
    """
    num_classes: int = 8
    train_images: int = 64
    val_images: int = 16
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    grid: int = 4
    seed: int = 0

    def check(self) -> None:
        """
        :raises InfeasibleSpecError: If the spec cannot be generated.
        """
        if self.num_classes < 2:
            raise InfeasibleSpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size <= 0 or self.image_size % IMAGE_MULTIPLE:
            raise InfeasibleSpecError(
                f"image_size must be a positive multiple of {IMAGE_MULTIPLE}, got {self.image_size}"
            )
        if self.grid <= 0 or self.image_size % self.grid:
            raise InfeasibleSpecError(f"grid {self.grid} must divide image_size {self.image_size}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise InfeasibleSpecError(
                f"shape range [{self.min_shapes}, {self.max_shapes}] is empty or negative"
            )
        cells = (self.image_size // self.grid) ** 2
        if self.max_shapes > cells:
            raise InfeasibleSpecError(
                f"max_shapes {self.max_shapes} exceeds the {cells} grid cells of an image"
            )
        if self.train_images < 1 or self.val_images < 0:
            raise InfeasibleSpecError("train_images must be >= 1 and val_images >= 0")
        if self.train_images * (1 + self.max_shapes) < self.num_classes:
            raise InfeasibleSpecError(
                f"{self.train_images} training images with at most {self.max_shapes} shapes "
                f"cannot show all {self.num_classes} classes"
            )


@dataclass
class SegmentationSplit:
    """
    One split of image/label pairs.

    :param name: Split name (``train`` or ``val``).
    :param images: ``(N, 3, H, W)`` float32 images in [0, 1].
    :param labels: ``(N, H, W)`` int64 labels in ``{0..K-1} U {ignore}``.
    """
    name: str
    images: Tensor
    labels: Tensor

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __getitem__(self, index) -> Tuple[Tensor, Tensor]:
        return self.images[index], self.labels[index]

    def class_histogram(self, num_classes: int) -> Tensor:
        """Pixel count per class, ignore pixels excluded."""
        valid = self.labels[self.labels != IGNORE_INDEX]
        return torch.bincount(valid.reshape(-1), minlength=num_classes)


def class_palette(num_classes: int) -> np.ndarray:
    """
    Evenly spaced hues at fixed saturation and value.

    :param num_classes: Number of classes.
    :type num_classes: int
    :return: ``(K, 3)`` RGB colours in [0, 1].
    :rtype: np.ndarray
    """
    hsv = np.stack([
        np.arange(num_classes) / num_classes,
        np.full(num_classes, 0.75),
        np.full(num_classes, 0.85),
    ], axis=1)
    return hsv_to_rgb(hsv)


def _class_textures(num_classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    textures = np.empty((num_classes, size, size))
    for k in range(num_classes):
        angle = np.pi * k / num_classes
        period = 4.0 + 2.0 * (k % 3)
        phase = xx * np.cos(angle) + yy * np.sin(angle)
        textures[k] = 0.06 * np.sin(2.0 * np.pi * phase / period)
    return textures


def _shape_mask(rng: np.random.Generator, spec: SyntheticDatasetSpec) -> np.ndarray:
    cells = spec.image_size // spec.grid
    mask = np.zeros((cells, cells), dtype=bool)
    low, high = min(2, cells), min(max(3, cells // 2), cells)
    h = int(rng.integers(low, high + 1))
    w = int(rng.integers(low, high + 1))
    top = int(rng.integers(0, cells - h + 1))
    left = int(rng.integers(0, cells - w + 1))

    if rng.random() < 0.5 or min(h, w) < 3:
        mask[top:top + h, left:left + w] = True
    else:
        mid_r, mid_c = top + h // 2, left + w // 2
        mask[top:top + h, mid_c:mid_c + 1] = True
        mask[mid_r:mid_r + 1, left:left + w] = True

    return np.kron(mask, np.ones((spec.grid, spec.grid), dtype=bool)).astype(bool)


def _boundary(label: np.ndarray) -> np.ndarray:
    edge = np.zeros_like(label, dtype=bool)
    edge[:-1, :] |= label[:-1, :] != label[1:, :]
    edge[:, :-1] |= label[:, :-1] != label[:, 1:]
    return edge


def _render(rng: np.random.Generator, spec: SyntheticDatasetSpec, palette: np.ndarray,
            textures: np.ndarray, background: int,
            forced: list[int]) -> Tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    label = np.full((size, size), background, dtype=np.int64)
    tint = np.zeros((size, size, 3))
    tint[:] = rng.normal(0.0, 0.04, 3)

    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    classes = [int(rng.integers(spec.num_classes)) for _ in range(max(0, count - len(forced)))]
    for cls in classes + forced:
        mask = _shape_mask(rng, spec)
        label[mask] = cls
        tint[mask] = rng.normal(0.0, 0.04, 3)

    brightness = rng.uniform(0.8, 1.2)
    stripes = np.take_along_axis(textures, label[None], axis=0)[0]
    image = palette[label] + tint + stripes[..., None]
    image = image * brightness + rng.normal(0.0, 0.02, image.shape)
    image = np.clip(image, 0.0, 1.0)

    label = label.copy()
    label[_boundary(label)] = IGNORE_INDEX
    return image.astype(np.float32), label


def _build_split(name: str, rng: np.random.Generator, spec: SyntheticDatasetSpec,
                 count: int, cover: bool) -> SegmentationSplit:
    palette = class_palette(spec.num_classes)
    textures = _class_textures(spec.num_classes, spec.image_size)

    order = rng.permutation(spec.num_classes).tolist()
    leftover = order[count:] if cover else []

    images, labels = [], []
    for i in range(count):
        if cover and i < spec.num_classes:
            background = order[i]
        else:
            background = int(rng.integers(spec.num_classes))
        forced = leftover[i::count] if leftover else []
        image, label = _render(rng, spec, palette, textures, background, forced)
        images.append(image)
        labels.append(label)

    size = spec.image_size
    if count:
        image_arr = np.stack(images).transpose(0, 3, 1, 2)
        label_arr = np.stack(labels)
    else:
        image_arr = np.zeros((0, 3, size, size), dtype=np.float32)
        label_arr = np.zeros((0, size, size), dtype=np.int64)

    return SegmentationSplit(name, torch.from_numpy(np.ascontiguousarray(image_arr)),
                             torch.from_numpy(label_arr))


def generate_dataset(spec: SyntheticDatasetSpec) -> Tuple[SegmentationSplit, SegmentationSplit]:
    """
    Generate the training and validation splits.

    Deterministic given ``spec.seed``: the two splits draw from independent
    child streams of one seed sequence.

    :param spec: Dataset specification.
    :type spec: SyntheticDatasetSpec
    :return: ``(train, val)`` splits.
    :rtype: Tuple[SegmentationSplit, SegmentationSplit]
    :raises InfeasibleSpecError: If the spec is infeasible or some class ends
                                 up absent from the training split.
    """
    spec.check()
    train_seq, val_seq = np.random.SeedSequence(spec.seed).spawn(2)

    train = _build_split("train", np.random.default_rng(train_seq), spec,
                         spec.train_images, cover=True)
    val = _build_split("val", np.random.default_rng(val_seq), spec,
                       spec.val_images, cover=False)

    missing = (train.class_histogram(spec.num_classes) == 0).nonzero().flatten().tolist()
    if missing:
        raise InfeasibleSpecError(f"classes {missing} are absent from the training split")

    logger.debug("Generated %d train / %d val images of size %d with %d classes",
                 len(train), len(val), spec.image_size, spec.num_classes)
    return train, val
