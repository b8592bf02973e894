"""
Static plots of a finished run: the convergence curve and a 2-D projection
of pixel and class embeddings.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from promptseg.core.alignment import resize_labels  # noqa: E402
from promptseg.core.constants import IGNORE_INDEX, STRIDES  # noqa: E402
from promptseg.pipeline.checkpoint import load_checkpoint  # noqa: E402
from promptseg.pipeline.config import load_run_config  # noqa: E402
from promptseg.pipeline.data import SegmentationSplit, class_palette, generate_dataset  # noqa: E402
from promptseg.pipeline.model import PromptSegmentor  # noqa: E402
from promptseg.pipeline.train import CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE  # noqa: E402
from promptseg.utils.errors import RunArtifactError, UnknownModeError  # noqa: E402

logger = logging.getLogger(__name__)

PROJECTIONS = ("pca", "tsne")


def load_metrics(run_dir: str | Path) -> List[dict]:
    """
    Read a run's metrics log.

    :raises RunArtifactError: If the log is missing or empty.
    """
    path = Path(run_dir) / METRICS_FILE
    if not path.is_file():
        raise RunArtifactError(f"No metrics log in {run_dir}")
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise RunArtifactError(f"Metrics log {path} is empty")
    return records


def plot_convergence(run_dir: str | Path, out: str | Path | None = None) -> Path:
    """
    Validation mIoU against step, with the total loss on a second axis.

    :param run_dir: Finished run directory.
    :type run_dir: str | Path
    :param out: Image path; ``<run>/plots/convergence.png`` by default.
    :type out: str | Path | None
    :return: The written image.
    :rtype: Path
    :raises RunArtifactError: If the metrics log is missing or empty.
    """
    run_dir = Path(run_dir)
    records = load_metrics(run_dir)
    steps = [r for r in records if r["kind"] == "step"]
    evals = [r for r in records
             if r["kind"] == "eval" and r["split"] == "val" and r.get("source", "decoder") == "decoder"]

    fig, ax = plt.subplots(figsize=(7, 4))
    if evals:
        ax.plot([r["step"] for r in evals], [100.0 * r["miou"] for r in evals],
                marker="o", color="tab:blue", label="val mIoU")
    ax.set_xlabel("step")
    ax.set_ylabel("val mIoU (%)")
    ax.grid(alpha=0.3)

    if steps:
        loss_ax = ax.twinx()
        loss_ax.plot([r["step"] for r in steps], [r["total"] for r in steps],
                     color="tab:gray", alpha=0.5, linewidth=0.8, label="total loss")
        loss_ax.set_ylabel("total loss")

    ax.set_title(run_dir.name)
    fig.tight_layout()

    path = Path(out) if out is not None else run_dir / "plots" / "convergence.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


@dataclass
class EmbeddingProjection:
    """
    :param pixels: ``(M, 2)`` projected pixel embeddings.
    :param labels: ``(M,)`` pixel classes.
    :param text: ``(K, 2)`` projected class embeddings.
    """
    pixels: np.ndarray
    labels: np.ndarray
    text: np.ndarray


def _pca(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    pivots = np.abs(components).argmax(axis=1)
    components = components * np.sign(components[np.arange(len(components)), pivots])[:, None]
    return centered @ components.T


def _tsne(points: np.ndarray, seed: int) -> np.ndarray:
    try:
        from sklearn.manifold import TSNE
    except ImportError as exc:
        raise RunArtifactError(
            "The tsne projection needs scikit-learn (pip install 'promptseg[tsne]')"
        ) from exc
    perplexity = float(min(30.0, max(2.0, (len(points) - 1) / 3)))
    return TSNE(n_components=2, perplexity=perplexity, init="pca",
                random_state=seed).fit_transform(points)


@torch.no_grad()
def project_embeddings(model: PromptSegmentor, split: SegmentationSplit,
                       method: str = "pca", max_images: int = 16,
                       max_pixels: int = 2000, seed: int = 0) -> EmbeddingProjection:
    """
    Project stride-4 pixel embeddings and the ``K`` class embeddings into
    one 2-D space.

    Class embeddings are the refined text embeddings averaged over the
    images used. Both sides are L2-normalised first.

    :param model: Trained model.
    :type model: PromptSegmentor
    :param split: Images to draw pixels from.
    :type split: SegmentationSplit
    :param method: ``pca`` (deterministic) or ``tsne``.
    :type method: str
    :param max_images: Images used.
    :type max_images: int
    :param max_pixels: Pixels kept after dropping ignored ones.
    :type max_pixels: int
    :param seed: Seed of the pixel subsample and of t-SNE.
    :type seed: int
    :return: The projection.
    :rtype: EmbeddingProjection
    :raises UnknownModeError: For an unknown method.
    """
    if method not in PROJECTIONS:
        raise UnknownModeError("projection method", method, PROJECTIONS)

    model.eval()
    dtype = next(model.parameters()).dtype
    images, labels = split[:max_images]
    out = model(images.to(dtype))

    feat = out.pyramid[STRIDES[0]]
    target = resize_labels(labels, feat.shape[-2:]).reshape(-1)
    pixels = feat.permute(0, 2, 3, 1).reshape(-1, feat.shape[1])
    keep = target != IGNORE_INDEX
    pixels, target = pixels[keep], target[keep]

    if len(target) > max_pixels:
        chosen = np.random.default_rng(seed).choice(len(target), max_pixels, replace=False)
        chosen = torch.from_numpy(np.sort(chosen))
        pixels, target = pixels[chosen], target[chosen]

    text = F.normalize(F.normalize(out.text, dim=-1).mean(dim=0), dim=-1)
    stacked = torch.cat([F.normalize(pixels, dim=-1), text]).double().numpy()
    xy = _pca(stacked) if method == "pca" else _tsne(stacked, seed)

    count = len(target)
    return EmbeddingProjection(xy[:count], target.numpy(), xy[count:])


def plot_embeddings(run_dir: str | Path, method: str = "pca",
                    out: str | Path | None = None) -> Path:
    """
    Scatter of projected pixel embeddings coloured by class, with the class
    embeddings overlaid as stars.

    :param run_dir: Finished run directory (needs the checkpoint and config).
    :type run_dir: str | Path
    :param method: ``pca`` or ``tsne``.
    :type method: str
    :param out: Image path; ``<run>/plots/embeddings_<method>.png`` by default.
    :type out: str | Path | None
    :return: The written image.
    :rtype: Path
    :raises RunArtifactError: If the checkpoint or config is missing.
    """
    run_dir = Path(run_dir)
    for name in (CHECKPOINT_FILE, CONFIG_FILE):
        if not (run_dir / name).is_file():
            raise RunArtifactError(f"No {name} in {run_dir}")

    cfg = load_run_config(run_dir / CONFIG_FILE)
    model, _ = load_checkpoint(run_dir / CHECKPOINT_FILE)
    train_split, val_split = generate_dataset(cfg.data)
    split = val_split if len(val_split) else train_split
    projection = project_embeddings(model, split, method, seed=cfg.train.seed)

    palette = class_palette(model.num_classes)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(projection.pixels[:, 0], projection.pixels[:, 1], s=4, alpha=0.4,
               c=palette[projection.labels])
    ax.scatter(projection.text[:, 0], projection.text[:, 1], s=260, marker="*",
               c=palette, edgecolors="black", linewidths=0.8, label="class embeddings")
    for k, (x, y) in enumerate(projection.text):
        ax.annotate(str(k), (x, y), textcoords="offset points", xytext=(6, 6), fontsize=8)
    ax.set_title(f"{run_dir.name} ({method})")
    ax.legend(loc="best")
    fig.tight_layout()

    path = Path(out) if out is not None else run_dir / "plots" / f"embeddings_{method}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.debug("Wrote %s", path)
    return path
