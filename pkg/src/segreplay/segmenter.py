"""Generalist segmentation model and evaluation metrics.

One shared residual encoder-decoder trunk feeds per-task 1x1 output heads, so
each task keeps a private label space while trunk features are learned across
all of them. Metrics follow the usual segmentation conventions: per-class
overlap (Dice) and the 95th percentile of symmetric boundary distances, with
NaN signalling an empty prediction against a non-empty reference.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .denoiser import ResBlock, init_params
from .errors import ConfigurationError
from .taskgen import LabeledImage


@dataclass(frozen=True)
class SegArchConfig:
    widths: tuple = (16, 32, 64)

    def validate(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigurationError(f"invalid segmenter widths {self.widths}")


class SegmenterNet(nn.Module):
    """Shared trunk plus one output head per task."""

    def __init__(self, arch: SegArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        widths = list(arch.widths)
        self.stem = nn.Conv2d(1, widths[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(ResBlock(w) for w in widths[:-1])
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(len(widths) - 1)
        )
        self.mid = ResBlock(widths[-1])
        self.up_convs = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)
            for i in reversed(range(len(widths) - 1))
        )
        self.fuses = nn.ModuleList(
            nn.Conv2d(2 * widths[i], widths[i], 3, padding=1)
            for i in reversed(range(len(widths) - 1))
        )
        self.dec_blocks = nn.ModuleList(ResBlock(widths[i]) for i in reversed(range(len(widths) - 1)))
        self.heads = nn.ModuleDict()

    def add_head(self, task_id: int, num_classes: int, rng: torch.Generator) -> None:
        key = str(task_id)
        if key in self.heads:
            return
        head = nn.Conv2d(self.arch.widths[0], 1 + num_classes, 1)
        init_params(head, rng)
        self.heads[key] = head

    def has_head(self, task_id: int) -> bool:
        return str(task_id) in self.heads

    def features(self, images: torch.Tensor) -> torch.Tensor:
        x = self.stem(images)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.mid(x)
        for up, fuse, block, skip in zip(self.up_convs, self.fuses, self.dec_blocks, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = fuse(torch.cat([x, skip], dim=1))
            x = block(x)
        return x

    def logits(self, images: torch.Tensor, task_id: int) -> torch.Tensor:
        key = str(task_id)
        if key not in self.heads:
            raise ValueError(f"no output head for task {task_id}")
        return self.heads[key](self.features(images))


def init_segmenter(arch: SegArchConfig, rng: torch.Generator) -> SegmenterNet:
    net = SegmenterNet(arch)
    init_params(net, rng)
    return net


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=0).astype(np.int16)


def predict(net: SegmenterNet, image: np.ndarray, task_id: int) -> np.ndarray:
    """Label map via argmax over the task head's logits; ties to lowest class."""
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
        logits = net.logits(x, task_id)[0].numpy()
    return labels_from_logits(logits)


def seg_loss(net: SegmenterNet, batch: "list[LabeledImage]") -> torch.Tensor:
    """Mean pixelwise cross-entropy through the batch's task head."""
    if not batch:
        raise ValueError("empty batch")
    task_ids = {p.task_id for p in batch}
    if len(task_ids) != 1:
        raise ValueError(f"batch mixes task ids {sorted(task_ids)}")
    images = torch.from_numpy(np.stack([p.image for p in batch]).astype(np.float32))[:, None]
    labels = torch.from_numpy(np.stack([p.mask for p in batch]).astype(np.int64))
    logits = net.logits(images, batch[0].task_id)
    return F.cross_entropy(logits, labels)


# ------------------------------------------------------------------ metrics


@dataclass
class Metrics:
    dice_per_class: np.ndarray
    dice_mean: float
    hd95: float


def dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-foreground-class overlap 2|A∩B|/(|A|+|B|); empty-vs-empty counts as 1."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    scores = np.zeros(num_classes)
    for c in range(1, num_classes + 1):
        p = pred == c
        t = truth == c
        denom = p.sum() + t.sum()
        scores[c - 1] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom
    return scores


def _boundary(binary: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (image border
    neighbours count as background)."""
    padded = np.pad(binary, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return binary & ~interior


def hd95(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """95th percentile of pooled directed boundary distances, averaged over
    foreground classes. NaN when one side of a class is empty and the other is
    not; classes empty on both sides are skipped."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    per_class = []
    for c in range(1, num_classes + 1):
        p = pred == c
        t = truth == c
        if not p.any() and not t.any():
            continue
        if p.any() != t.any():
            return float("nan")
        pb = np.argwhere(_boundary(p)).astype(np.float64)
        tb = np.argwhere(_boundary(t)).astype(np.float64)
        d_pt = cKDTree(tb).query(pb)[0]
        d_tp = cKDTree(pb).query(tb)[0]
        pooled = np.concatenate([d_pt, d_tp])
        per_class.append(float(np.percentile(pooled, 95, method="linear")))
    return float(np.mean(per_class)) if per_class else 0.0


def evaluate_pair(net: SegmenterNet, pair: LabeledImage, num_classes: int) -> Metrics:
    labels = predict(net, pair.image, pair.task_id)
    scores = dice(labels, pair.mask, num_classes)
    return Metrics(
        dice_per_class=scores,
        dice_mean=float(scores.mean()),
        hd95=hd95(labels, pair.mask, num_classes),
    )


def evaluate_dataset(net: SegmenterNet, pairs: "list[LabeledImage]", num_classes: int) -> Metrics:
    """Mean image-level metrics over a split; NaN boundary distances propagate."""
    per_pair = [evaluate_pair(net, pair, num_classes) for pair in pairs]
    dice_stack = np.stack([m.dice_per_class for m in per_pair])
    hd_values = np.array([m.hd95 for m in per_pair])
    return Metrics(
        dice_per_class=dice_stack.mean(axis=0),
        dice_mean=float(dice_stack.mean()),
        hd95=float(hd_values.mean()),
    )
