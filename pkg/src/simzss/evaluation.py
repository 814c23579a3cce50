"""Zero-shot segmentation and classification with a trained text tower, plus mIoU."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .alignment import Projection
from .autodiff import ShapeError
from .encoders import TextEncoder, VisionProvider, VisionRepr, resize_bilinear
from .text import BpeVocab, _read_text, tokenize

log = logging.getLogger(__name__)

DESK_TEMPLATES = "templates_desk.txt"
IMAGENET_TEMPLATES = "templates_imagenet.txt"


def load_templates(path: str | Path | None = None, full: bool = False) -> list[str]:
    text = _read_text(path, IMAGENET_TEMPLATES if full else DESK_TEMPLATES)
    out = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    bad = [t for t in out if "{}" not in t]
    if bad:
        raise ValueError(f"templates without a {{}} slot: {bad[:3]}")
    return out


@dataclass
class ClassEmbeddings:
    names: list[str]
    embeddings: np.ndarray  # C x d_v, unit rows
    templates: list[str]

    def __len__(self) -> int:
        return len(self.names)


def embed_classes(
    encoder: TextEncoder,
    g: Projection,
    vocab: BpeVocab,
    names: Sequence[str],
    templates: Sequence[str],
) -> ClassEmbeddings:
    """Template-averaged, projected and l2-normalized [EOS] embedding per class name."""
    if not names:
        raise ValueError("no class names")
    if not templates:
        raise ValueError("no templates")
    rows = []
    with ad.no_grad():
        for name in names:
            caps = [tokenize(vocab, t.replace("{}", name)) for t in templates]
            batch = encoder.forward(encoder.prepare(caps))
            proj = g(batch.global_()).data.astype(np.float64)
            mean = proj.mean(axis=0)
            rows.append(mean / max(np.linalg.norm(mean), 1e-12))
    return ClassEmbeddings(list(names), np.asarray(rows, dtype=np.float32), list(templates))


# ----------------------------------------------------------- segmentation


@dataclass
class SegmentationResult:
    labels: np.ndarray  # H x W ints
    scores: np.ndarray  # H x W winning cosine score
    num_classes: int
    theta: float | None = None
    class_scores: np.ndarray | None = field(default=None, repr=False)  # C x H x W

    @property
    def background_id(self) -> int:
        return self.num_classes


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is clamped to the border."""
    if not 0 < window <= length:
        raise ValueError(f"window {window} must lie in (0, {length}]")
    if not 0 < stride <= window:
        raise ValueError(f"stride {stride} must lie in (0, {window}]")
    n = (length - window + stride - 1) // stride + 1
    starts = [min(i * stride, length - window) for i in range(n)]
    return sorted(set(starts))


def patch_scores(rep: VisionRepr, embeds: ClassEmbeddings) -> np.ndarray:
    """Cosine score per (class, patch row, patch col)."""
    d = rep.dense.astype(np.float64)
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    s = d @ embeds.embeddings.astype(np.float64).T  # n_v x C
    rows, cols = rep.grid
    return s.T.reshape(len(embeds), rows, cols)


def _upsample(scores: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.moveaxis(resize_bilinear(np.moveaxis(scores, 0, -1), h, w), -1, 0)


def scores_to_result(class_scores: np.ndarray) -> SegmentationResult:
    labels = np.argmax(class_scores, axis=0)
    best = np.take_along_axis(class_scores, labels[None], axis=0)[0]
    return SegmentationResult(labels.astype(np.int64), best, class_scores.shape[0], None, class_scores)


def segment(
    provider: VisionProvider,
    embeds: ClassEmbeddings,
    image: np.ndarray,
    shorter_side: int = 64,
    window: int = 64,
    stride: int = 32,
) -> SegmentationResult:
    """Sliding-window dense prediction at the original image resolution."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    p = provider.patch_size
    if h < p or w < p:
        raise ShapeError(f"image {h}x{w} is smaller than one {p}x{p} patch")
    if h <= w:
        rh, rw = shorter_side, max(1, int(round(w * shorter_side / h)))
    else:
        rh, rw = max(1, int(round(h * shorter_side / w))), shorter_side
    resized = img if (rh, rw) == (h, w) else resize_bilinear(img.astype(np.float64) / (255.0 if img.dtype == np.uint8 else 1.0), rh, rw)
    if window > min(rh, rw):
        raise ValueError(f"window {window} exceeds resized image {rh}x{rw}")
    acc = np.zeros((len(embeds), rh, rw))
    count = np.zeros((rh, rw))
    for y in window_starts(rh, window, stride):
        for x in window_starts(rw, window, stride):
            rep = provider.encode_image(resized[y : y + window, x : x + window])
            acc[:, y : y + window, x : x + window] += _upsample(patch_scores(rep, embeds), window, window)
            count[y : y + window, x : x + window] += 1
    fused = acc / count
    return scores_to_result(_upsample(fused, h, w))


def segment_features(rep: VisionRepr, embeds: ClassEmbeddings, out_hw: tuple[int, int]) -> SegmentationResult:
    """Single-window prediction from already-extracted dense features."""
    return scores_to_result(_upsample(patch_scores(rep, embeds), *out_hw))


def apply_background(result: SegmentationResult, theta: float) -> SegmentationResult:
    """Relabel pixels whose winning score is below ``theta`` as background."""
    if not -1.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [-1, 1], got {theta}")
    labels = np.where(result.scores < theta, result.background_id, result.labels)
    return SegmentationResult(labels, result.scores, result.num_classes, theta, result.class_scores)


# ---------------------------------------------------------------- metrics


@dataclass
class MiouReport:
    iou: list[float | None]  # None where the union is empty
    miou: float
    intersection: list[int]
    union: list[int]
    gt_pixels: list[int]
    ignored: int

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        names = list(names) if names is not None else [str(i) for i in range(len(self.iou))]
        return {
            "miou": self.miou,
            "per_class": {n: v for n, v in zip(names, self.iou)},
            "intersection": self.intersection,
            "union": self.union,
            "gt_pixels": self.gt_pixels,
            "ignored": self.ignored,
        }


class ConfusionAccumulator:
    """Summed confusion matrix over images; rows are ground truth, columns prediction."""

    def __init__(self, num_classes: int, ignore_id: int | None = 255):
        self.n = num_classes
        self.ignore_id = ignore_id
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        keep = np.ones(gt.shape, bool) if self.ignore_id is None else gt != self.ignore_id
        self.ignored += int(keep.size - keep.sum())
        g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= self.n or p.min() < 0 or p.max() >= self.n):
            raise ValueError(f"labels outside [0, {self.n})")
        self.matrix += np.bincount(g * self.n + p, minlength=self.n * self.n).reshape(self.n, self.n)

    def report(self) -> MiouReport:
        tp = np.diag(self.matrix)
        gt_tot = self.matrix.sum(axis=1)
        union = gt_tot + self.matrix.sum(axis=0) - tp
        iou = [float(t / u) if u else None for t, u in zip(tp, union)]
        valid = [v for v in iou if v is not None]
        return MiouReport(iou, float(np.mean(valid)) if valid else 0.0, tp.tolist(), union.tolist(), gt_tot.tolist(), self.ignored)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_id: int | None = 255) -> MiouReport:
    acc = ConfusionAccumulator(num_classes, ignore_id)
    acc.update(pred, gt)
    return acc.report()


IGNORE = 255


def gt_foreground(mask: np.ndarray) -> np.ndarray:
    """Dataset mask (0 = background, c + 1 = class c) to class ids with background ignored."""
    m = np.asarray(mask).astype(np.int64)
    return np.where(m == 0, IGNORE, m - 1)


def gt_with_background(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Dataset mask to class ids with background as id ``num_classes``."""
    m = np.asarray(mask).astype(np.int64)
    return np.where(m == 0, num_classes, m - 1)


def theta_grid(step: float = 0.05, hi: float = 0.95) -> list[float]:
    return [round(i * step, 10) for i in range(int(round(hi / step)) + 1)]


def sweep_theta(
    results: Sequence[SegmentationResult],
    masks: Sequence[np.ndarray],
    thetas: Iterable[float] | None = None,
) -> tuple[float, dict[float, float]]:
    """With-background mIoU per theta; returns (best theta, {theta: mIoU}). Ties go to the smaller theta."""
    thetas = list(thetas) if thetas is not None else theta_grid()
    curve = {}
    for th in thetas:
        acc = None
        for res, mask in zip(results, masks):
            acc = acc or ConfusionAccumulator(res.num_classes + 1, None)
            acc.update(apply_background(res, th).labels, gt_with_background(mask, res.num_classes))
        curve[th] = acc.report().miou if acc is not None else 0.0
    best = max(curve, key=lambda t: (curve[t], -t))
    return best, curve


# ---------------------------------------------------------- classification


def classify(provider: VisionProvider, embeds: ClassEmbeddings, image) -> tuple[int, np.ndarray]:
    rep = provider.encode_image(image)
    return classify_repr(rep, embeds)


def classify_repr(rep: VisionRepr, embeds: ClassEmbeddings) -> tuple[int, np.ndarray]:
    v = rep.global_.astype(np.float64)
    v = v / max(np.linalg.norm(v), 1e-12)
    scores = embeds.embeddings.astype(np.float64) @ v
    return int(np.argmax(scores)), scores
