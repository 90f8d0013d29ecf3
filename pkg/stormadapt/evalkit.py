"""Detection evaluation: IoU, per-class AP, mAP, intensity sweeps and
hardness diagnostics.

AP is the area under the all-point interpolated precision/recall curve, with
greedy highest-confidence-first matching at IoU >= 0.5 (one prediction per
ground-truth box).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .detcore import DomainAdaptiveDetector, backbone_forward, predict
from .errors import InputError
from .metricreg import FeatureTriplet, ordering_rate
from .toyscenes import AlignedTriplet, DatasetManifest, TripletDataset
from .weathergen import to_uint8

logger = logging.getLogger(__name__)

INTERPOLATION = "all-point"
CLEAR_ROW = "clear"


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x0, y0, x1, y1)`` boxes; 0 when either is degenerate."""
    ax0, ay0, ax1, ay1 = map(float, a)
    bx0, by0, bx1, by1 = map(float, b)
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = max(min(ax1, bx1) - max(ax0, bx0), 0.0)
    ih = max(min(ay1, by1) - max(ay0, by0), 0.0)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def precision_recall(
    predictions: Sequence[tuple[Hashable, Sequence[float], float]],
    ground_truths: Mapping[Hashable, np.ndarray],
    iou_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision and recall after each prediction, best first.

    Equal confidences are ordered by image id and then box, so the result
    does not depend on input order.
    """
    num_gt = sum(len(boxes) for boxes in ground_truths.values())
    ordered = sorted(
        predictions, key=lambda p: (-float(p[2]), str(p[0]), tuple(map(float, p[1])))
    )
    used = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in ground_truths.items()}
    tp = np.zeros(len(ordered))
    for i, (image_id, box, _) in enumerate(ordered):
        gt = ground_truths.get(image_id)
        if gt is None or len(gt) == 0:
            continue
        overlaps = np.array([iou(box, g) for g in gt])
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold and not used[image_id][best]:
            used[image_id][best] = True
            tp[i] = 1
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, len(ordered) + 1)
    recall = hits / num_gt if num_gt else np.zeros_like(hits)
    return precision, recall


def average_precision(
    predictions: Sequence[tuple[Hashable, Sequence[float], float]],
    ground_truths: Mapping[Hashable, np.ndarray],
    iou_threshold: float = 0.5,
) -> float | None:
    """All-point AP of one class; ``None`` when the class has no ground truth."""
    if sum(len(boxes) for boxes in ground_truths.values()) == 0:
        return None
    if not predictions:
        return 0.0
    precision, recall = precision_recall(predictions, ground_truths, iou_threshold)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class ImageDetections:
    image_id: str
    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray


@dataclass
class DetectionSet:
    images: list[ImageDetections] = field(default_factory=list)

    def add(self, item: ImageDetections) -> None:
        self.images.append(item)

    def class_view(self, class_id: int):
        predictions = [
            (img.image_id, box, float(score))
            for img in self.images
            for box, label, score in zip(img.boxes, img.labels, img.scores)
            if int(label) == class_id
        ]
        ground_truths = {
            img.image_id: img.gt_boxes[img.gt_labels == class_id] for img in self.images
        }
        return predictions, ground_truths


@dataclass
class MapResult:
    map: float
    per_class: dict[str, float | None]
    interpolation: str = INTERPOLATION

    def as_row(self) -> dict[str, float | str]:
        row: dict[str, float | str] = {"mAP": self.map}
        for name, ap in self.per_class.items():
            row[f"AP_{name}"] = "" if ap is None else ap
        return row


def mean_ap(detections: DetectionSet, class_names: Sequence[str],
            iou_threshold: float = 0.5) -> MapResult:
    per_class: dict[str, float | None] = {}
    for class_id, name in enumerate(class_names):
        ap = average_precision(*detections.class_view(class_id), iou_threshold=iou_threshold)
        if ap is None:
            logger.warning("class %r has no ground truth; left out of mAP", name)
        per_class[name] = ap
    scored = [ap for ap in per_class.values() if ap is not None]
    return MapResult(map=float(np.mean(scored)) if scored else 0.0, per_class=per_class)


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------


def detect(model: DomainAdaptiveDetector, triplets: Iterable[AlignedTriplet],
           member: str = "target") -> DetectionSet:
    """Run the detector on one member image of each triplet."""
    out = DetectionSet()
    for triplet in triplets:
        sample = getattr(triplet, member)
        found = predict(model, sample.image)
        out.add(ImageDetections(
            image_id=triplet.sample_id,
            boxes=found.boxes.numpy(),
            labels=found.labels.numpy(),
            scores=found.scores.numpy(),
            gt_boxes=sample.boxes,
            gt_labels=sample.labels,
        ))
    return out


def evaluate_model(model: DomainAdaptiveDetector, triplets: Iterable[AlignedTriplet],
                   class_names: Sequence[str], member: str = "target") -> MapResult:
    return mean_ap(detect(model, triplets, member), class_names)


def intensity_sweep(
    model: DomainAdaptiveDetector,
    splits: Mapping[str, DatasetManifest | Sequence[AlignedTriplet]],
    class_names: Sequence[str],
    *,
    include_clear: bool = True,
) -> dict[str, MapResult]:
    """mAP per intensity level, plus the clear source images as a reference row."""
    results: dict[str, MapResult] = {}
    first: Sequence[AlignedTriplet] | None = None
    for level, split in splits.items():
        triplets = TripletDataset(split) if isinstance(split, DatasetManifest) else split
        first = first if first is not None else triplets
        results[level] = evaluate_model(model, triplets, class_names)
        logger.info("%s: mAP %.4f", level, results[level].map)
    if include_clear and first is not None:
        results[CLEAR_ROW] = evaluate_model(model, first, class_names, member="source")
    return results


def write_map_csv(path: Path, results: Mapping[str, MapResult], key: str = "level") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{key: name, **result.as_row()} for name, result in results.items()]
    fieldnames = list(rows[0]) if rows else [key, "mAP"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# Hardness diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HardnessRecord:
    sample_id: str
    ah: float
    rank: int


@torch.no_grad()
def adaptation_hardness(model: DomainAdaptiveDetector, triplet: AlignedTriplet) -> float:
    """Summed absolute difference of source and target backbone features."""
    f_s = backbone_forward(model, triplet.source.image).maps
    f_t = backbone_forward(model, triplet.target.image).maps
    return float((f_s - f_t).abs().sum())


def hardness_rank(pairs: Iterable[tuple[str, float]]) -> list[HardnessRecord]:
    """Rank 1 is the hardest sample (smallest ah); ties go by id."""
    pairs = list(pairs)
    for sample_id, ah in pairs:
        if not np.isfinite(ah):
            raise InputError(f"hardness of {sample_id!r} is not finite")
    ordered = sorted(pairs, key=lambda p: (float(p[1]), str(p[0])))
    return [HardnessRecord(str(s), float(ah), rank) for rank, (s, ah) in enumerate(ordered, 1)]


def rank_dataset(model: DomainAdaptiveDetector,
                 triplets: Iterable[AlignedTriplet]) -> list[HardnessRecord]:
    return hardness_rank((t.sample_id, adaptation_hardness(model, t)) for t in triplets)


def write_hardness_csv(path: Path, records: Sequence[HardnessRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "sample_id", "ah"])
        for r in records:
            writer.writerow([r.rank, r.sample_id, repr(r.ah)])
    return path


@dataclass
class DomainDistances:
    sample_id: str
    source_target: float
    source_auxiliary: float
    target_auxiliary: float


DOMAINS = ("source", "target", "auxiliary")


@torch.no_grad()
def pooled_embeddings(model: DomainAdaptiveDetector,
                      triplets: Sequence[AlignedTriplet]) -> dict[str, torch.Tensor]:
    """Globally averaged backbone features, N x C per domain."""
    return {
        member: torch.stack([
            backbone_forward(model, getattr(t, member).image).maps.mean(dim=(2, 3))[0]
            for t in triplets
        ]) if len(triplets) else torch.zeros(0, model.backbone.out_channels)
        for member in DOMAINS
    }


def domain_distances(model: DomainAdaptiveDetector,
                     triplets: Sequence[AlignedTriplet]) -> list[DomainDistances]:
    """Pooled embeddings compared pairwise within each triplet."""
    pooled = pooled_embeddings(model, triplets)
    out = []
    for i, t in enumerate(triplets):
        s, g, a = (pooled[m][i] for m in DOMAINS)
        out.append(DomainDistances(
            t.sample_id,
            source_target=float(torch.dist(s, g)),
            source_auxiliary=float(torch.dist(s, a)),
            target_auxiliary=float(torch.dist(g, a)),
        ))
    return out


def embedding_ordering_rate(pooled: Mapping[str, torch.Tensor]) -> float:
    """Share of samples whose pooled source embedding is nearer the target than the auxiliary."""
    if pooled["source"].shape[0] == 0:
        return float("nan")
    return ordering_rate(FeatureTriplet(pooled["source"], pooled["target"], pooled["auxiliary"]))


def write_projection_csv(path: Path, pooled: Mapping[str, torch.Tensor],
                         sample_ids: Sequence[str]) -> Path:
    """2D PCA of all domains' pooled embeddings, one row per (domain, sample)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = project_2d(torch.cat([pooled[m] for m in DOMAINS]))
    labels = [(m, s) for m in DOMAINS for s in sample_ids]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "sample_id", "x", "y"])
        for (domain, sample_id), (x, y) in zip(labels, points):
            writer.writerow([domain, sample_id, repr(float(x)), repr(float(y))])
    return path


def write_distances_csv(path: Path, rows: Sequence[DomainDistances]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "source_target", "source_auxiliary", "target_auxiliary"])
        for r in rows:
            writer.writerow([r.sample_id, repr(r.source_target), repr(r.source_auxiliary),
                             repr(r.target_auxiliary)])
    return path


def project_2d(embeddings: torch.Tensor | np.ndarray) -> np.ndarray:
    """First two principal components of an N x D embedding matrix."""
    x = torch.as_tensor(np.asarray(embeddings), dtype=torch.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("project_2d needs an N x D matrix with N >= 2")
    x = x - x.mean(dim=0, keepdim=True)
    _, _, vh = torch.linalg.svd(x, full_matrices=False)
    components = vh[:2]
    if components.shape[0] < 2:
        components = torch.cat([components, components.new_zeros(1, x.shape[1])])
    return (x @ components.T).numpy()


def render_detections(
    image: np.ndarray,
    boxes: np.ndarray,
    labels: np.ndarray,
    class_names: Sequence[str],
    scores: np.ndarray | None = None,
    path: Path | None = None,
) -> Image.Image:
    """Draw boxes and class names onto a copy of ``image``."""
    canvas = Image.fromarray(to_uint8(image))
    draw = ImageDraw.Draw(canvas)
    palette = [(255, 64, 64), (64, 200, 64), (64, 128, 255), (240, 200, 0)]
    for i, (box, label) in enumerate(zip(boxes, labels)):
        color = palette[int(label) % len(palette)]
        x0, y0, x1, y1 = (float(v) for v in box)
        draw.rectangle([x0, y0, x1, y1], outline=color)
        text = class_names[int(label)]
        if scores is not None:
            text = f"{text} {float(scores[i]):.2f}"
        draw.text((x0 + 1, y0 + 1), text, fill=color)
    if path is not None:
        canvas.save(path)
    return canvas
