"""Toy two-stage detector with domain-adaptation heads, and its training loop.

backbone (stride 8) -> RPN -> RoI pooling -> RoI head, plus an image-level
and an object-level domain classifier behind adversarial gradient reversal.
One training step consumes one aligned triplet and minimises

    total = gamma * (L_img + L_obj + L_R_img + L_R_obj) + L_cls + L_reg

where detection losses come from the source image only, domain losses from
source and target, and the triplet terms from all three images.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader
from torchvision.ops import batched_nms, box_iou, nms, roi_align
from torchvision.ops import roi_pool as tv_roi_pool

from .config import ExperimentConfig, ModelConfig
from .daheads import (
    DomainLabel,
    ImageDomainClassifier,
    ObjectDomainClassifier,
    img_domain_loss,
    obj_domain_loss,
    proposal_labels,
)
from .errors import CheckpointError, InputError, TrainingError
from .metricreg import FeatureTriplet, img_triplet_loss, obj_triplet_loss, ordering_rate
from .revgrad import AdversarialGradientReversal, AdvGrlConfig
from .toyscenes import AlignedTriplet
from .weathergen import apply_dmp

logger = logging.getLogger(__name__)

STRIDE = 8
RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
MAX_LOG_SCALE = math.log(1000.0 / 16)

CHECKPOINT_FORMAT = "stormadapt-checkpoint"
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.pt"
METRICS_NAME = "metrics.csv"
METRIC_COLUMNS = (
    "iteration", "lr", "L_cls", "L_reg", "L_img", "L_obj", "L_R_img", "L_R_obj",
    "gamma", "total", "lambda_img", "lambda_obj", "ordering_rate_img", "ordering_rate_obj",
)


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class BackboneFeatures:
    maps: torch.Tensor  # N x C x H/8 x W/8
    stride: int = STRIDE


@dataclass
class ProposalSet:
    boxes: torch.Tensor   # K x 4, clipped, score-descending
    scores: torch.Tensor  # K

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def top(self, k: int) -> torch.Tensor:
        return self.boxes[:k]


@dataclass
class LossBundle:
    cls: torch.Tensor
    reg: torch.Tensor
    img: torch.Tensor
    obj: torch.Tensor
    reg_img: torch.Tensor
    reg_obj: torch.Tensor
    gamma: float
    total: torch.Tensor

    COLUMNS = {
        "L_cls": "cls", "L_reg": "reg", "L_img": "img", "L_obj": "obj",
        "L_R_img": "reg_img", "L_R_obj": "reg_obj",
    }

    def as_row(self) -> dict[str, float]:
        row = {name: float(getattr(self, attr).detach()) for name, attr in self.COLUMNS.items()}
        row["gamma"] = self.gamma
        row["total"] = float(self.total.detach())
        return row


@dataclass
class Detections:
    boxes: torch.Tensor   # D x 4
    labels: torch.Tensor  # D class ids (0-based)
    scores: torch.Tensor  # D


@dataclass
class StepResult:
    losses: LossBundle
    lambda_img: float = float("nan")
    lambda_obj: float = float("nan")
    ordering_rate_img: float = float("nan")
    ordering_rate_obj: float = float("nan")


# ---------------------------------------------------------------------------
# Box utilities
# ---------------------------------------------------------------------------


def make_anchors(
    feature_size: tuple[int, int], sizes: Sequence[float], stride: int = STRIDE,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Square anchors, location-major then size, matching the RPN output order."""
    height, width = feature_size
    ys = (torch.arange(height, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(width, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    half = torch.tensor(sizes, dtype=dtype).reshape(1, -1, 1) / 2
    offsets = torch.cat([-half, -half, half, half], dim=-1)
    return (centers + offsets).reshape(-1, 4)


def encode_boxes(reference: torch.Tensor, target: torch.Tensor,
                 weights: Sequence[float]) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack([
        wx * (tx - rx) / rw,
        wy * (ty - ry) / rh,
        ww * torch.log(tw / rw),
        wh * torch.log(th / rh),
    ], dim=1)


def decode_boxes(reference: torch.Tensor, deltas: torch.Tensor,
                 weights: Sequence[float]) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=MAX_LOG_SCALE)
    dh = (deltas[:, 3] / wh).clamp(max=MAX_LOG_SCALE)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    height, width = image_size
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 array -> 1 x 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)[None]


# ---------------------------------------------------------------------------
# Network parts
# ---------------------------------------------------------------------------


class Backbone(nn.Module):
    """Four 3x3 conv blocks, strides 2-2-2-1."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 128)) -> None:
        super().__init__()
        strides = (2, 2, 2, 1)
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch, stride in zip(channels, strides):
            layers += [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1), nn.ReLU(inplace=True)]
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.out_channels = in_ch

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.body[-2]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


class RegionProposalNetwork(nn.Module):
    def __init__(self, in_channels: int, num_anchors: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.objectness = nn.Conv2d(in_channels, num_anchors, 1)
        self.deltas = nn.Conv2d(in_channels, 4 * num_anchors, 1)
        for layer in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness logits N x M and deltas N x M x 4, M = H * W * anchors."""
        n, _, h, w = features.shape
        t = torch.relu(self.conv(features))
        logits = self.objectness(t).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.deltas(t).reshape(n, -1, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, -1, 4)
        return logits, deltas


class RoIHead(nn.Module):
    def __init__(self, in_channels: int, pool_size: int, hidden: int, num_classes: int) -> None:
        super().__init__()
        self.fc6 = nn.Linear(in_channels * pool_size * pool_size, hidden)
        self.fc7 = nn.Linear(hidden, hidden)
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, 4 * num_classes)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def embed(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.fc7(torch.relu(self.fc6(pooled.flatten(1)))))

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.embed(pooled)
        return self.cls_score(x), self.bbox_pred(x)


class DomainAdaptiveDetector(nn.Module):
    def __init__(self, cfg: ModelConfig, reversal: AdvGrlConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        reversal = reversal or AdvGrlConfig()
        self.backbone = Backbone(cfg.backbone_channels)
        channels = self.backbone.out_channels
        self.rpn = RegionProposalNetwork(channels, len(cfg.anchor_sizes))
        self.roi_head = RoIHead(channels, cfg.roi_output_size, cfg.roi_hidden, cfg.num_classes)
        self.img_classifier = ImageDomainClassifier(channels, cfg.img_head_hidden)
        self.obj_classifier = ObjectDomainClassifier(cfg.roi_hidden, cfg.obj_head_hidden)
        self.img_reversal = AdversarialGradientReversal(reversal)
        self.obj_reversal = AdversarialGradientReversal(reversal)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def anchors(self, features: torch.Tensor) -> torch.Tensor:
        return make_anchors(tuple(features.shape[-2:]), self.cfg.anchor_sizes, dtype=features.dtype)

    def propose(self, features: torch.Tensor, image_size: tuple[int, int],
                top_k: int) -> tuple[ProposalSet, torch.Tensor, torch.Tensor]:
        logits, deltas = self.rpn(features)
        proposals = propose_regions(
            logits[0].detach(), deltas[0].detach(), self.anchors(features), image_size,
            top_k=top_k, nms_iou=self.cfg.rpn_nms_iou, pre_nms_top_n=self.cfg.rpn_pre_nms_top_n,
        )
        return proposals, logits[0], deltas[0]

    def object_features(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        pooled = roi_pool(features, [boxes], self.cfg.roi_output_size, 1.0 / STRIDE,
                          self.cfg.roi_pool_mode)
        return self.roi_head.embed(pooled)


def build_model(cfg: ExperimentConfig) -> DomainAdaptiveDetector:
    return DomainAdaptiveDetector(cfg.model, cfg.reversal_config)


def backbone_forward(model: DomainAdaptiveDetector | Backbone,
                     image: np.ndarray | torch.Tensor) -> BackboneFeatures:
    backbone = model.backbone if isinstance(model, DomainAdaptiveDetector) else model
    if isinstance(image, np.ndarray):
        image = image_to_tensor(image, next(backbone.parameters()).dtype)
    return BackboneFeatures(maps=backbone(image))


# ---------------------------------------------------------------------------
# Proposals and pooling
# ---------------------------------------------------------------------------


def propose_regions(
    scores: torch.Tensor,
    deltas: torch.Tensor,
    anchors: torch.Tensor,
    image_size: tuple[int, int],
    *,
    top_k: int,
    nms_iou: float = 0.7,
    pre_nms_top_n: int | None = None,
    min_size: float = 1e-3,
) -> ProposalSet:
    """Decode, clip, sort, NMS and keep the best ``top_k`` boxes of one image."""
    empty = ProposalSet(anchors.new_zeros((0, 4)), scores.new_zeros(0))
    if top_k <= 0 or scores.numel() == 0:
        return empty
    boxes = clip_boxes(decode_boxes(anchors, deltas, RPN_BOX_WEIGHTS), image_size)
    valid = ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
    boxes, scores = boxes[valid], scores[valid]
    if scores.numel() == 0:
        return empty
    order = torch.argsort(scores, descending=True, stable=True)
    if pre_nms_top_n:
        order = order[:pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    keep = nms(boxes, scores, nms_iou)[:top_k]
    return ProposalSet(boxes[keep], scores[keep])


def clamp_min_size(boxes: torch.Tensor, min_size: float = 1.0) -> torch.Tensor:
    x1 = torch.maximum(boxes[:, 2], boxes[:, 0] + min_size)
    y1 = torch.maximum(boxes[:, 3], boxes[:, 1] + min_size)
    return torch.stack([boxes[:, 0], boxes[:, 1], x1, y1], dim=1)


def roi_pool(
    features: torch.Tensor,
    boxes: Sequence[torch.Tensor],
    output_size: int = 7,
    spatial_scale: float = 1.0 / STRIDE,
    mode: str = "max",
) -> torch.Tensor:
    """Fixed-size features per box; ``boxes`` holds one K_i x 4 tensor per image."""
    boxes = [clamp_min_size(b.to(features.dtype)) for b in boxes]
    total = sum(b.shape[0] for b in boxes)
    if total == 0:
        return features.new_zeros((0, features.shape[1], output_size, output_size))
    if mode == "max":
        return tv_roi_pool(features, boxes, output_size, spatial_scale)
    if mode == "align":
        return roi_align(features, boxes, output_size, spatial_scale, sampling_ratio=2, aligned=True)
    raise InputError(f"unknown pooling mode {mode!r}")


# ---------------------------------------------------------------------------
# Target assignment and detection losses
# ---------------------------------------------------------------------------


def _subsample(labels: torch.Tensor, batch_size: int, positive_fraction: float,
               generator: torch.Generator | None, negative_value: int = 0) -> torch.Tensor:
    """Keep at most ``batch_size`` labelled entries; the rest become -1."""
    labels = labels.clone()
    positive = torch.nonzero(labels > negative_value).flatten()
    negative = torch.nonzero(labels == negative_value).flatten()
    num_pos = min(positive.numel(), int(batch_size * positive_fraction))
    num_neg = min(negative.numel(), batch_size - num_pos)
    drop_pos = positive[torch.randperm(positive.numel(), generator=generator)[num_pos:]]
    drop_neg = negative[torch.randperm(negative.numel(), generator=generator)[num_neg:]]
    labels[drop_pos] = -1
    labels[drop_neg] = -1
    return labels


def assign_anchor_targets(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    *,
    batch_size: int = 128,
    positive_fraction: float = 0.5,
    high: float = 0.7,
    low: float = 0.3,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Anchor labels (1 object, 0 background, -1 ignored) and matched gt boxes."""
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    if gt_boxes.numel() == 0:
        labels[:] = 0
        return _subsample(labels, batch_size, positive_fraction, generator), anchors.clone()
    iou = box_iou(anchors, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)
    labels[best_iou < low] = 0
    labels[best_iou >= high] = 1
    per_gt_best = iou.max(dim=0).values
    is_best = ((iou == per_gt_best[None]) & (per_gt_best[None] > 0)).any(dim=1)
    labels[is_best] = 1
    labels = _subsample(labels, batch_size, positive_fraction, generator)
    return labels, gt_boxes[best_gt]


def rpn_losses(
    logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
    labels: torch.Tensor, matched_boxes: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    sampled = labels >= 0
    count = max(int(sampled.sum()), 1)
    objectness = F.binary_cross_entropy_with_logits(
        logits[sampled], labels[sampled].to(logits.dtype), reduction="sum"
    ) / count
    positive = labels == 1
    if not positive.any():
        return objectness, deltas.sum() * 0
    targets = encode_boxes(anchors[positive], matched_boxes[positive], RPN_BOX_WEIGHTS)
    regression = F.smooth_l1_loss(deltas[positive], targets, beta=1.0, reduction="sum") / count
    return objectness, regression


def sample_rois(
    proposals: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    *,
    batch_size: int = 64,
    positive_fraction: float = 0.25,
    iou_threshold: float = 0.5,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """RoIs, their labels (0 = background, c + 1 = class c) and box targets."""
    rois = torch.cat([proposals, gt_boxes.to(proposals.dtype)])
    if gt_boxes.numel() == 0:
        labels = torch.zeros(rois.shape[0], dtype=torch.long)
        matched = rois
    else:
        best_iou, best_gt = box_iou(rois, gt_boxes.to(rois.dtype)).max(dim=1)
        labels = gt_labels[best_gt].long() + 1
        labels[best_iou < iou_threshold] = 0
        matched = gt_boxes.to(rois.dtype)[best_gt]
    # Background is 0 here, so every label > 0 counts as positive.
    keep = _subsample(labels, batch_size, positive_fraction, generator) >= 0
    rois, labels, matched = rois[keep], labels[keep], matched[keep]
    targets = encode_boxes(rois, matched, ROI_BOX_WEIGHTS)
    targets[labels == 0] = 0
    return rois, labels, targets


def det_losses(
    class_logits: torch.Tensor,
    box_deltas: torch.Tensor,
    labels: torch.Tensor,
    regression_targets: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax cross-entropy over classes + background, smooth-L1 on positives.

    ``box_deltas`` is R x 4C (class-specific); the regression sum is divided
    by the number of sampled RoIs.
    """
    if labels.numel() == 0:
        zero = class_logits.sum() * 0
        return zero, zero
    l_cls = F.cross_entropy(class_logits, labels)
    positive = labels > 0
    if not positive.any():
        return l_cls, box_deltas.sum() * 0
    per_class = box_deltas.reshape(box_deltas.shape[0], -1, 4)
    predicted = per_class[positive, labels[positive] - 1]
    l_reg = F.smooth_l1_loss(
        predicted, regression_targets[positive], beta=1.0, reduction="sum"
    ) / labels.numel()
    return l_cls, l_reg


def total_loss(
    parts: dict[str, torch.Tensor], gamma: float, mode: str = "aligned"
) -> LossBundle:
    """Combine the loss parts; missing parts count as zero.

    In cross-camera mode the object-level triplet term is dropped.
    """
    ref = next(iter(parts.values()))
    zero = ref.new_zeros(())
    values = {name: parts.get(name, zero) for name in LossBundle.COLUMNS.values()}
    if mode == "cross-camera":
        values["reg_obj"] = zero
    for column, name in LossBundle.COLUMNS.items():
        if not torch.isfinite(values[name]).all():
            raise TrainingError(f"non-finite loss component: {column}")
    adaptation = values["img"] + values["obj"] + values["reg_img"] + values["reg_obj"]
    total = gamma * adaptation + values["cls"] + values["reg"]
    return LossBundle(gamma=gamma, total=total, **values)


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


def _observe(reversal: AdversarialGradientReversal, loss: torch.Tensor, count: int) -> float:
    """Set the reversal factor from the per-sample classifier loss.

    A non-finite loss leaves the factor alone; ``total_loss`` reports it.
    """
    if not torch.isfinite(loss):
        return float("nan")
    return reversal.observe(loss.detach() / count)


def compute_losses(
    model: DomainAdaptiveDetector,
    triplet: AlignedTriplet,
    cfg: ExperimentConfig,
    generator: torch.Generator | None = None,
) -> StepResult:
    """Forward one triplet and build the loss bundle (no backward)."""
    switches = cfg.switches
    mcfg = model.cfg
    dtype = model.dtype
    source = triplet.source
    image_size = source.image.shape[:2]

    f_s = model.backbone(image_to_tensor(source.image, dtype))
    proposals, logits, deltas = model.propose(f_s, image_size, mcfg.rpn_post_nms_top_n)
    gt_boxes = torch.from_numpy(source.boxes).to(dtype)
    gt_labels = torch.from_numpy(source.labels)

    anchors = model.anchors(f_s)
    anchor_labels, matched = assign_anchor_targets(
        anchors, gt_boxes, batch_size=mcfg.rpn_batch_size,
        positive_fraction=mcfg.rpn_positive_fraction, generator=generator,
    )
    rpn_cls, rpn_reg = rpn_losses(logits, deltas, anchors, anchor_labels, matched)
    rois, roi_labels, roi_targets = sample_rois(
        proposals.boxes, gt_boxes, gt_labels, batch_size=mcfg.roi_batch_size,
        positive_fraction=mcfg.roi_positive_fraction, generator=generator,
    )
    pooled = roi_pool(f_s, [rois], mcfg.roi_output_size, 1.0 / STRIDE, mcfg.roi_pool_mode)
    class_logits, box_deltas = model.roi_head(pooled)
    roi_cls, roi_reg = det_losses(class_logits, box_deltas, roi_labels, roi_targets)
    parts = {"cls": roi_cls + rpn_cls, "reg": roi_reg + rpn_reg}
    stats: dict[str, float] = {}

    if switches.any_domain_terms:
        f_t = model.backbone(image_to_tensor(triplet.target.image, dtype))
        da_boxes = proposals.top(mcfg.da_proposals)
        obj_s = model.object_features(f_s, da_boxes)
        aligned = cfg.train.mode == "aligned"
        # Aligned images: the source boxes locate the same objects in every member.
        obj_t = model.object_features(f_t, da_boxes) if aligned else None

        if switches.img_da:
            reversed_maps = model.img_reversal(torch.cat([f_s, f_t]))
            parts["img"] = img_domain_loss(
                model.img_classifier, reversed_maps, [DomainLabel.SOURCE, DomainLabel.TARGET]
            )
            stats["lambda_img"] = _observe(model.img_reversal, parts["img"], 2)

        if switches.obj_da:
            target_obj = obj_t
            if target_obj is None:
                with torch.no_grad():
                    target_props, _, _ = model.propose(f_t, image_size, mcfg.rpn_post_nms_top_n)
                target_obj = model.object_features(f_t, target_props.top(mcfg.da_proposals))
            reversed_objs = model.obj_reversal(torch.cat([obj_s, target_obj]))
            labels = proposal_labels(
                [obj_s.shape[0], target_obj.shape[0]], [DomainLabel.SOURCE, DomainLabel.TARGET]
            )
            parts["obj"] = obj_domain_loss(model.obj_classifier, reversed_objs, labels)
            if reversed_objs.shape[0]:
                stats["lambda_obj"] = _observe(
                    model.obj_reversal, parts["obj"], reversed_objs.shape[0]
                )

        if switches.img_reg or switches.obj_reg:
            f_a = model.backbone(image_to_tensor(triplet.auxiliary.image, dtype))
            delta = cfg.metricreg.delta
            if switches.img_reg:
                img_triplet = FeatureTriplet(f_s, f_t, f_a, delta)
                parts["reg_img"] = img_triplet_loss(img_triplet)
                stats["ordering_rate_img"] = ordering_rate([img_triplet])
            if switches.obj_reg and aligned:
                obj_triplet = FeatureTriplet(
                    obj_s, obj_t, model.object_features(f_a, da_boxes), delta
                )
                parts["reg_obj"] = obj_triplet_loss(obj_triplet)
                if len(da_boxes):
                    stats["ordering_rate_obj"] = ordering_rate(obj_triplet)

    return StepResult(total_loss(parts, cfg.train.gamma, cfg.train.mode), **stats)


def step_generator(seed: int, iteration: int) -> torch.Generator:
    """Per-iteration sampling stream, so a resumed run replays the same draws."""
    rng = np.random.default_rng([seed, iteration])
    return torch.Generator().manual_seed(int(rng.integers(2**62)))


def train_step(
    model: DomainAdaptiveDetector,
    optimizer: torch.optim.Optimizer,
    triplet: AlignedTriplet,
    cfg: ExperimentConfig,
    iteration: int = 0,
) -> StepResult:
    """One SGD update on one (optionally masked) triplet."""
    model.train()
    generator = step_generator(cfg.train.seed, iteration)
    if cfg.switches.dmp:
        mask_spec = cfg.dmp.mask_spec(cfg.train.seed)
        triplet = apply_dmp(triplet, mask_spec, mask_spec.rng(iteration))
    result = compute_losses(model, triplet, cfg, generator)
    optimizer.zero_grad(set_to_none=True)
    result.losses.total.backward()
    if cfg.train.clip_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.clip_grad_norm)
    optimizer.step()
    return result


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict(model: DomainAdaptiveDetector, image: np.ndarray) -> Detections:
    model.eval()
    mcfg = model.cfg
    features = model.backbone(image_to_tensor(image, model.dtype))
    image_size = image.shape[:2]
    proposals, _, _ = model.propose(features, image_size, mcfg.rpn_test_post_nms_top_n)
    if len(proposals) == 0:
        empty = features.new_zeros(0)
        return Detections(features.new_zeros((0, 4)), empty.long(), empty)
    pooled = roi_pool(features, [proposals.boxes], mcfg.roi_output_size, 1.0 / STRIDE,
                      mcfg.roi_pool_mode)
    class_logits, box_deltas = model.roi_head(pooled)
    probs = F.softmax(class_logits, dim=1)[:, 1:]
    k, num_classes = probs.shape
    refs = proposals.boxes.repeat_interleave(num_classes, dim=0)
    boxes = clip_boxes(decode_boxes(refs, box_deltas.reshape(-1, 4), ROI_BOX_WEIGHTS), image_size)
    scores = probs.reshape(-1)
    labels = torch.arange(num_classes).repeat(k)
    keep = scores > mcfg.score_threshold
    boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
    keep = batched_nms(boxes, scores, labels, mcfg.detection_nms_iou)[: mcfg.max_detections]
    return Detections(boxes[keep], labels[keep], scores[keep])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    model: dict[str, torch.Tensor]
    config: dict[str, Any]
    optimizer: dict[str, Any] | None = None
    scheduler: dict[str, Any] | None = None


def save_checkpoint(
    path: Path,
    model: nn.Module,
    config: ExperimentConfig,
    *,
    iteration: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    scheduler: Any | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config": config.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        # Our own files; scheduler state holds a Counter, which weights_only rejects.
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a stormadapt checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return Checkpoint(
        iteration=int(payload["iteration"]),
        model=payload["model"],
        config=payload["config"],
        optimizer=payload.get("optimizer"),
        scheduler=payload.get("scheduler"),
    )


def load_model(path: Path | str) -> tuple[DomainAdaptiveDetector, ExperimentConfig]:
    checkpoint = load_checkpoint(path)
    config = ExperimentConfig.from_dict(checkpoint.config)
    model = build_model(config)
    model.load_state_dict(checkpoint.model)
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    iterations: int
    rows: list[dict[str, float]] = field(default_factory=list)


def iteration_order(num_samples: int, seed: int, start: int, stop: int) -> Iterator[int]:
    """Sample index per iteration: a fresh permutation each pass over the data."""
    epoch_perm: np.ndarray | None = None
    epoch = -1
    for it in range(start, stop):
        if it // num_samples != epoch:
            epoch = it // num_samples
            epoch_perm = np.random.default_rng([seed, 1_000_003, epoch]).permutation(num_samples)
        yield int(epoch_perm[it % num_samples])


def _format(value: float) -> str:
    return repr(float(value))


def _truncate_metrics(path: Path, stop: int) -> None:
    if not path.exists():
        return
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.DictReader(fh) if int(row["iteration"]) < stop]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def make_optimizer(model: nn.Module, cfg: ExperimentConfig):
    t = cfg.train
    optimizer = torch.optim.SGD(
        model.parameters(), lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=[t.iters_stage1], gamma=t.lr_stage2 / t.lr
    )
    return optimizer, scheduler


def train(
    dataset: Sequence[AlignedTriplet],
    cfg: ExperimentConfig,
    out_dir: Path,
    *,
    resume: bool = False,
    iterations: int | None = None,
) -> TrainResult:
    """Run the two-stage schedule over ``dataset``; writes checkpoint + metrics CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    metrics_path = out_dir / METRICS_NAME
    stop = cfg.train.total_iterations if iterations is None else iterations

    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg)
    optimizer, scheduler = make_optimizer(model, cfg)
    start = 0
    if resume and ckpt_path.exists():
        checkpoint = load_checkpoint(ckpt_path)
        model.load_state_dict(checkpoint.model)
        if checkpoint.optimizer is not None:
            optimizer.load_state_dict(checkpoint.optimizer)
        if checkpoint.scheduler is not None:
            scheduler.load_state_dict(checkpoint.scheduler)
        start = checkpoint.iteration
        _truncate_metrics(metrics_path, start)
        logger.info("resuming from %s at iteration %d", ckpt_path, start)
    elif metrics_path.exists():
        metrics_path.unlink()

    if start < stop and len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")

    rows: list[dict[str, float]] = []
    new_file = not metrics_path.exists()
    with metrics_path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new_file:
            writer.writeheader()
        if start < stop:
            loader = DataLoader(
                dataset,
                batch_size=None,
                sampler=list(iteration_order(len(dataset), cfg.train.seed, start, stop)),
                num_workers=cfg.train.workers,
            )
            for iteration, triplet in enumerate(loader, start):
                lr = optimizer.param_groups[0]["lr"]
                step = train_step(model, optimizer, triplet, cfg, iteration)
                scheduler.step()
                row = {"iteration": iteration, "lr": lr, **step.losses.as_row(),
                       "lambda_img": step.lambda_img, "lambda_obj": step.lambda_obj,
                       "ordering_rate_img": step.ordering_rate_img,
                       "ordering_rate_obj": step.ordering_rate_obj}
                writer.writerow({k: (v if k == "iteration" else _format(v)) for k, v in row.items()})
                rows.append(row)
                if cfg.train.log_every and (iteration + 1) % cfg.train.log_every == 0:
                    fh.flush()
                    logger.info(
                        "iter %d lr %.4g total %.4f cls %.4f reg %.4f lambda img/obj %.3g/%.3g",
                        iteration + 1, lr, row["total"], row["L_cls"], row["L_reg"],
                        step.lambda_img, step.lambda_obj,
                    )
                if cfg.train.checkpoint_every and (iteration + 1) % cfg.train.checkpoint_every == 0:
                    fh.flush()
                    save_checkpoint(ckpt_path, model, cfg, iteration=iteration + 1,
                                    optimizer=optimizer, scheduler=scheduler)
                    logger.info("checkpoint written at iteration %d", iteration + 1)

    final = max(start, stop)
    save_checkpoint(ckpt_path, model, cfg, iteration=final, optimizer=optimizer, scheduler=scheduler)
    return TrainResult(checkpoint=ckpt_path, metrics=metrics_path, iterations=final, rows=rows)
