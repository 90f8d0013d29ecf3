"""Triplet regularisation across source (anchor), target (positive) and
auxiliary (negative) features.

The distance is the L2 norm of the flattened difference divided by
``sqrt(numel)``, so feature maps of different sizes sit on one scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import InputError

logger = logging.getLogger(__name__)


@dataclass
class FeatureTriplet:
    anchor: torch.Tensor    # source
    positive: torch.Tensor  # target
    negative: torch.Tensor  # auxiliary
    margin: float = 1.0

    def __post_init__(self) -> None:
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise InputError(
                "triplet features must share a shape, got "
                f"{tuple(self.anchor.shape)}, {tuple(self.positive.shape)}, "
                f"{tuple(self.negative.shape)}"
            )
        if not self.margin > 0:
            raise InputError(f"margin must be > 0, got {self.margin}")


def feature_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise InputError(f"cannot compare features of shape {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b) / math.sqrt(max(a.numel(), 1))


def rowwise_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``feature_distance`` applied to each entry along the first dimension."""
    if a.shape != b.shape:
        raise InputError(f"cannot compare features of shape {tuple(a.shape)} and {tuple(b.shape)}")
    per_row = max(a[0].numel(), 1) if a.shape[0] else 1
    return torch.linalg.vector_norm((a - b).flatten(1), dim=1) / math.sqrt(per_row)


def img_triplet_loss(triplet: FeatureTriplet) -> torch.Tensor:
    d_pos = feature_distance(triplet.anchor, triplet.positive)
    d_neg = feature_distance(triplet.anchor, triplet.negative)
    return torch.clamp(d_pos - d_neg + triplet.margin, min=0.0)


def obj_triplet_loss(triplet: FeatureTriplet) -> torch.Tensor:
    """Mean hinge over proposals; each tensor is M x D, pooled at the same boxes."""
    if triplet.anchor.shape[0] == 0:
        logger.warning("object-level triplet loss called with no proposals; returning 0")
        return triplet.anchor.new_zeros(())
    d_pos = rowwise_distance(triplet.anchor, triplet.positive)
    d_neg = rowwise_distance(triplet.anchor, triplet.negative)
    return torch.clamp(d_pos - d_neg + triplet.margin, min=0.0).mean()


@torch.no_grad()
def ordering_rate(batch: FeatureTriplet | Sequence[FeatureTriplet]) -> float:
    """Fraction of triplets with d(anchor, positive) < d(anchor, negative).

    A single ``FeatureTriplet`` is read as a batch along its first dimension.
    """
    if isinstance(batch, FeatureTriplet):
        if batch.anchor.shape[0] == 0:
            raise InputError("ordering_rate needs at least one triplet")
        d_pos = rowwise_distance(batch.anchor, batch.positive)
        d_neg = rowwise_distance(batch.anchor, batch.negative)
        return (d_pos < d_neg).float().mean().item()
    if not batch:
        raise InputError("ordering_rate needs at least one triplet")
    hits = sum(
        bool(feature_distance(t.anchor, t.positive) < feature_distance(t.anchor, t.negative))
        for t in batch
    )
    return hits / len(batch)
