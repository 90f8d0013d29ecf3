"""Image-level and object-level domain classifiers and their BCE losses.

Both losses are sums over samples (images, or proposals of all images), not
means:

    L = -sum_i [ G_i log P_i + (1 - G_i) log(1 - P_i) ]

with G = 1 for source and 0 for target. Auxiliary images never reach these
classifiers.
"""

from __future__ import annotations

import logging
from enum import IntEnum
from typing import Sequence

import torch
from torch import nn

from .errors import InputError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


class DomainLabel(IntEnum):
    TARGET = 0
    SOURCE = 1


class ImageDomainClassifier(nn.Module):
    """Two 1x1 convolutions; per-location probabilities averaged into one P_i."""

    def __init__(self, in_channels: int, hidden: int = 256) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=1)
        self.conv2 = nn.Conv2d(hidden, 1, kernel_size=1)
        for layer in (self.conv1, self.conv2):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(features)))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(features)).mean(dim=(1, 2, 3))


class ObjectDomainClassifier(nn.Module):
    """Three fully connected layers over pooled object features."""

    def __init__(self, in_features: int, hidden: int = 128) -> None:
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        for layer in (self.fc1, self.fc2):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)
        nn.init.normal_(self.fc3.weight, std=0.05)
        nn.init.zeros_(self.fc3.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.fc1(features.flatten(1)))
        x = torch.relu(self.fc2(x))
        return torch.sigmoid(self.fc3(x)).squeeze(1)


def as_domain_labels(
    labels: torch.Tensor | Sequence[int], like: torch.Tensor
) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=like.dtype, device=like.device).reshape(-1)
    if labels.numel() and not torch.all((labels == 0) | (labels == 1)):
        raise InputError(f"domain labels must be 0 or 1, got {labels.tolist()}")
    return labels


def binary_domain_loss(
    probs: torch.Tensor, labels: torch.Tensor | Sequence[int]
) -> torch.Tensor:
    """Summed BCE on probabilities clamped to [eps, 1 - eps]."""
    probs = probs.reshape(-1)
    labels = as_domain_labels(labels, probs)
    if labels.shape != probs.shape:
        raise InputError(f"{probs.numel()} predictions but {labels.numel()} labels")
    p = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).sum()


def img_domain_loss(
    classifier: ImageDomainClassifier,
    features: torch.Tensor,
    labels: torch.Tensor | Sequence[int],
) -> torch.Tensor:
    """``features`` is N x C x H x W, already passed through the reversal layer."""
    return binary_domain_loss(classifier(features), labels)


def proposal_labels(counts: Sequence[int], image_labels: Sequence[int]) -> torch.Tensor:
    """Expand one label per image into one label per proposal of that image."""
    if len(counts) != len(image_labels):
        raise InputError("one proposal count per image label is required")
    return torch.cat([
        torch.full((int(n),), float(g)) for n, g in zip(counts, image_labels)
    ]) if counts else torch.zeros(0)


def obj_domain_loss(
    classifier: ObjectDomainClassifier,
    object_features: torch.Tensor,
    labels: torch.Tensor | Sequence[int],
) -> torch.Tensor:
    """``object_features`` is M x D over the proposals of all images."""
    if object_features.shape[0] == 0:
        logger.warning("object-level domain loss called with no proposals; returning 0")
        return object_features.new_zeros(())
    return binary_domain_loss(classifier(object_features), labels)


def domain_accuracy(probs: torch.Tensor, labels: torch.Tensor | Sequence[int]) -> float:
    """Fraction of samples whose thresholded prediction matches the label."""
    probs = probs.reshape(-1)
    labels = as_domain_labels(labels, probs)
    if probs.numel() == 0:
        return float("nan")
    return ((probs >= 0.5).to(probs.dtype) == labels).float().mean().item()
