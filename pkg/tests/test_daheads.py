import logging
import math

import numpy as np
import pytest
import torch
from torch import nn

from stormadapt.daheads import (
    DomainLabel,
    ImageDomainClassifier,
    ObjectDomainClassifier,
    binary_domain_loss,
    domain_accuracy,
    img_domain_loss,
    obj_domain_loss,
    proposal_labels,
)
from stormadapt.errors import InputError
from stormadapt.revgrad import AdversarialGradientReversal, AdvGrlConfig


def naive_bce(probs, labels, eps=1e-7):
    total = 0.0
    for p, g in zip(probs, labels):
        p = min(max(p, eps), 1 - eps)
        total -= g * math.log(p) + (1 - g) * math.log(1 - p)
    return total


def neutral(classifier):
    """Zero the last layer so every probability is exactly 0.5."""
    last = classifier.conv2 if isinstance(classifier, ImageDomainClassifier) else classifier.fc3
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)
    return classifier


class TestBinaryDomainLoss:
    def test_hand_value(self):
        loss = binary_domain_loss(torch.tensor([0.9, 0.2]), [1, 0])
        assert loss.item() == pytest.approx(-(math.log(0.9) + math.log(0.8)), abs=1e-6)

    def test_two_images(self):
        loss = binary_domain_loss(torch.tensor([0.7, 0.3]), [1, 0])
        assert loss.item() == pytest.approx(0.7133, abs=1e-4)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            probs = rng.random(n)
            labels = rng.integers(0, 2, n)
            got = binary_domain_loss(torch.tensor(probs), torch.tensor(labels)).item()
            assert got == pytest.approx(naive_bce(probs, labels), abs=1e-6)

    def test_clamps_extremes(self):
        loss = binary_domain_loss(torch.tensor([0.0, 1.0]), [1, 0])
        assert math.isfinite(loss.item())

    def test_rejects_non_binary_labels(self):
        with pytest.raises(InputError):
            binary_domain_loss(torch.tensor([0.5, 0.5]), [1, 2])

    def test_rejects_count_mismatch(self):
        with pytest.raises(InputError):
            binary_domain_loss(torch.tensor([0.5, 0.5]), [1])


class TestImageDomainClassifier:
    def test_one_probability_per_image(self):
        clf = ImageDomainClassifier(8, hidden=4)
        probs = clf(torch.randn(3, 8, 5, 6))
        assert probs.shape == (3,)
        assert torch.all((probs > 0) & (probs < 1))

    def test_neutral_classifier_loss_is_n_ln2(self):
        clf = neutral(ImageDomainClassifier(8, hidden=4))
        features = torch.randn(2, 8, 4, 4)
        loss = img_domain_loss(clf, features, [DomainLabel.SOURCE, DomainLabel.TARGET])
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)


class TestObjectDomainClassifier:
    def test_neutral_classifier_loss(self):
        clf = neutral(ObjectDomainClassifier(16, hidden=8))
        labels = proposal_labels([3, 2], [1, 0])
        loss = obj_domain_loss(clf, torch.randn(5, 16), labels)
        assert loss.item() == pytest.approx(5 * math.log(2), abs=1e-6)

    def test_empty_proposals_warn_and_return_zero(self, caplog):
        clf = ObjectDomainClassifier(16)
        with caplog.at_level(logging.WARNING, logger="stormadapt.daheads"):
            loss = obj_domain_loss(clf, torch.zeros(0, 16), torch.zeros(0))
        assert loss.item() == 0.0
        assert "no proposals" in caplog.text

    def test_gradient_reaches_features(self):
        clf = ObjectDomainClassifier(6, hidden=4)
        features = torch.randn(4, 6, requires_grad=True)
        obj_domain_loss(clf, features, [1, 1, 0, 0]).backward()
        assert features.grad is not None


class TestHelpers:
    def test_proposal_labels(self):
        assert proposal_labels([2, 3], [1, 0]).tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]

    def test_proposal_labels_mismatch(self):
        with pytest.raises(InputError):
            proposal_labels([2], [1, 0])

    def test_domain_accuracy(self):
        assert domain_accuracy(torch.tensor([0.9, 0.4, 0.6, 0.1]), [1, 1, 0, 0]) == 0.5


class TestAdversarialTraining:
    def domains(self, rng, n_source, n_target):
        def draw(sign, n):
            return np.stack([sign * 2.0 + rng.normal(0, 0.5, n), rng.normal(0, 1, n)], axis=1)

        x = np.concatenate([draw(1.0, n_source), draw(-1.0, n_target)])
        labels = [DomainLabel.SOURCE] * n_source + [DomainLabel.TARGET] * n_target
        return torch.tensor(x), torch.tensor(labels, dtype=torch.float64)

    def held_out_accuracy(self, reverse, steps=50):
        rng = np.random.default_rng(0)
        x, labels = self.domains(rng, 120, 80)
        x_val, labels_val = self.domains(rng, 100, 100)
        features = nn.Linear(2, 2, bias=False).double()
        classifier = nn.Sequential(nn.Linear(2, 1), nn.Sigmoid()).double()
        with torch.no_grad():
            features.weight.copy_(torch.eye(2))
            for p in classifier.parameters():
                p.zero_()
        reversal = AdversarialGradientReversal(AdvGrlConfig.constant(1.0))
        optimizer = torch.optim.SGD([
            {"params": features.parameters(), "weight_decay": 1.5},
            {"params": classifier.parameters()},
        ], lr=0.5)
        for _ in range(steps):
            h = features(x)
            if reverse:
                h = reversal(h)
            loss = binary_domain_loss(classifier(h), labels) / len(labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            return domain_accuracy(classifier(features(x_val)), labels_val)

    def test_cooperative_training_separates_domains(self):
        assert self.held_out_accuracy(reverse=False) > 0.9

    def test_reversed_gradient_erases_the_domain_signal(self):
        assert self.held_out_accuracy(reverse=True) == pytest.approx(0.5, abs=0.1)
