"""Gradient reversal and the hardness-aware adversarial variant.

The plain layer is the identity on the forward pass and multiplies the
incoming gradient by ``-lambda`` on the way back. The adversarial variant
replaces ``lambda`` by ``lambda_adv``, which grows as the domain classifier's
loss shrinks (an easily separated sample is a hard example for adaptation):

    lambda_adv = min(lambda0 / L_c, beta)   if L_c < alpha
                 lambda0                    otherwise
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.autograd import Function

from .errors import InputError


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdvGrlConfig:
    lambda0: float = 1.0
    alpha: float = 0.63  # hardness threshold
    beta: float = 30.0   # overflow threshold

    def __post_init__(self) -> None:
        if not self.lambda0 > 0:
            raise InputError(f"advgrl.lambda0 must be > 0, got {self.lambda0}")
        # alpha == 0 is allowed: it forces the constant branch (plain GRL).
        if not self.alpha >= 0:
            raise InputError(f"advgrl.alpha must be >= 0, got {self.alpha}")
        if not self.beta >= self.lambda0:
            raise InputError(
                f"advgrl.beta must be >= lambda0 ({self.lambda0}), got {self.beta}"
            )

    @classmethod
    def constant(cls, lambda0: float = 1.0) -> AdvGrlConfig:
        """Config that makes the adversarial layer behave as a plain GRL."""
        return cls(lambda0=lambda0, alpha=0.0, beta=max(lambda0, 1.0))


# ---------------------------------------------------------------------------
# Functional form
# ---------------------------------------------------------------------------


class _ReverseGradient(Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: _LambdaCell) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.neg().mul(ctx.scale.value), None


class _LambdaCell:
    """Mutable holder so the reversal factor can be set after the forward pass."""

    __slots__ = ("value",)

    def __init__(self, value: float) -> None:
        self.value = float(value)


def grl_forward(v: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; gradients are reversed and scaled by ``lambd``."""
    return _ReverseGradient.apply(v, _LambdaCell(lambd))


def grl_backward(upstream_grad: torch.Tensor, lambd: float) -> torch.Tensor:
    if not math.isfinite(lambd):
        raise InputError(f"lambda must be finite, got {lambd}")
    return upstream_grad.neg().mul(lambd)


def _loss_value(loss_c: float | torch.Tensor) -> float:
    if isinstance(loss_c, torch.Tensor):
        loss_c = loss_c.detach().item()
    return float(loss_c)


def advgrl_lambda(loss_c: float | torch.Tensor, cfg: AdvGrlConfig) -> float:
    """Reversal factor for a domain-classifier loss ``loss_c`` (detached)."""
    value = _loss_value(loss_c)
    if math.isnan(value) or value < 0:
        raise InputError(f"domain classifier loss must be >= 0, got {value}")
    if value < cfg.alpha:
        if value == 0:
            return cfg.beta
        return min(cfg.lambda0 / value, cfg.beta)
    return cfg.lambda0


def advgrl_backward(
    upstream_grad: torch.Tensor, loss_c: float | torch.Tensor, cfg: AdvGrlConfig
) -> torch.Tensor:
    return grl_backward(upstream_grad, advgrl_lambda(loss_c, cfg))


# ---------------------------------------------------------------------------
# Module form
# ---------------------------------------------------------------------------


class AdversarialGradientReversal(nn.Module):
    """Reversal layer whose factor is set from the classifier loss it feeds.

    The loss is only known after the forward pass through the classifier, so
    the factor lives in a cell that ``observe`` updates before ``backward``.
    Until ``observe`` is called the layer reverses with ``lambda0``.
    """

    def __init__(self, cfg: AdvGrlConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self._cell = _LambdaCell(cfg.lambda0)

    @property
    def current_lambda(self) -> float:
        return self._cell.value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # A fresh cell per forward keeps earlier graphs bound to their own factor.
        self._cell = _LambdaCell(self.cfg.lambda0)
        return _ReverseGradient.apply(x, self._cell)

    def observe(self, loss_c: float | torch.Tensor) -> float:
        self._cell.value = advgrl_lambda(loss_c, self.cfg)
        return self._cell.value

    def extra_repr(self) -> str:
        c = self.cfg
        return f"lambda0={c.lambda0}, alpha={c.alpha}, beta={c.beta}"
