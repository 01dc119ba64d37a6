"""Loss terms: signed-cosine contrastive loss, MSE reconstruction/consistency, weighted total."""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Sequence

import torch

from clnvc.errors import InputError, NumericError

TERMS = ("recon", "sim", "q", "adv", "cc")


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Weights of the sim, q, adv and cc terms; reconstruction is always weighted 1."""

    alpha: float = 0.01
    beta: float = 0.1
    lam: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            if value < 0 or not math.isfinite(value):
                raise InputError(f"loss weight {name} must be finite and >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {"recon": 1.0, "sim": self.alpha, "q": self.beta, "adv": self.lam, "cc": self.gamma}


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12,
                      return_degenerate: bool = False):
    """Cosine similarity of two vectors; 0 when either norm is below ``eps``."""
    norm_a, norm_b = a.norm(), b.norm()
    degenerate = bool(norm_a < eps or norm_b < eps)
    if degenerate:
        value = (a * b).sum() * 0.0
    else:
        value = (a * b).sum() / (norm_a * norm_b)
    return (value, degenerate) if return_degenerate else value


def contrastive_loss(anchor: torch.Tensor, positive: torch.Tensor,
                     negatives: Sequence[torch.Tensor]) -> torch.Tensor:
    """``-D(anchor, positive) + sum_n D(anchor, n)``."""
    if len(negatives) == 0:
        raise InputError("contrastive loss needs at least one negative")
    loss = -cosine_similarity(anchor, positive)
    for negative in negatives:
        loss = loss + cosine_similarity(anchor, negative)
    return loss


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def reconstruction_loss(reconstructed: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return mse(reconstructed, target)


def consistency_loss(reconstructed: torch.Tensor, synthesized: torch.Tensor) -> torch.Tensor:
    return mse(reconstructed, synthesized)


def total_loss(parts: Mapping[str, torch.Tensor], weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``recon + alpha*sim + beta*q + lam*adv + gamma*cc``; raises on a non-finite part."""
    for name in TERMS:
        value = torch.as_tensor(parts[name]).detach()
        if not bool(torch.isfinite(value).all()):
            raise NumericError(f"loss term {name!r} is not finite: {float(value)}")
    w = weights.as_dict()
    total = parts["recon"]
    for name in TERMS[1:]:
        total = total + w[name] * parts[name]
    return total
