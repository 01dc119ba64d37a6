"""Speaker fusion: hard-negative construction from two speakers.

Linear fusion splices frames of a second utterance into the first; dynamic
fusion rebuilds the second speaker's GSE by attending from the first one.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np
import torch
from torch import nn

from clnvc.attention import scaled_dot_product_attention
from clnvc.errors import ConfigError, InputError


class DegenerateFusionWarning(UserWarning):
    """The plan mixes no frames; the first utterance is returned unchanged."""


@dataclasses.dataclass(frozen=True)
class LinearFusionPlan:
    start: int
    interval: int = 5
    max_mix_fraction: float = 0.5

    def __post_init__(self):
        if self.start < 0:
            raise ConfigError(f"start must be >= 0, got {self.start}")
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        if not 0.0 < self.max_mix_fraction <= 0.5:
            raise ConfigError(f"max_mix_fraction must lie in (0, 0.5], got {self.max_mix_fraction}")


def linear_fusion_mask(n_frames: int, plan: LinearFusionPlan) -> np.ndarray:
    """Boolean mask of frames taken from the second utterance.

    Segments of ``interval`` frames alternate with ``interval`` kept frames from
    ``start`` on. A segment is only added while the mixed fraction stays strictly
    below ``max_mix_fraction``.
    """
    if plan.start >= n_frames:
        raise InputError(f"fusion start {plan.start} is outside {n_frames} frames")
    mask = np.zeros(n_frames, dtype=bool)
    if plan.interval >= n_frames:
        return mask
    mixed = 0
    for begin in range(plan.start, n_frames, 2 * plan.interval):
        end = min(begin + plan.interval, n_frames)
        if (mixed + end - begin) / n_frames >= plan.max_mix_fraction:
            break
        mask[begin:end] = True
        mixed += end - begin
    return mask


def linear_fuse(first, second, plan: LinearFusionPlan):
    """Splice frames of ``second`` into ``first`` (same length) following ``plan``.

    Works on numpy arrays and torch tensors of shape ``[T, C]``.
    """
    if first.shape != second.shape:
        raise InputError(f"crop to a common length first: {tuple(first.shape)} vs {tuple(second.shape)}")
    mask = linear_fusion_mask(first.shape[0], plan)
    if not mask.any():
        warnings.warn(f"linear fusion with {plan} mixes no frames of a {first.shape[0]}-frame utterance",
                      DegenerateFusionWarning, stacklevel=2)
        return first
    if isinstance(first, torch.Tensor):
        mask_t = torch.as_tensor(mask, device=first.device).unsqueeze(-1)
        return torch.where(mask_t, second, first)
    return np.where(mask[:, None], second, first)


class DynamicFusion(nn.Module):
    """Attention between the groups ("areas") of two global speaker embeddings.

    Each embedding is reshaped to ``[n_groups, dim / n_groups]``; queries come from
    the first speaker, keys and values from the second. Projections start at identity.
    """

    def __init__(self, dim: int, n_groups: int = 4):
        super().__init__()
        if n_groups < 1 or dim % n_groups:
            raise ConfigError(f"embedding width {dim} is not divisible into {n_groups} groups")
        self.n_groups = n_groups
        width = dim // n_groups
        self.w_q = nn.Parameter(torch.eye(width))
        self.w_k = nn.Parameter(torch.eye(width))
        self.w_v = nn.Parameter(torch.eye(width))

    def forward(self, first: torch.Tensor, second: torch.Tensor, return_weights: bool = False):
        fused, weights = dynamic_fuse(first, second, self.w_q, self.w_k, self.w_v, self.n_groups)
        return (fused, weights) if return_weights else fused


def dynamic_fuse(first, second, w_q, w_k, w_v, n_groups: int):
    """Return ``(fused [.., D], weights [.., n_groups, n_groups])``."""
    dim = first.shape[-1]
    if second.shape[-1] != dim:
        raise ConfigError(f"embedding widths differ: {dim} vs {second.shape[-1]}")
    if dim % n_groups:
        raise ConfigError(f"embedding width {dim} is not divisible into {n_groups} groups")
    groups_1 = first.reshape(*first.shape[:-1], n_groups, dim // n_groups)
    groups_2 = second.reshape(*second.shape[:-1], n_groups, dim // n_groups)
    fused, weights = scaled_dot_product_attention(groups_1 @ w_q, groups_2 @ w_k, groups_2 @ w_v)
    return fused.reshape(*first.shape[:-1], dim), weights

