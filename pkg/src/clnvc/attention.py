"""Single-head scaled dot-product attention shared by prosody alignment and dynamic fusion."""

import math

import torch

from clnvc.errors import ConfigError


def scaled_dot_product_attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor):
    """Return ``(softmax(Q K^T / sqrt(F)) V, weights)`` with ``F`` the query width.

    Leading batch dimensions broadcast; the last two dims are (rows, features).
    """
    if query.shape[-1] != key.shape[-1]:
        raise ConfigError(f"query width {query.shape[-1]} != key width {key.shape[-1]}")
    if key.shape[-2] != value.shape[-2]:
        raise ConfigError(f"{key.shape[-2]} keys but {value.shape[-2]} values")
    logits = query @ key.transpose(-1, -2) / math.sqrt(query.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ value, weights
