"""Reference-style speaker encoder (GSE + LPE) and content-to-prosody alignment."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from clnvc.attention import scaled_dot_product_attention
from clnvc.errors import ConfigError, InputError

STRIDES = (2, 1, 2, 1, 2, 2)
CHANNELS = (32, 32, 64, 64, 128, 128)


class StyleEncoder(nn.Module):
    """Strided Conv1d stack feeding a bidirectional GRU.

    All GRU hidden states form the local prosody embedding ``[B, T_l, L]``; the
    concatenated final forward/backward states form the global embedding ``[B, L]``.
    """

    def __init__(self, n_mels: int, embedding_dim: int = 128,
                 channels: Sequence[int] = CHANNELS, strides: Sequence[int] = STRIDES,
                 kernel_size: int = 3, center_lpe: bool = True):
        super().__init__()
        self.center_lpe = center_lpe
        if len(channels) != len(strides):
            raise ConfigError("style encoder needs one channel count per stride")
        if embedding_dim % 2:
            raise ConfigError(f"embedding_dim must be even, got {embedding_dim}")
        self.strides = tuple(strides)
        self.kernel_size = kernel_size
        self.embedding_dim = embedding_dim
        convs, prev = [], n_mels
        for ch, stride in zip(channels, strides):
            convs.append(nn.Conv1d(prev, ch, kernel_size, stride=stride, padding=kernel_size // 2))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.gru = nn.GRU(prev, embedding_dim // 2, batch_first=True, bidirectional=True)

    @property
    def min_frames(self) -> int:
        return math.prod(self.strides)

    def output_length(self, n_frames: int) -> int:
        for s in self.strides:
            n_frames = (n_frames - 1) // s + 1
        return n_frames

    def last_input_frame(self, row: int) -> int:
        """Largest input frame that can reach conv-stack output ``row``."""
        for s in reversed(self.strides):
            row = s * row + self.kernel_size // 2
        return row

    def forward(self, mel: torch.Tensor):
        if mel.shape[1] < self.min_frames:
            raise InputError(
                f"style encoder needs at least {self.min_frames} frames, got {mel.shape[1]}")
        x = mel.transpose(1, 2)
        for conv in self.convs:
            x = F.silu(conv(x))
        lpe, final = self.gru(x.transpose(1, 2))
        gse = torch.cat([final[0], final[1]], dim=-1)
        if self.center_lpe:
            lpe = lpe - lpe.mean(dim=1, keepdim=True)
        return gse, lpe


class ProsodyAligner(nn.Module):
    """Attention of content frames (queries) over the two halves of the LPE (keys, values).

    When the content width differs from half the LPE width the query goes through a
    bias-free linear projection first, and the scaling uses the projected width.
    """

    def __init__(self, content_dim: int, lpe_dim: int):
        super().__init__()
        if lpe_dim % 2:
            raise ConfigError(f"LPE width must be even, got {lpe_dim}")
        half = lpe_dim // 2
        self.query_proj = None if content_dim == half else nn.Linear(content_dim, half, bias=False)

    def forward(self, content: torch.Tensor, lpe: torch.Tensor):
        return align_prosody(content, lpe, self.query_proj)


def align_prosody(content: torch.Tensor, lpe: torch.Tensor,
                  query_proj: Optional[nn.Module] = None):
    """Return ``(aligned [.., T', L/2], weights [.., T', T_l])``."""
    if lpe.shape[-1] % 2:
        raise ConfigError(f"LPE width must be even, got {lpe.shape[-1]}")
    half = lpe.shape[-1] // 2
    query = content if query_proj is None else query_proj(content)
    return scaled_dot_product_attention(query, lpe[..., :half], lpe[..., half:])
