"""Content encoder, vector quantizer and the gradient-reversed speaker predictor."""

from __future__ import annotations

import contextlib
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from clnvc.errors import ConfigError, NumericError


class ContentEncoder(nn.Module):
    """Conv1d stack over time; the first layer halves the frame rate."""

    def __init__(self, n_mels: int, dim: int = 64, n_layers: int = 3, kernel_size: int = 3,
                 normalize: bool = True):
        super().__init__()
        self.normalize = normalize
        if n_layers < 1 or kernel_size % 2 == 0:
            raise ConfigError("content encoder needs >= 1 layer and an odd kernel size")
        self.kernel_size = kernel_size
        pad = kernel_size // 2
        convs = [nn.Conv1d(n_mels, dim, kernel_size, stride=2, padding=pad)]
        convs += [nn.Conv1d(dim, dim, kernel_size, padding=pad) for _ in range(n_layers - 1)]
        self.convs = nn.ModuleList(convs)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """``[B, T, n_mels] -> [B, ceil(T / 2), dim]``."""
        x = mel.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.silu(x)
        z = x.transpose(1, 2)
        if self.normalize:
            z = F.normalize(z, dim=-1)
        if not torch.isfinite(z).all():
            bad = int((~torch.isfinite(z)).sum())
            raise NumericError(
                f"content encoder produced {bad} non-finite values "
                f"(input range [{mel.min().item():.3g}, {mel.max().item():.3g}])")
        return z

    @staticmethod
    def output_length(n_frames: int) -> int:
        return (n_frames + 1) // 2

    def last_input_frame(self, row: int) -> int:
        """Largest input frame index that can influence output ``row``."""
        half = self.kernel_size // 2
        first_layer_row = row + half * (len(self.convs) - 1)
        return 2 * first_layer_row + half


class _StraightThrough(torch.autograd.Function):
    """Returns the code rows exactly; routes the incoming gradient to ``z`` unchanged."""

    @staticmethod
    def forward(ctx, z, codes):
        return codes.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class _GradReverse(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad.neg() * ctx.scale, None


def grl(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the backward gradient by ``-scale``."""
    return _GradReverse.apply(x, scale)


def nearest_code(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the closest code row for each row of ``z`` (first index wins ties)."""
    dist = ((z.unsqueeze(-2) - codes) ** 2).sum(-1)
    return dist.argmin(-1)


class Quantized(NamedTuple):
    quantized: torch.Tensor
    indices: torch.Tensor
    loss: torch.Tensor
    commitment: torch.Tensor
    codebook_loss: torch.Tensor


def quantize(z: torch.Tensor, codes: torch.Tensor, indices: Optional[torch.Tensor] = None) -> Quantized:
    """Snap each row of ``z`` (``[..., T, D]``) to its nearest code.

    The loss is ``mean_t |z - sg(e)|^2 + mean_t |sg(z) - e|^2``; the quantized output
    equals the code rows bit for bit and passes gradients straight through to ``z``.
    """
    if z.shape[-1] != codes.shape[-1]:
        raise ConfigError(f"feature width {z.shape[-1]} does not match code width {codes.shape[-1]}")
    if indices is None:
        with torch.no_grad():
            indices = nearest_code(z, codes)
    chosen = codes[indices]
    commitment = ((z - chosen.detach()) ** 2).sum(-1).mean()
    codebook_loss = ((z.detach() - chosen) ** 2).sum(-1).mean()
    quantized = _StraightThrough.apply(z, chosen.detach())
    return Quantized(quantized, indices, commitment + codebook_loss, commitment, codebook_loss)


class VectorQuantizer(nn.Module):

    def __init__(self, n_codes: int = 128, dim: int = 64):
        super().__init__()
        if n_codes < 1:
            raise ConfigError("codebook needs at least one code")
        self.codebook = nn.Parameter(torch.empty(n_codes, dim).uniform_(-1.0 / n_codes, 1.0 / n_codes))
        # assignments per code since the last dead-code restart
        self.register_buffer("usage", torch.zeros(n_codes, dtype=torch.long))
        self._frozen = None

    def forward(self, z: torch.Tensor) -> Quantized:
        if self._frozen is None:
            return quantize(z, self.codebook)
        # smooth surrogate whose exact derivative equals the straight-through gradient at the
        # reference point: every stop-gradient operand is pinned to its reference value
        indices, reference, codes = self._frozen
        chosen = self.codebook[indices]
        commitment = ((z - codes) ** 2).sum(-1).mean()
        codebook_loss = ((reference - chosen) ** 2).sum(-1).mean()
        quantized = codes + (z - reference)
        return Quantized(quantized, indices, commitment + codebook_loss, commitment, codebook_loss)

    @torch.no_grad()
    def initialize_from(self, z: torch.Tensor, generator: torch.Generator) -> None:
        """Overwrite the codes with randomly chosen rows of ``z`` (``[N, D]``), repeating rows if N < K."""
        n_codes = self.codebook.shape[0]
        if z.shape[0] >= n_codes:
            rows = torch.randperm(z.shape[0], generator=generator)[:n_codes]
        else:
            rows = torch.randint(z.shape[0], (n_codes,), generator=generator)
        self.codebook.copy_(z[rows])

    @torch.no_grad()
    def record_usage(self, indices: torch.Tensor) -> None:
        self.usage += torch.bincount(indices.reshape(-1), minlength=self.usage.numel())

    @torch.no_grad()
    def restart_dead_codes(self, z: torch.Tensor, generator: torch.Generator, noise: float = 1e-2) -> int:
        """Move codes unused since the last restart onto random rows of ``z``; returns how many moved."""
        dead = (self.usage == 0).nonzero().flatten()
        if len(dead):
            rows = torch.randint(z.shape[0], (len(dead),), generator=generator)
            jitter = torch.randn(len(dead), z.shape[1], generator=generator, dtype=z.dtype)
            self.codebook[dead] = z[rows] + noise * jitter
        self.usage.zero_()
        return len(dead)

    @contextlib.contextmanager
    def frozen(self, indices: torch.Tensor, reference: torch.Tensor):
        """Hold the code assignment and the stop-gradient operands fixed at ``reference``.

        Used for finite-difference checks of the straight-through path.
        """
        self._frozen = (indices, reference.detach(), self.codebook[indices].detach().clone())
        try:
            yield self
        finally:
            self._frozen = None


class SpeakerPredictor(nn.Module):
    """Regresses the global speaker embedding from mean-pooled content features."""

    def __init__(self, content_dim: int, speaker_dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(content_dim, hidden)
        self.fc2 = nn.Linear(hidden, speaker_dim)

    def forward(self, content: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(content.mean(-2))))


def adversarial_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 distance to the (detached) speaker embedding."""
    if prediction.shape != target.shape:
        raise ConfigError(f"prediction shape {tuple(prediction.shape)} != target {tuple(target.shape)}")
    return (prediction - target.detach()).abs().sum()
