"""The assembled voice-conversion network: encoders, quantizer, aligner, fusion and decoder."""

from __future__ import annotations

import dataclasses
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from clnvc.audio import MelSpectrogram
from clnvc.content import ContentEncoder, SpeakerPredictor, VectorQuantizer, grl
from clnvc.errors import ConfigError, InputError
from clnvc.fusion import DynamicFusion
from clnvc.style import CHANNELS, STRIDES, ProsodyAligner, StyleEncoder


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    content_dim: int = 64
    content_layers: int = 3
    codebook_size: int = 128
    # width of both the GSE and each LPE row (the BiGRU output width)
    embedding_dim: int = 128
    style_channels: tuple = CHANNELS
    style_strides: tuple = STRIDES
    predictor_hidden: int = 128
    decoder_hidden: int = 512
    n_groups: int = 4
    normalize_content: bool = True
    center_lpe: bool = True

    def __post_init__(self):
        object.__setattr__(self, "style_channels", tuple(self.style_channels))
        object.__setattr__(self, "style_strides", tuple(self.style_strides))
        if self.embedding_dim % 2:
            raise ConfigError("embedding_dim must be even")
        if self.embedding_dim % self.n_groups:
            raise ConfigError(f"embedding_dim {self.embedding_dim} not divisible by n_groups {self.n_groups}")


class Decoder(nn.Module):
    """Per-frame [content | aligned prosody | GSE] -> conv -> 2x upsample -> conv -> linear head."""

    def __init__(self, content_dim: int, prosody_dim: int, speaker_dim: int, n_mels: int,
                 hidden: int = 256, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(content_dim + prosody_dim + speaker_dim, hidden, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel_size, padding=pad)
        self.head = nn.Linear(hidden, n_mels)

    def forward(self, content: torch.Tensor, prosody: torch.Tensor, gse: torch.Tensor,
                n_frames: Optional[int] = None) -> torch.Tensor:
        if content.shape[-2] != prosody.shape[-2]:
            raise InputError(f"content has {content.shape[-2]} frames, aligned prosody {prosody.shape[-2]}")
        speaker = gse.unsqueeze(-2).expand(*gse.shape[:-1], content.shape[-2], gse.shape[-1])
        x = torch.cat([content, prosody, speaker], dim=-1).transpose(1, 2)
        x = F.silu(self.conv1(x))
        x = x.repeat_interleave(2, dim=-1)
        x = F.silu(self.conv2(x))
        mel = self.head(x.transpose(1, 2))
        return mel if n_frames is None else mel[:, :n_frames]


class Encoded(NamedTuple):
    continuous: torch.Tensor
    quantized: torch.Tensor
    indices: torch.Tensor
    vq_loss: torch.Tensor
    commitment: torch.Tensor
    codebook_loss: torch.Tensor


class CLNVC(nn.Module):
    """Tensors are batched ``[B, T, C]``; every public method also takes a single ``[T, C]``."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        c = config
        self.content_encoder = ContentEncoder(c.n_mels, c.content_dim, c.content_layers, normalize=c.normalize_content)
        self.quantizer = VectorQuantizer(c.codebook_size, c.content_dim)
        self.speaker_predictor = SpeakerPredictor(c.content_dim, c.embedding_dim, c.predictor_hidden)
        self.style_encoder = StyleEncoder(c.n_mels, c.embedding_dim, c.style_channels, c.style_strides,
                                          center_lpe=c.center_lpe)
        self.aligner = ProsodyAligner(c.content_dim, c.embedding_dim)
        self.fusion = DynamicFusion(c.embedding_dim, c.n_groups)
        self.decoder = Decoder(c.content_dim, c.embedding_dim // 2, c.embedding_dim, c.n_mels,
                               c.decoder_hidden)
        # global per-channel statistics: encoders see (mel - mean) / std, the decoder predicts in that space
        self.register_buffer("feature_mean", torch.zeros(c.n_mels))
        self.register_buffer("feature_std", torch.ones(c.n_mels))

    @torch.no_grad()
    def set_feature_stats(self, corpus) -> None:
        """Fit the encoder input normalization to a corpus of MelSpectrograms."""
        frames = np.concatenate([np.asarray(m.frames, dtype=np.float64) for m in corpus])
        self.feature_mean.copy_(torch.from_numpy(frames.mean(0)))
        self.feature_std.copy_(torch.from_numpy(np.maximum(frames.std(0), 1e-3)))

    def _normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.feature_mean) / self.feature_std

    @property
    def dtype(self) -> torch.dtype:
        return self.quantizer.codebook.dtype

    def as_input(self, mel) -> torch.Tensor:
        """MelSpectrogram / array / tensor -> ``[B, T, C]`` tensor in the model dtype."""
        if isinstance(mel, MelSpectrogram):
            mel = mel.frames
        if isinstance(mel, np.ndarray):
            mel = torch.from_numpy(np.ascontiguousarray(mel))
        mel = mel.to(self.dtype)
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.shape[-1] != self.config.n_mels:
            raise ConfigError(f"model expects {self.config.n_mels} mel channels, got {mel.shape[-1]}")
        return mel

    def encode_content(self, mel) -> Encoded:
        z = self.content_encoder(self._normalize(self.as_input(mel)))
        q = self.quantizer(z)
        return Encoded(z, q.quantized, q.indices, q.loss, q.commitment, q.codebook_loss)

    def encode_style(self, mel):
        """``(gse [B, D_g], lpe [B, T_l, D_g])``."""
        return self.style_encoder(self._normalize(self.as_input(mel)))

    def predict_speaker(self, continuous: torch.Tensor, grl_lambda: Optional[float] = 1.0) -> torch.Tensor:
        """Speaker regression from content; ``grl_lambda=None`` bypasses the reversal layer."""
        features = continuous if grl_lambda is None else grl(continuous, grl_lambda)
        return self.speaker_predictor(features)

    def align(self, quantized: torch.Tensor, lpe: torch.Tensor):
        return self.aligner(quantized, lpe)

    def decode(self, quantized, aligned, gse, n_frames: Optional[int] = None) -> torch.Tensor:
        return self.decoder(quantized, aligned, gse, n_frames) * self.feature_std + self.feature_mean

    def convert(self, source, target) -> torch.Tensor:
        """Content and local prosody of ``source`` voiced with the GSE of ``target``."""
        source = self.as_input(source)
        encoded = self.encode_content(source)
        _, lpe = self.encode_style(source)
        gse, _ = self.encode_style(target)
        aligned, _ = self.align(encoded.quantized, lpe)
        return self.decode(encoded.quantized, aligned, gse, source.shape[1])

    def reconstruct(self, mel) -> torch.Tensor:
        return self.convert(mel, mel)
