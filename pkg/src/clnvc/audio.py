"""Mel-spectrogram front end, synthetic multi-speaker corpus and `.melspec` file I/O.

Mel spectrograms are natural-log mel energies stored as ``[T, C]`` float arrays
(frames by channels). Everything downstream consumes this layout.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

from clnvc.errors import ConfigError, InputError

MELSPEC_SUFFIX = ".melspec"
# T, C as uint32 and frame rate as float32, little endian.
_HEADER = struct.Struct("<IIf")


@dataclasses.dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0 or self.n_mels <= 0:
            raise ConfigError("sample_rate and n_mels must be positive")
        if self.win_ms <= 0 or self.hop_ms <= 0:
            raise ConfigError("win_ms and hop_ms must be positive")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate / self.hop_length


def load_mel_config(path) -> MelConfig:
    """Read a flat key-value YAML file (keys: sample_rate, n_mels, win_ms, hop_ms, log_floor)."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    known = {f.name for f in dataclasses.fields(MelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown mel config keys in {path}: {sorted(unknown)}")
    return MelConfig(**raw)


@dataclasses.dataclass
class MelSpectrogram:
    frames: np.ndarray
    frame_rate_hz: float = 100.0
    utterance_id: str = ""
    speaker_id: Optional[str] = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise InputError(f"mel frames must be 2-D [T, C], got shape {frames.shape}")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise InputError(f"mel must have at least one frame and channel, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError(f"mel {self.utterance_id!r} contains non-finite values")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_channels(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray, **changes) -> "MelSpectrogram":
        return dataclasses.replace(self, frames=frames, **changes)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config: MelConfig) -> np.ndarray:
    """The ``n_mels + 2`` HTK-mel-spaced edge frequencies (Hz); band m peaks at edge m + 1."""
    high = _hz_to_mel(config.sample_rate / 2.0)
    return _mel_to_hz(np.linspace(0.0, high, config.n_mels + 2))


def mel_band_centers(config: MelConfig) -> np.ndarray:
    return mel_band_edges(config)[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular filters, shape ``[n_fft // 2 + 1, n_mels]``, unit peak."""
    edges = mel_band_edges(config)
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - left) / (center - left)
    falling = (right - freqs[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(rising, falling)).T


def compute_mel(waveform, sample_rate: int, config: MelConfig = MelConfig(),
                utterance_id: str = "", speaker_id: Optional[str] = None) -> MelSpectrogram:
    """Log-mel spectrogram with a Hann window and zero center padding.

    The number of frames is ``1 + len(waveform) // hop_length``.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or waveform.size == 0:
        raise InputError("waveform must be a non-empty 1-D sequence")
    if sample_rate != config.sample_rate:
        raise ConfigError(f"sample rate {sample_rate} does not match config {config.sample_rate}")

    n_fft, hop, win = config.n_fft, config.hop_length, config.win_length
    pad = n_fft // 2
    padded = np.pad(waveform, (pad, pad))
    n_frames = 1 + waveform.size // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    # periodic Hann of win_length centred inside the n_fft frame
    window = np.zeros(n_fft)
    offset = (n_fft - win) // 2
    window[offset:offset + win] = np.hanning(win + 1)[:-1]
    spectrum = np.abs(np.fft.rfft(padded[idx] * window, axis=-1)) ** 2
    mel = spectrum @ mel_filterbank(config)
    frames = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(frames, config.frame_rate_hz, utterance_id, speaker_id)


def crop_to_common_length(a: MelSpectrogram, b: MelSpectrogram):
    """Trim both spectrograms to their shared leading frames."""
    t = min(a.n_frames, b.n_frames)
    if a.n_frames == t and b.n_frames == t:
        return a, b
    return a.with_frames(a.frames[:t]), b.with_frames(b.frames[:t])


@dataclasses.dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the synthetic corpus.

    Utterance ``j`` of every speaker renders the same content contour, so the
    corpus is parallel across speakers (usable for MCD against ground truth).
    """

    n_speakers: int = 2
    utterances_per_speaker: int = 10
    frames_per_utterance: tuple = (64, 96)
    mel_channels: int = 80
    seed: int = 0
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        lo, hi = self.frames_per_utterance
        if min(self.n_speakers, self.utterances_per_speaker, self.mel_channels, lo) < 1:
            raise ConfigError("all corpus counts must be >= 1")
        if hi < lo:
            raise ConfigError(f"empty frame range {self.frames_per_utterance}")


def _smooth_curve(rng: np.random.Generator, length: int, knot_every: int, scale: float) -> np.ndarray:
    n_knots = max(2, length // knot_every + 2)
    knots = rng.normal(0.0, scale, n_knots)
    return np.interp(np.linspace(0, n_knots - 1, length), np.arange(n_knots), knots)


def generate_synthetic_corpus(spec: CorpusSpec) -> list[MelSpectrogram]:
    """Deterministic log-mel corpus: speaker = fixed spectral envelope, utterance = moving formants."""
    rng = np.random.default_rng(spec.seed)
    c = spec.mel_channels
    axis = np.arange(c) / max(c - 1, 1)

    envelopes = []
    for _ in range(spec.n_speakers):
        amps = rng.normal(0.0, 1.0, 4) / np.arange(1, 5)
        phases = rng.uniform(0, 2 * np.pi, 4)
        env = sum(a * np.cos(np.pi * (j + 1) * axis + p) for j, (a, p) in enumerate(zip(amps, phases)))
        envelopes.append(1.5 * env + rng.normal(0.0, 0.5))

    lo, hi = spec.frames_per_utterance
    contents = []
    for _ in range(spec.utterances_per_speaker):
        t = int(rng.integers(lo, hi + 1))
        formant1 = 0.2 + 0.15 * np.tanh(_smooth_curve(rng, t, 8, 1.5))
        formant2 = 0.6 + 0.15 * np.tanh(_smooth_curve(rng, t, 8, 1.5))
        energy = _smooth_curve(rng, t, 6, 1.0)
        contents.append((formant1, formant2, energy))

    width = 0.05
    corpus = []
    for s, env in enumerate(envelopes):
        for u, (f1, f2, energy) in enumerate(contents):
            bumps = (3.0 * np.exp(-((axis[None, :] - f1[:, None]) ** 2) / (2 * width ** 2))
                     + 2.0 * np.exp(-((axis[None, :] - f2[:, None]) ** 2) / (2 * width ** 2)))
            frames = -4.0 + env[None, :] + energy[:, None] + bumps
            frames = frames + rng.normal(0.0, 0.1, frames.shape)
            corpus.append(MelSpectrogram(
                frames.astype(np.float32), spec.frame_rate_hz,
                utterance_id=f"u{u:03d}", speaker_id=f"spk{s:02d}"))
    return corpus


def write_melspec(path, mel: MelSpectrogram) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(mel.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(mel.n_frames, mel.n_channels, mel.frame_rate_hz))
        f.write(data.tobytes())


def read_melspec(path, speaker_id: Optional[str] = None) -> MelSpectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    t, c, rate = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * t * c
    if len(raw) != expected:
        raise InputError(f"{path}: expected {expected} bytes for {t}x{c} frames, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, c).astype(np.float32)
    return MelSpectrogram(frames, float(rate), utterance_id=path.stem, speaker_id=speaker_id)


def save_corpus(root, corpus: Iterable[MelSpectrogram]) -> None:
    """Write ``<root>/<speaker_id>/<utterance_id>.melspec`` for each utterance."""
    root = Path(root)
    for mel in corpus:
        if mel.speaker_id is None:
            raise InputError(f"utterance {mel.utterance_id!r} has no speaker label")
        write_melspec(root / mel.speaker_id / f"{mel.utterance_id}{MELSPEC_SUFFIX}", mel)


def load_corpus(root) -> list[MelSpectrogram]:
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"corpus directory not found: {root}")
    corpus = [read_melspec(p, speaker_id=p.parent.name)
              for p in sorted(root.glob(f"*/*{MELSPEC_SUFFIX}"))]
    if not corpus:
        raise InputError(f"no {MELSPEC_SUFFIX} files under {root}")
    return corpus


def group_by_speaker(corpus: Iterable[MelSpectrogram]) -> dict[str, list[MelSpectrogram]]:
    groups: dict[str, list[MelSpectrogram]] = {}
    for mel in corpus:
        groups.setdefault(mel.speaker_id, []).append(mel)
    return groups


def log_floor_value(config: MelConfig = MelConfig()) -> float:
    return math.log(config.log_floor)
