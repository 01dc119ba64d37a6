"""Objective evaluation: mel-cepstral distortion, a cosine speaker-detection protocol and GSE export."""

from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft
import torch

from clnvc.audio import MelSpectrogram
from clnvc.errors import InputError
from clnvc.objectives import cosine_similarity

N_REFERENCES = 6
CEPSTRAL_ORDER = 24
MCD_SCALE = 10.0 / math.log(10.0)


def _frames(mel) -> np.ndarray:
    if isinstance(mel, MelSpectrogram):
        mel = mel.frames
    if isinstance(mel, torch.Tensor):
        mel = mel.detach().cpu().numpy()
    mel = np.asarray(mel, dtype=np.float64)
    return mel[0] if mel.ndim == 3 and mel.shape[0] == 1 else mel


def mel_cepstrum(mel, order: int = CEPSTRAL_ORDER) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, keeping coefficients ``1..order``."""
    frames = _frames(mel)
    return scipy.fft.dct(frames, type=2, norm="ortho", axis=-1)[..., 1:order + 1]


def mcd(mel_a, mel_b, order: int = CEPSTRAL_ORDER) -> float:
    """Mean over frames of ``(10 / ln 10) * sqrt(2 * sum_d (c_a,d - c_b,d)^2)`` in dB.

    Both inputs must have the same shape; crop with ``crop_to_common_length`` first.
    """
    a, b = _frames(mel_a), _frames(mel_b)
    if a.shape != b.shape:
        raise InputError(f"MCD needs equal shapes, got {a.shape} and {b.shape}")
    diff = mel_cepstrum(a, order) - mel_cepstrum(b, order)
    per_frame = MCD_SCALE * np.sqrt(2.0 * (diff ** 2).sum(-1))
    return float(per_frame.mean())


@dataclasses.dataclass(frozen=True)
class Trial:
    trial_id: str
    mel: object
    is_real: bool


@dataclasses.dataclass(frozen=True)
class TrialScore:
    repeat: int
    trial_id: str
    is_real: bool
    score: float
    accepted: bool


@dataclasses.dataclass
class DetectionReport:
    scores: List[TrialScore]
    # one threshold per repeat; `threshold` is their mean
    thresholds: List[float]
    repeats: int

    @property
    def threshold(self) -> float:
        return float(np.mean(self.thresholds))

    def mean_score(self, is_real: Optional[bool] = None) -> float:
        chosen = [s.score for s in self.scores if is_real is None or s.is_real == is_real]
        return float(np.mean(chosen)) if chosen else float("nan")

    def acceptance_rate(self, is_real: Optional[bool] = None) -> float:
        chosen = [s.accepted for s in self.scores if is_real is None or s.is_real == is_real]
        return float(np.mean(chosen)) if chosen else float("nan")


@torch.no_grad()
def global_embedding(model, mel) -> torch.Tensor:
    """GSE ``[D_g]`` of a single utterance."""
    gse, _ = model.encode_style(mel)
    return gse[0]


def leave_one_out_threshold(reference_gses: torch.Tensor) -> float:
    """``mean - 2 * std`` of each reference's cosine to the centroid of the others."""
    n = reference_gses.shape[0]
    sims = []
    for i in range(n):
        others = torch.cat([reference_gses[:i], reference_gses[i + 1:]])
        sims.append(float(cosine_similarity(reference_gses[i], others.mean(0))))
    return float(np.mean(sims) - 2.0 * np.std(sims))


def detection_test(model, references: Sequence, trials: Sequence[Trial], repeats: int = 1,
                   rng: Optional[np.random.Generator] = None) -> DetectionReport:
    """Score each trial by cosine similarity of its GSE to the centroid of 6 reference GSEs.

    With more than 6 references, each repeat draws a fresh subset of 6 from the pool
    using ``rng``; with exactly 6, all repeats share them.
    """
    if len(references) < N_REFERENCES:
        raise InputError(f"detection needs at least {N_REFERENCES} references, got {len(references)}")
    if not trials:
        raise InputError("detection needs at least one trial")
    if repeats < 1:
        raise InputError(f"repeats must be >= 1, got {repeats}")
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = torch.stack([global_embedding(model, m) for m in references])
    trial_gses = [global_embedding(model, t.mel) for t in trials]
    scores, thresholds = [], []
    for r in range(repeats):
        if len(references) == N_REFERENCES:
            chosen = pool
        else:
            chosen = pool[torch.from_numpy(rng.choice(len(references), N_REFERENCES, replace=False))]
        centroid = chosen.mean(0)
        threshold = leave_one_out_threshold(chosen)
        thresholds.append(threshold)
        for trial, gse in zip(trials, trial_gses):
            score = float(np.clip(float(cosine_similarity(gse, centroid)), -1.0, 1.0))
            scores.append(TrialScore(r, trial.trial_id, trial.is_real, score, score > threshold))
    return DetectionReport(scores, thresholds, repeats)


def export_embeddings(model, corpus: Sequence[MelSpectrogram], out) -> List[Tuple[str, str, np.ndarray]]:
    """Write one tab-separated row of GSE values per utterance and return the rows."""
    rows = []
    for mel in corpus:
        gse = global_embedding(model, mel).double().cpu().numpy()
        rows.append((mel.speaker_id or "", mel.utterance_id or "", gse))
    width = rows[0][2].shape[0] if rows else model.config.embedding_dim
    path = Path(out)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(["speaker", "utterance"] + [f"g_{i}" for i in range(width)])
            for speaker, utt, gse in rows:
                writer.writerow([speaker, utt] + [repr(float(v)) for v in gse])
    except OSError as exc:
        raise OSError(f"could not write embeddings to {path}: {exc}") from exc
    return rows


def read_embeddings(path) -> List[Tuple[str, str, np.ndarray]]:
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        next(reader)
        return [(row[0], row[1], np.array([float(v) for v in row[2:]])) for row in reader]
