"""Batch sampling, the joint training step, the training loop and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import warnings
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import yaml

from clnvc.audio import MelSpectrogram, crop_to_common_length, group_by_speaker
from clnvc.content import adversarial_loss
from clnvc.errors import CheckpointError, ConfigError, InputError, NumericError
from clnvc.fusion import DegenerateFusionWarning, LinearFusionPlan, linear_fuse
from clnvc.model import CLNVC, ModelConfig
from clnvc.objectives import (LossWeights, consistency_loss, contrastive_loss,
                              reconstruction_loss, total_loss)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "clnvc-checkpoint"
CHECKPOINT_VERSION = 1
FUSION_SCHEMES = ("dynamic", "linear")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    fusion: str = "dynamic"
    learning_rate: float = 1e-3
    speakers_per_batch: int = 4
    # anchor + positive drawn from the anchor speaker
    utterances_per_speaker: int = 2
    steps: int = 2000
    seed: int = 0
    grl_lambda: float = 1.0
    mixing_interval: int = 5
    max_mix_fraction: float = 0.5
    keep_plain_negatives: bool = True
    detach_synthesis: bool = False
    # steps between dead-code restarts; 0 disables
    code_restart_every: int = 50
    dtype: str = "float32"
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.fusion not in FUSION_SCHEMES:
            raise ConfigError(f"fusion must be one of {FUSION_SCHEMES}, got {self.fusion!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.speakers_per_batch < 2:
            raise ConfigError("a batch needs the anchor speaker and at least one other speaker")
        if self.utterances_per_speaker != 2:
            raise ConfigError("utterances_per_speaker is anchor + positive and must be 2")
        if self.mixing_interval < 1:
            raise ConfigError("mixing_interval must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["style_channels"] = list(self.model.style_channels)
        d["model"]["style_strides"] = list(self.model.style_strides)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        if "weights" in raw:
            raw["weights"] = LossWeights(**raw["weights"])
        if "model" in raw:
            raw["model"] = ModelConfig(**raw["model"])
        return cls(**raw)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        return TrainConfig.from_dict(yaml.safe_load(f))


@dataclasses.dataclass
class ContrastiveBatch:
    anchor: MelSpectrogram
    positive: MelSpectrogram
    negatives: list
    # first frame spliced by linear fusion
    fusion_start: int = 0

    def __post_init__(self):
        if not self.negatives:
            raise InputError("a contrastive batch needs at least one negative")
        if self.positive.speaker_id != self.anchor.speaker_id:
            raise InputError("positive must share the anchor's speaker")
        if any(n.speaker_id == self.anchor.speaker_id for n in self.negatives):
            raise InputError("negatives must come from other speakers")

    @property
    def fused_negative_source(self) -> MelSpectrogram:
        return self.negatives[0]


def sample_contrastive_batch(corpus: Sequence[MelSpectrogram], rng: np.random.Generator,
                             speakers_per_batch: int = 4) -> ContrastiveBatch:
    """Anchor/positive from one speaker, one negative from each of up to ``speakers_per_batch - 1`` others."""
    groups = group_by_speaker(corpus)
    speakers = sorted(groups)
    eligible = [s for s in speakers if len(groups[s]) >= 2]
    if len(speakers) < 2 or not eligible:
        raise InputError("corpus needs >= 2 speakers and one speaker with >= 2 utterances")
    anchor_speaker = eligible[rng.integers(len(eligible))]
    i, j = rng.choice(len(groups[anchor_speaker]), size=2, replace=False)
    others = [s for s in speakers if s != anchor_speaker]
    n_neg = min(speakers_per_batch - 1, len(others))
    chosen = rng.choice(len(others), size=n_neg, replace=False)
    negatives = []
    for k in chosen:
        utts = groups[others[k]]
        negatives.append(utts[rng.integers(len(utts))])
    anchor = groups[anchor_speaker][i]
    common = min(anchor.n_frames, negatives[0].n_frames)
    start = int(rng.integers(common))
    return ContrastiveBatch(anchor, groups[anchor_speaker][j], negatives, start)


def compute_losses(model: CLNVC, batch: ContrastiveBatch, cfg: TrainConfig,
                   use_grl: bool = True) -> dict:
    """Run the full training graph for one batch.

    Returns the five loss parts under ``recon``, ``sim``, ``q``, ``adv``, ``cc``
    plus the tensors the diagnostics need (embeddings, reconstructions, indices).
    ``use_grl=False`` removes the reversal layer from the adversarial branch.
    """
    mel_1 = model.as_input(batch.anchor)
    mel_2 = model.as_input(batch.fused_negative_source)
    n_frames = mel_1.shape[1]

    encoded = model.encode_content(mel_1)
    g_1, lpe_1 = model.encode_style(mel_1)
    g_2, _ = model.encode_style(mel_2)
    g_pos, _ = model.encode_style(batch.positive)
    aligned, _ = model.align(encoded.quantized, lpe_1)
    m_recon = model.decode(encoded.quantized, aligned, g_1, n_frames)

    if cfg.fusion == "dynamic":
        g_n = model.fusion(g_1, g_2)
    else:
        a, b = crop_to_common_length(batch.anchor, batch.fused_negative_source)
        plan = LinearFusionPlan(batch.fusion_start, cfg.mixing_interval, cfg.max_mix_fraction)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateFusionWarning)
            mixed = linear_fuse(model.as_input(a)[0], model.as_input(b)[0], plan)
        g_n, _ = model.encode_style(mixed)
    m_syn = model.decode(encoded.quantized, aligned, g_n, n_frames)
    g_syn, _ = model.encode_style(m_syn.detach() if cfg.detach_synthesis else m_syn)
    g_anchor, _ = model.encode_style(m_recon)

    plain = [g_2] + [model.encode_style(n)[0] for n in batch.negatives[1:]]
    negatives = [g_syn] + (plain if cfg.keep_plain_negatives else [])
    prediction = model.predict_speaker(encoded.continuous, cfg.grl_lambda if use_grl else None)

    return {
        "recon": reconstruction_loss(m_recon, mel_1),
        "sim": contrastive_loss(g_anchor[0], g_pos[0], [g[0] for g in negatives]),
        "q": encoded.vq_loss,
        "adv": adversarial_loss(prediction, g_1),
        "cc": consistency_loss(m_recon, m_syn),
        "commitment": encoded.commitment,
        "codebook": encoded.codebook_loss,
        "indices": encoded.indices,
        "continuous": encoded.continuous,
        "m_recon": m_recon,
        "m_syn": m_syn,
        "g_anchor": g_anchor[0],
        "g_positive": g_pos[0],
        "g_syn": g_syn[0],
        "g_plain": [g[0] for g in plain],
    }


@dataclasses.dataclass
class TrainState:
    model: CLNVC
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    # batch sampling
    rng: np.random.Generator
    # codebook initialization and restarts
    generator: torch.Generator
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig, corpus: Optional[Sequence[MelSpectrogram]] = None) -> "TrainState":
        """Fresh state; with a corpus, also fit input normalization and seed the codebook from it."""
        torch.manual_seed(config.seed)
        model = CLNVC(config.model).to(DTYPES[config.dtype])
        generator = torch.Generator().manual_seed(config.seed)
        if corpus is not None:
            model.set_feature_stats(corpus)
            with torch.no_grad():
                z = torch.cat([model.encode_content(mel).continuous[0] for mel in corpus])
            model.quantizer.initialize_from(z, generator)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        return cls(model, optimizer, config, np.random.default_rng(config.seed), generator)

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def train_step(state: TrainState, batch: ContrastiveBatch) -> dict:
    """One optimizer update on the weighted total loss. Mutates ``state``; returns the metrics record."""
    model, cfg = state.model, state.config
    model.train()
    parts = compute_losses(model, batch, cfg)
    try:
        loss = total_loss(parts, cfg.weights)
    except NumericError as err:
        breakdown = {k: _scalar(parts[k]) for k in ("recon", "sim", "q", "adv", "cc")}
        raise NumericError(f"step {state.step + 1} aborted: {err}; terms {breakdown}") from err
    if not torch.isfinite(loss):
        raise NumericError(f"step {state.step + 1} aborted: total loss {float(loss)}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    model.quantizer.record_usage(parts["indices"])
    if cfg.code_restart_every and state.step % cfg.code_restart_every == 0:
        model.quantizer.restart_dead_codes(parts["continuous"].detach().flatten(0, -2), state.generator)
    return {
        "step": state.step,
        "l_recon": _scalar(parts["recon"]),
        "l_sim": _scalar(parts["sim"]),
        "l_q": _scalar(parts["q"]),
        "l_adv": _scalar(parts["adv"]),
        "l_cc": _scalar(parts["cc"]),
        "total": _scalar(loss),
    }


def train(corpus: Sequence[MelSpectrogram], config: TrainConfig, steps: Optional[int] = None,
          state: Optional[TrainState] = None, metrics_path=None,
          callback: Optional[Callable[[TrainState, dict], None]] = None):
    """Run ``steps`` (default ``config.steps``) updates; returns ``(state, metrics list)``.

    Metrics are appended to ``metrics_path`` as JSON lines when given.
    """
    state = state or TrainState.create(config, corpus)
    steps = config.steps if steps is None else steps
    history = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            batch = sample_contrastive_batch(corpus, state.rng, config.speakers_per_batch)
            record = train_step(state, batch)
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
            if callback:
                callback(state, record)
            if state.step % 100 == 0:
                logger.info("step %d total %.4f recon %.4f", state.step, record["total"], record["l_recon"])
    finally:
        if sink:
            sink.close()
    return state, history


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "fingerprint": state.config.fingerprint(),
        "step": state.step,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": state.rng.bit_generator.state,
        "generator": state.generator.get_state(),
    }, path)


def load_checkpoint(path, expected: Optional[TrainConfig] = None) -> TrainState:
    """Restore a TrainState; with ``expected``, the stored config fingerprint must match it."""
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    config = TrainConfig.from_dict(blob["config"])
    if config.fingerprint() != blob["fingerprint"]:
        raise CheckpointError(f"{path}: stored config does not match its fingerprint")
    if expected is not None and expected.fingerprint() != blob["fingerprint"]:
        raise CheckpointError(f"{path} was trained with a different config")

    state = TrainState.create(config)
    try:
        state.model.load_state_dict(blob["model"])
        state.optimizer.load_state_dict(blob["optimizer"])
    except (RuntimeError, KeyError, ValueError) as err:
        raise CheckpointError(f"{path}: corrupt parameters: {err}") from err
    for name, p in state.model.named_parameters():
        if not torch.isfinite(p).all():
            raise CheckpointError(f"{path}: parameter {name} is not finite")
    state.rng.bit_generator.state = blob["rng"]
    state.generator.set_state(blob["generator"])
    state.step = int(blob["step"])
    return state

