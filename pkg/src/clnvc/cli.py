"""Command-line entry point: ``clnvc {synth-corpus,train,convert,eval}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from clnvc.audio import (CorpusSpec, MelSpectrogram, crop_to_common_length, generate_synthetic_corpus,
                         group_by_speaker, load_corpus, load_mel_config, read_melspec, save_corpus,
                         write_melspec)
from clnvc.errors import CheckpointError, CLNVCError, ConfigError, InputError
from clnvc.evaluation import Trial, detection_test, export_embeddings, mcd
from clnvc.training import (FUSION_SCHEMES, TrainConfig, load_checkpoint, load_train_config,
                            save_checkpoint, train)

logger = logging.getLogger("clnvc")


def _load_trained(path):
    state = load_checkpoint(path)
    if state.step == 0:
        raise CheckpointError(f"{path} holds an untrained model (step 0)")
    state.model.eval()
    return state


def _check_channels(state, corpus, args):
    n_mels = state.model.config.n_mels
    if args.mel_config is not None:
        expected = load_mel_config(args.mel_config).n_mels
        if expected != n_mels:
            raise ConfigError(f"mel config has {expected} channels, model expects {n_mels}")
    for mel in corpus:
        if mel.n_channels != n_mels:
            raise InputError(f"{mel.utterance_id}: {mel.n_channels} channels, model expects {n_mels}")


def cmd_synth_corpus(args):
    spec = CorpusSpec(args.speakers, args.utterances, (args.min_frames, args.max_frames),
                      args.channels, args.seed)
    corpus = generate_synthetic_corpus(spec)
    save_corpus(args.out, corpus)
    print(f"wrote {len(corpus)} utterances to {args.out}")


def cmd_train(args):
    config = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.fusion:
        overrides["fusion"] = args.fusion
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = dataclasses.replace(config, **overrides)
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise InputError(f"no .melspec files under {args.corpus}")
    if corpus[0].n_channels != config.model.n_mels:
        raise ConfigError(f"corpus has {corpus[0].n_channels} channels, config expects {config.model.n_mels}")
    metrics = args.metrics or Path(args.out).with_suffix(".metrics.jsonl")
    state, history = train(corpus, config, metrics_path=metrics)
    save_checkpoint(state, args.out)
    last = history[-1] if history else {}
    print(json.dumps({"checkpoint": str(args.out), "fingerprint": config.fingerprint(), **last}))


def cmd_convert(args):
    state = _load_trained(args.ckpt)
    source, target = read_melspec(args.source), read_melspec(args.target)
    _check_channels(state, [source, target], args)
    with torch.no_grad():
        out = state.model.convert(source, target)[0]
    write_melspec(args.out, MelSpectrogram(out.double().numpy().astype(np.float32), source.frame_rate_hz))
    print(f"wrote {out.shape[0]} frames to {args.out}")


def cmd_eval(args):
    state = _load_trained(args.ckpt)
    model = state.model
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise InputError(f"no .melspec files under {args.corpus}")
    _check_channels(state, corpus, args)
    if args.metric == "embeddings":
        rows = export_embeddings(model, corpus, args.out)
        print(f"wrote {len(rows)} embeddings to {args.out}")
        return
    if args.metric == "mcd":
        results = []
        with torch.no_grad():
            for mel in corpus:
                out = model.reconstruct(mel)[0].double().numpy()
                a, b = crop_to_common_length(mel, mel.with_frames(out))
                results.append({"speaker": mel.speaker_id, "utterance": mel.utterance_id,
                                "mcd": mcd(a, b)})
        summary = {"mean_mcd": float(np.mean([r["mcd"] for r in results])), "utterances": results}
    else:
        summary = _detect(model, corpus, args)
    text = json.dumps(summary, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text if not args.out else f"wrote {args.metric} report to {args.out}")


def _detect(model, corpus, args):
    groups = group_by_speaker(corpus)
    speaker = args.speaker or sorted(groups)[0]
    if speaker not in groups:
        raise InputError(f"speaker {speaker!r} not in corpus")
    own = groups[speaker]
    if len(own) < args.references:
        raise InputError(f"speaker {speaker!r} has {len(own)} utterances, need {args.references} references")
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(own))
    references = [own[i] for i in order[:args.references]]
    trials = [Trial(f"real:{own[i].utterance_id}", own[i], True) for i in order[args.references:]]
    others = [s for s in sorted(groups) if s != speaker]
    with torch.no_grad():
        for other in others:
            for mel in groups[other][:args.trials_per_speaker]:
                converted = model.convert(mel, references[0])[0]
                trials.append(Trial(f"converted:{mel.speaker_id}/{mel.utterance_id}",
                                    converted, False))
                trials.append(Trial(f"other:{mel.speaker_id}/{mel.utterance_id}", mel, False))
    report = detection_test(model, references, trials,
                            repeats=args.repeats, rng=rng)
    return {
        "speaker": speaker,
        "threshold": report.threshold,
        "repeats": report.repeats,
        "mean_score_real": report.mean_score(True),
        "mean_score_other": report.mean_score(False),
        "scores": [dataclasses.asdict(s) for s in report.scores],
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clnvc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--mel-config", type=Path, help="YAML mel front-end config to check channel counts against")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write a synthetic parallel corpus of .melspec files")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--utterances", type=int, default=10)
    p.add_argument("--min-frames", type=int, default=64)
    p.add_argument("--max-frames", type=int, default=96)
    p.add_argument("--channels", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--config", type=Path)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--fusion", choices=FUSION_SCHEMES)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", type=Path, help="JSON-lines metrics file (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="voice a source utterance with a target utterance's speaker")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="objective evaluation")
    p.add_argument("metric", choices=("mcd", "detect", "embeddings"))
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--speaker", help="detect: reference speaker (default: first)")
    p.add_argument("--references", type=int, default=6, help="detect: reference pool size")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--trials-per-speaker", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.metric == "embeddings" and args.out is None:
        print("clnvc: error: eval embeddings needs --out", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except CLNVCError as err:
        print(f"clnvc: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
