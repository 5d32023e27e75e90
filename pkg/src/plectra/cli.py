"""Command-line entry point: ``plectra <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input files, config violations).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import audio, metrics, model, notation, synthesis, tokenizer, training
from .checkpoint import CheckpointError, load_checkpoint
from .decoding import DecodingConfig, transcribe
from .experiment import ExperimentError, ExperimentSpec, format_comparison, run_experiment, timbre_grid_spec
from .midi import export_midi

log = logging.getLogger("plectra")

DATA_ERRORS = (
    OSError,
    json.JSONDecodeError,
    KeyError,
    audio.AudioError,
    notation.NotationError,
    synthesis.SynthesisError,
    tokenizer.TokenizerError,
    metrics.MetricsError,
    training.TrainingError,
    CheckpointError,
    ExperimentError,
    ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _model_config(value) -> model.ModelConfig:
    if value is None or value == "desk":
        return model.DESK_CONFIG
    if value == "full":
        return model.FULL_CONFIG
    return model.ModelConfig.from_dict(value)


def _data_root(args) -> Path:
    env = os.environ.get(training.DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(args.manifest).parent


# --- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _read_json(args.config)
    presets = cfg.pop("presets", list(synthesis.PRESETS))
    spec = synthesis.CorpusSpec.from_dict(cfg)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    manifest = synthesis.generate_corpus(
        spec, [synthesis.get_preset(p) for p in presets], args.out, write_stems=args.stems
    )
    print(f"wrote {len(manifest['entries'])} clips to {args.out}")
    return 0


def cmd_annotate(args) -> int:
    tab = notation.load_tab(args.tab)
    channels = audio.read_wav_channels(args.audio)
    if channels.shape[0] == 6:
        result = notation.annotate(tab, [audio.AudioClip(c) for c in channels])
    else:
        result = notation.annotate(tab, audio.AudioClip(channels.sum(axis=0)))
    notation.save_notes(args.out, result.notes)
    print(
        f"{len(result.notes)} notes annotated, {len(result.unmatched_expected)} tab notes unmatched, "
        f"{len(result.spurious_detected)} spurious onsets"
    )
    return 0


def cmd_features(args) -> int:
    mel = audio.compute_log_mel(audio.read_wav(args.audio))
    audio.write_features(args.out, mel)
    print(f"{mel.values.shape[0]} frames x {mel.values.shape[1]} mel bins -> {args.out}")
    return 0


def cmd_train(args) -> int:
    if not args.manifest:
        raise UsageError("train needs --manifest")
    cfg = _read_json(args.config)
    train_fields = dict(cfg.get("train", {}))
    overrides = {
        "seed": args.seed,
        "batch_size": args.batch_size,
        "segment_len": args.segment_len,
        "lambda_am": args.lambda_am,
        "lambda_lm": args.lambda_lm,
        "eval_route": args.route,
    }
    train_fields.update({k: v for k, v in overrides.items() if v is not None})
    train_cfg = training.TrainConfig.from_dict(train_fields)
    model_cfg = _model_config(cfg.get("model"))
    ckpt, history = training.train(
        args.manifest,
        train_cfg,
        model_cfg,
        cfg.get("train_presets"),
        cfg.get("valid_presets"),
        metrics_path=args.metrics,
        root=_data_root(args),
    )
    ckpt.save(args.out)
    best = ckpt.extra.get("best_val_onset_f1")
    print(f"trained {ckpt.step} steps, best validation onset F1 {best:.3f}; checkpoint -> {args.out}")
    return 0


def _decoding_config(args) -> DecodingConfig:
    return DecodingConfig(**_read_json(args.config).get("decoding", {}))


def cmd_transcribe(args) -> int:
    if not args.checkpoint:
        raise UsageError("transcribe needs --checkpoint")
    net = load_checkpoint(args.checkpoint).build_model()
    decoding = _decoding_config(args)
    route = args.route or "encoder"
    segment_len = args.segment_len or 64
    batch_size = args.batch_size or 64
    if args.audio:
        mel = audio.compute_log_mel(audio.read_wav(args.audio)).values
        notes = transcribe(net, mel, route, segment_len, decoding, batch_size)
        notation.save_notes(args.out, notes)
        if args.midi:
            export_midi(notes, args.midi)
        if args.plot:
            from .plot import plot_transcription

            ref = notation.load_notes(args.ref) if args.ref else []
            plot_transcription(args.plot, ref, notes, mel)
        print(f"{len(notes)} notes -> {args.out}")
        return 0
    if not args.manifest:
        raise UsageError("transcribe needs --audio or --manifest")
    root = _data_root(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = training.select_entries(training.load_manifest(args.manifest), args.split, args.presets)
    if not entries:
        raise metrics.MetricsError("empty split")
    for entry in entries:
        mel = audio.compute_log_mel(audio.read_wav(root / entry["audio_path"])).values
        notes = transcribe(net, mel, route, segment_len, decoding, batch_size)
        notation.save_notes(metrics.estimate_path(out, entry), notes)
    print(f"transcribed {len(entries)} files -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    tolerance = args.tolerance_ms / 1000.0
    if args.ref and args.est:
        ref, est = notation.load_notes(args.ref), notation.load_notes(args.est)
        report = metrics.score(ref, est, tolerance)
        print(metrics.format_table(report))
        if args.out:
            metrics.save_report(args.out, report)
        if args.plot:
            from .plot import plot_transcription

            mel = audio.compute_log_mel(audio.read_wav(args.audio)).values if args.audio else None
            plot_transcription(args.plot, ref, est, mel)
        return 0
    if not (args.manifest and args.estimates):
        raise UsageError("evaluate needs --ref/--est or --manifest/--estimates")
    entries = training.select_entries(training.load_manifest(args.manifest), args.split, args.presets)
    out = metrics.score_corpus(entries, _data_root(args), args.estimates, tolerance)
    print(metrics.format_table(metrics.report_from_counts(out["micro"]["counts"]), f"{args.split} (micro)"))
    if args.out:
        metrics.save_report(args.out, out)
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_dict(_read_json(args.spec)) if args.spec else timbre_grid_spec()
    if args.seed is not None:
        spec = replace(spec, seeds=[args.seed])
    summary = run_experiment(spec, args.out, args.manifest)
    print(format_comparison(summary))
    trend = summary["trend"]
    if trend is not None and not trend["holds"]:
        log.warning("the richer train set did not beat %s on every held-out preset", trend["baseline"])
    return 0


def cmd_export_midi(args) -> int:
    notes = notation.load_notes(args.notes)
    export_midi(notes, args.out)
    print(f"{len(notes)} notes -> {args.out}")
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plectra", description="Guitar transcription toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic multi-preset corpus")
    p.add_argument("--config", help="JSON with corpus fields and an optional 'presets' list")
    p.add_argument("--seed", type=int)
    p.add_argument("--stems", action="store_true", help="also write six-channel per-string stems")
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", help="align a tab to a recording")
    p.add_argument("--tab", required=True)
    p.add_argument("--audio", required=True, help="mono mix or six-channel per-string WAV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("features", help="write the log-mel feature file for a WAV")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    p.add_argument("--manifest")
    p.add_argument("--config", help="JSON with 'train', 'model', 'train_presets', 'valid_presets'")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--segment-len", type=int)
    p.add_argument("--lambda-am", type=float)
    p.add_argument("--lambda-lm", type=float)
    p.add_argument("--route", choices=["encoder", "decoder"], help="route used for validation")
    p.add_argument("--metrics", help="JSON-lines training log")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="transcribe a WAV file or a manifest split")
    p.add_argument("--checkpoint")
    p.add_argument("--audio")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--presets", nargs="+")
    p.add_argument("--config", help="JSON with an optional 'decoding' block")
    p.add_argument("--route", choices=["encoder", "decoder"])
    p.add_argument("--segment-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--midi", help="also write a MIDI file")
    p.add_argument("--ref", help="reference notes for --plot")
    p.add_argument("--plot", help="write a spectrogram/reference/estimate figure")
    p.add_argument("--out", required=True, help="notes JSON (or a directory with --manifest)")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("evaluate", help="score estimates against references")
    p.add_argument("--ref")
    p.add_argument("--est")
    p.add_argument("--audio", help="recording shown by --plot")
    p.add_argument("--manifest")
    p.add_argument("--estimates", help="directory of <audio stem>.json estimates")
    p.add_argument("--split", default="test")
    p.add_argument("--presets", nargs="+")
    p.add_argument("--tolerance-ms", type=float, default=50.0)
    p.add_argument("--plot")
    p.add_argument("--out", help="report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the train-preset x held-out-preset grid")
    p.add_argument("--spec", help="experiment JSON; defaults to the DI vs 3Amps grid")
    p.add_argument("--manifest", help="use an existing corpus instead of rendering one")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("export-midi", help="write notes JSON as a MIDI file")
    p.add_argument("--notes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_midi)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"plectra: error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"plectra: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
