"""Dataset assembly from a corpus manifest, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .audio import compute_log_mel, read_wav
from .checkpoint import Checkpoint
from .decoding import DecodingConfig, split_mel, transcribe
from .metrics import aggregate, score
from .model import (
    LossBreakdown,
    ModelConfig,
    NumericDivergence,
    TranscriptionTransformer,
    compute_losses,
    shift_right,
)
from .notation import NoteEvent, load_notes
from .tokenizer import TokenOverflow, segment_dataset, segment_targets, tokenize_segment

log = logging.getLogger(__name__)

DATA_DIR_ENV = "PLECTRA_DATA_DIR"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    segment_len: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    max_steps: int = 3000
    seed: int = 0
    lambda_am: float = 1.0
    lambda_lm: float = 1.0
    eval_interval: int = 100
    patience: int = 10
    eval_route: str = "encoder"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_am < 0 or self.lambda_lm < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.segment_len <= 512:
            raise ValueError("segment_len must be in (0, 512]")
        if self.eval_route not in ("encoder", "decoder"):
            raise ValueError("eval_route must be 'encoder' or 'decoder'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --- data ------------------------------------------------------------------


@dataclass
class Recording:
    name: str
    mel: np.ndarray
    notes: list[NoteEvent]


@dataclass
class SegmentBatch:
    """Stacked training segments (N, L, ...)."""

    mel: np.ndarray
    onset: np.ndarray
    offset: np.ndarray
    activation: np.ndarray
    tokens: np.ndarray

    def __len__(self):
        return self.mel.shape[0]

    def take(self, idx) -> "SegmentBatch":
        return SegmentBatch(self.mel[idx], self.onset[idx], self.offset[idx], self.activation[idx], self.tokens[idx])


def data_root(manifest_path) -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else Path(manifest_path).parent


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("version") != 1 or "entries" not in manifest:
        raise TrainingError(f"{path}: not a version-1 manifest")
    return manifest


def select_entries(manifest: dict, split: str, presets: Optional[Sequence[str]] = None) -> list[dict]:
    return [
        e for e in manifest["entries"] if e["split"] == split and (presets is None or e["preset"] in presets)
    ]


def load_recordings(entries: Sequence[dict], root) -> list[Recording]:
    out = []
    for e in entries:
        clip = read_wav(Path(root) / e["audio_path"])
        mel = compute_log_mel(clip).values
        out.append(Recording(Path(e["audio_path"]).stem, mel, load_notes(Path(root) / e["labels_path"])))
    return out


def build_segments(recordings: Sequence[Recording], segment_len: int) -> SegmentBatch:
    mels, ons, offs, acts, toks = [], [], [], [], []
    dropped = 0
    for rec in recordings:
        n_frames = rec.mel.shape[0]
        mel_segments = split_mel(rec.mel, segment_len)
        for k, seg in enumerate(segment_dataset(rec.notes, n_frames, segment_len)):
            try:
                tokens = tokenize_segment(seg.notes, segment_len)
            except TokenOverflow:
                dropped += 1
                continue
            t = segment_targets(seg.notes, segment_len)
            mels.append(mel_segments[k])
            ons.append(t.onset)
            offs.append(t.offset)
            acts.append(t.activation)
            toks.append(tokens.as_array())
    if dropped:
        log.warning("dropped %d segments that overflow %d tokens", dropped, segment_len)
    if not mels:
        raise TrainingError("no training segments")
    return SegmentBatch(np.stack(mels), np.stack(ons), np.stack(offs), np.stack(acts), np.stack(toks))


# --- steps -----------------------------------------------------------------


def batch_losses(model: TranscriptionTransformer, batch: SegmentBatch, lambda_am=1.0, lambda_lm=1.0) -> LossBreakdown:
    dtype = next(model.parameters()).dtype
    tokens = torch.from_numpy(batch.tokens)
    decoder_input, target = shift_right(tokens)
    enc, logits = model(torch.from_numpy(batch.mel).to(dtype), decoder_input)
    return compute_losses(
        enc,
        logits,
        torch.from_numpy(batch.onset).to(dtype),
        torch.from_numpy(batch.offset).to(dtype),
        torch.from_numpy(batch.activation).to(dtype),
        target,
        lambda_am,
        lambda_lm,
    )


def evaluate_recordings(model, recordings: Sequence[Recording], route: str, segment_len: int, config=DecodingConfig()):
    model.eval()
    reports = [
        score(rec.notes, transcribe(model, rec.mel, route, segment_len, config)) for rec in recordings
    ]
    model.train()
    micro, _ = aggregate(reports)
    return micro


def fit(
    model: TranscriptionTransformer,
    data: SegmentBatch,
    cfg: TrainConfig,
    evaluate: Optional[Callable[[TranscriptionTransformer], float]] = None,
    metrics_log=None,
    stop_at: Optional[float] = None,
):
    """Optimise ``model`` on ``data``; returns (best state, best score, history).

    ``evaluate`` maps the model to a validation score (higher is better) and
    is called every ``cfg.eval_interval`` steps; training stops after
    ``cfg.patience`` evaluations without improvement, or once the score
    reaches ``stop_at``.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )
    model.train()
    history = []
    best_state, best_score, stale = None, -math.inf, 0
    order = np.empty(0, dtype=np.int64)
    for step in range(1, cfg.max_steps + 1):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
            if order.size < cfg.batch_size:
                order = np.concatenate([order, rng.integers(0, len(data), cfg.batch_size - order.size)])
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        try:
            losses = batch_losses(model, data.take(idx), cfg.lambda_am, cfg.lambda_lm)
        except NumericDivergence as exc:
            raise TrainingError(f"numeric divergence at step {step}") from exc
        if not torch.isfinite(losses.L_total):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        losses.L_total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        opt.step()

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            record = {"step": step, **losses.as_floats(), "val_onset_f1": None}
            if evaluate is not None:
                value = float(evaluate(model))
                record["val_onset_f1"] = value
                if value > best_score:
                    best_score, stale = value, 0
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                else:
                    stale += 1
            history.append(record)
            log.info("step %d L_total %.4f val %s", step, record["L_total"], record["val_onset_f1"])
            if metrics_log is not None:
                metrics_log.write(json.dumps(record) + "\n")
                metrics_log.flush()
            if evaluate is not None and (stale >= cfg.patience or (stop_at is not None and best_score >= stop_at)):
                break
    if best_state is None:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return best_state, best_score, history


def train_on_entries(
    train_entries: Sequence[dict],
    valid_entries: Sequence[dict],
    root,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    metrics_path=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train on ``train_entries``, keeping the best state on ``valid_entries``."""
    torch.set_num_threads(1)
    if not train_entries or not valid_entries:
        raise TrainingError("need non-empty train and valid splits")
    data = build_segments(load_recordings(train_entries, root), train_cfg.segment_len)
    valid = load_recordings(valid_entries, root)

    torch.manual_seed(train_cfg.seed)
    model = TranscriptionTransformer(model_cfg)

    def evaluate(m):
        return evaluate_recordings(m, valid, train_cfg.eval_route, train_cfg.segment_len).onset.f1

    handle = open(metrics_path, "w") if metrics_path else None
    try:
        best_state, best_score, history = fit(model, data, train_cfg, evaluate, handle)
    finally:
        if handle:
            handle.close()
    model.load_state_dict(best_state)
    steps = history[-1]["step"] if history else 0
    extra = {"train_config": asdict(train_cfg), "best_val_onset_f1": best_score}
    return Checkpoint.from_model(model, step=steps, extra=extra), history


def train(
    manifest_path,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_presets: Optional[Sequence[str]] = None,
    valid_presets: Optional[Sequence[str]] = None,
    metrics_path=None,
    root=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train on a manifest's train split, selecting on its valid split."""
    manifest = load_manifest(manifest_path)
    root = Path(root) if root is not None else data_root(manifest_path)
    if valid_presets is None:
        valid_presets = train_presets
    return train_on_entries(
        select_entries(manifest, "train", train_presets),
        select_entries(manifest, "valid", valid_presets),
        root,
        train_cfg,
        model_cfg,
        metrics_path,
    )


# --- overfit sanity set ----------------------------------------------------


def sanity_segments(n_segments: int = 8, segment_len: int = 64, seed: int = 0, preset: str = "di"):
    """Short synthetic clips whose notes all fit inside one segment.

    Returns (SegmentBatch, per-segment reference notes). Each clip holds
    2-4 plucks on distinct strings so there are no string collisions.
    """
    from fractions import Fraction

    from .audio import AudioClip, frame_of
    from .notation import TabDocument, TabEvent
    from .synthesis import MAX_FRET, OPEN_STRINGS, get_preset, render_tab

    rng = np.random.default_rng(seed)
    bpm = 120.0
    last_beat = Fraction(segment_len * 512, 44100) * Fraction(2) * Fraction(4, 5)
    recordings = []
    for k in range(n_segments):
        strings = rng.choice(np.arange(1, 7), size=int(rng.integers(2, 5)), replace=False)
        events = []
        for s in strings:
            dur = Fraction(int(rng.integers(2, 5)), 8)
            latest = int((last_beat - dur) * 8)
            beat = Fraction(int(rng.integers(0, max(1, latest) + 1)), 8)
            pitch = OPEN_STRINGS[int(s)] + int(rng.integers(0, min(12, MAX_FRET[int(s)]) + 1))
            events.append(TabEvent(beat, dur, pitch, int(s)))
        events.sort(key=lambda e: (e.beat, e.pitch))
        tab = TabDocument(bpm, tuple(events))
        clip, notes = render_tab(tab, get_preset(preset), rng)
        mel = compute_log_mel(AudioClip(clip.clip.samples)).values[:segment_len]
        assert all(frame_of(n.offset_s) < segment_len for n in notes)
        recordings.append(Recording(f"sanity_{k}", mel, notes))
    return build_segments(recordings, segment_len), [r.notes for r in recordings]
