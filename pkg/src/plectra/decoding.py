"""From model outputs to notes, by encoder-head thresholding or token decoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .audio import LOG_FLOOR, frame_time
from .model import EncoderOutputs, TranscriptionTransformer, greedy_decode
from .notation import MIN_PITCH, NoteEvent, sort_notes
from .tokenizer import SegmentNote, detokenize_segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodingConfig:
    onset_threshold: float = 0.5
    activation_threshold: float = 0.5
    min_note_frames: int = 2
    max_decode_tokens: Optional[int] = None  # defaults to the segment length

    def __post_init__(self):
        for name in ("onset_threshold", "activation_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.min_note_frames < 1:
            raise ValueError("min_note_frames must be >= 1")


def frame_notes_from_probs(onset: np.ndarray, activation: np.ndarray, config: DecodingConfig) -> list[SegmentNote]:
    """Threshold onset/activation probability rolls (T x 45) into frame notes.

    A note starts at a frame whose onset probability clears the threshold
    and peaks against its neighbours (the last frame of a plateau wins); it
    lasts while activation stays above threshold and is cut short by a new
    onset of the same pitch.
    """
    onset = np.asarray(onset, dtype=np.float64)
    activation = np.asarray(activation, dtype=np.float64)
    n_frames, n_pitches = onset.shape
    prev = np.vstack([np.full((1, n_pitches), -np.inf), onset[:-1]])
    nxt = np.vstack([onset[1:], np.full((1, n_pitches), -np.inf)])
    starts = (onset >= config.onset_threshold) & (onset >= prev) & (onset > nxt)
    active = activation >= config.activation_threshold

    notes = []

    def close(pitch, start, end):
        if end - start + 1 >= config.min_note_frames:
            notes.append(SegmentNote(pitch + MIN_PITCH, start, end))

    for p in range(n_pitches):
        start = None
        for t in range(n_frames):
            if starts[t, p]:
                if start is not None:
                    close(p, start, t - 1)
                start = t if active[t, p] else None
            elif start is not None and not active[t, p]:
                close(p, start, t - 1)
                start = None
        if start is not None:
            close(p, start, n_frames - 1)
    notes.sort(key=lambda n: (n.onset, n.pitch))
    return notes


def frame_notes_to_events(notes: Sequence[SegmentNote], frame_offset: int = 0) -> list[NoteEvent]:
    """Frame notes to timed notes; zero-length notes are dropped."""
    out = []
    for n in notes:
        if n.offset <= n.onset:
            continue
        out.append(NoteEvent(n.pitch, frame_time(n.onset + frame_offset), frame_time(n.offset + frame_offset)))
    return sort_notes(out)


def encoder_probs(enc: EncoderOutputs) -> tuple[np.ndarray, np.ndarray]:
    """Onset and sustain probabilities (..., T, 45) from the encoder heads.

    Sustain is read from the frame head: it is the stack trained against the
    activation targets, while the raw activation stack only feeds it.
    """
    onset = torch.sigmoid(enc.onset_logits.detach()).cpu().numpy()
    sustain = torch.sigmoid(enc.frame_logits.detach()).cpu().numpy()
    return onset, sustain


def decode_encoder(enc: EncoderOutputs, config: DecodingConfig = DecodingConfig(), frame_offset: int = 0) -> list[NoteEvent]:
    onset, sustain = encoder_probs(enc)
    if onset.ndim == 3:
        if onset.shape[0] != 1:
            raise ValueError("decode_encoder takes a single segment")
        onset, sustain = onset[0], sustain[0]
    return frame_notes_to_events(frame_notes_from_probs(onset, sustain, config), frame_offset)


def decode_tokens(ids, segment_len: int, frame_offset: int = 0) -> list[NoteEvent]:
    return frame_notes_to_events(detokenize_segment(ids, segment_len), frame_offset)


def decode_decoder(
    model: TranscriptionTransformer,
    mel: torch.Tensor,
    config: DecodingConfig = DecodingConfig(),
    frame_offset: int = 0,
) -> list[NoteEvent]:
    """Greedy token decoding of one mel segment (L x n_mels)."""
    segment_len = mel.shape[-2]
    max_tokens = config.max_decode_tokens or segment_len
    ids = greedy_decode(model, mel, max_tokens)[0].tolist()
    if ids[-1] != 1 and len(ids) >= max_tokens:
        log.warning("decoding hit %d tokens without EOS", max_tokens)
    return decode_tokens(ids, segment_len, frame_offset)


def stitch_segments(per_segment: Sequence[Sequence[SegmentNote]], segment_len: int) -> list[SegmentNote]:
    """Join per-segment frame notes into recording-level frame notes.

    A note reaching the last frame of segment k merges with a same-pitch
    note starting on frame 0 of segment k+1.
    """
    done: list[SegmentNote] = []
    carry: dict[int, int] = {}  # pitch -> global onset of a note touching the boundary
    for k, notes in enumerate(per_segment):
        base = k * segment_len
        next_carry: dict[int, int] = {}
        for n in sorted(notes, key=lambda n: (n.onset, n.pitch)):
            onset = base + n.onset
            if n.onset == 0 and n.pitch in carry:
                onset = carry.pop(n.pitch)
            if n.offset == segment_len - 1:
                next_carry[n.pitch] = onset
            else:
                done.append(SegmentNote(n.pitch, onset, base + n.offset))
        for pitch, onset in carry.items():
            done.append(SegmentNote(pitch, onset, base - 1))
        carry = next_carry
    end = len(per_segment) * segment_len - 1
    for pitch, onset in carry.items():
        done.append(SegmentNote(pitch, onset, end))
    done.sort(key=lambda n: (n.onset, n.pitch, n.offset))
    return done


def _clip(notes: Sequence[SegmentNote], n_frames: int) -> list[SegmentNote]:
    return [
        SegmentNote(n.pitch, n.onset, min(n.offset, n_frames - 1)) for n in notes if n.onset < n_frames
    ]


def split_mel(mel: np.ndarray, segment_len: int) -> np.ndarray:
    """Pad with the log floor (digital silence) and stack into segments."""
    n_frames = mel.shape[0]
    n_seg = max(1, math.ceil(n_frames / segment_len))
    padded = np.full((n_seg * segment_len, mel.shape[1]), math.log(LOG_FLOOR), dtype=np.float32)
    padded[:n_frames] = mel
    return padded.reshape(n_seg, segment_len, mel.shape[1])


@torch.no_grad()
def transcribe(
    model: TranscriptionTransformer,
    mel: np.ndarray,
    route: str = "encoder",
    segment_len: int = 64,
    config: DecodingConfig = DecodingConfig(),
    batch_size: int = 64,
) -> list[NoteEvent]:
    """Transcribe a whole recording's log-mel matrix (T x n_mels)."""
    n_frames = mel.shape[0]
    segments = split_mel(mel, segment_len)
    dtype = next(model.parameters()).dtype
    if route == "encoder":
        onset, activation = [], []
        for i in range(0, len(segments), batch_size):
            enc = model.encode(torch.from_numpy(segments[i : i + batch_size]).to(dtype))
            on, sus = encoder_probs(enc)
            onset.append(on.reshape(-1, on.shape[-1]))
            activation.append(sus.reshape(-1, sus.shape[-1]))
        onset = np.concatenate(onset)[:n_frames]
        activation = np.concatenate(activation)[:n_frames]
        return frame_notes_to_events(frame_notes_from_probs(onset, activation, config))
    if route == "decoder":
        max_tokens = config.max_decode_tokens or segment_len
        per_segment = []
        for i in range(0, len(segments), batch_size):
            ids = greedy_decode(model, torch.from_numpy(segments[i : i + batch_size]).to(dtype), max_tokens)
            per_segment.extend(detokenize_segment(row, segment_len) for row in ids.tolist())
        notes = _clip(stitch_segments(per_segment, segment_len), n_frames)
        return frame_notes_to_events(notes)
    raise ValueError(f"unknown route {route!r}; use 'encoder' or 'decoder'")
