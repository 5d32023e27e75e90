"""Event vocabulary, segment tokenization and frame-level training targets.

Vocabulary layout (604 ids)::

    0            SOS
    1            EOS
    2  .. 46     NOTE-ON  for pitches 40..84
    47 .. 91     NOTE-OFF for pitches 40..84
    92 .. 603    FRAME(t) for t in 0..511

Every NOTE-ON / NOTE-OFF is immediately followed by the FRAME token giving
the frame (within the segment) where it happens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .audio import frame_of
from .notation import MAX_PITCH, MIN_PITCH, N_PITCHES, NoteEvent

log = logging.getLogger(__name__)

SOS = 0
EOS = 1
NOTE_ON_BASE = 2
NOTE_OFF_BASE = NOTE_ON_BASE + N_PITCHES  # 47
FRAME_BASE = NOTE_OFF_BASE + N_PITCHES  # 92
MAX_FRAMES = 512
VOCAB_SIZE = FRAME_BASE + MAX_FRAMES  # 604
PAD = -1  # loss-masked, never fed to an embedding


class TokenizerError(ValueError):
    pass


class TokenOverflow(TokenizerError):
    pass


def note_on(pitch: int) -> int:
    _check_pitch(pitch)
    return NOTE_ON_BASE + pitch - MIN_PITCH


def note_off(pitch: int) -> int:
    _check_pitch(pitch)
    return NOTE_OFF_BASE + pitch - MIN_PITCH


def frame_token(frame: int) -> int:
    if not 0 <= frame < MAX_FRAMES:
        raise TokenizerError(f"frame {frame} outside [0, {MAX_FRAMES})")
    return FRAME_BASE + frame


def decode_id(token: int) -> tuple[str, int | None]:
    """Map an id to ``(kind, value)``; kinds are sos/eos/on/off/frame."""
    if token == SOS:
        return "sos", None
    if token == EOS:
        return "eos", None
    if NOTE_ON_BASE <= token < NOTE_OFF_BASE:
        return "on", token - NOTE_ON_BASE + MIN_PITCH
    if NOTE_OFF_BASE <= token < FRAME_BASE:
        return "off", token - NOTE_OFF_BASE + MIN_PITCH
    if FRAME_BASE <= token < VOCAB_SIZE:
        return "frame", token - FRAME_BASE
    raise TokenizerError(f"token {token} outside vocabulary")


def encode_id(kind: str, value: int | None = None) -> int:
    if kind == "sos":
        return SOS
    if kind == "eos":
        return EOS
    if kind == "on":
        return note_on(value)
    if kind == "off":
        return note_off(value)
    if kind == "frame":
        return frame_token(value)
    raise TokenizerError(f"unknown token kind {kind!r}")


def _check_pitch(pitch):
    if not MIN_PITCH <= pitch <= MAX_PITCH:
        raise TokenizerError(f"pitch {pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")


@dataclass(frozen=True)
class SegmentNote:
    """A note clipped to one segment, frames inclusive and segment-local.

    ``has_onset`` / ``has_offset`` say whether the note's real onset /
    offset lies inside this segment; a note crossing a boundary only emits
    the events it owns.
    """

    pitch: int
    onset: int
    offset: int
    has_onset: bool = True
    has_offset: bool = True


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    fixed_length: int

    @property
    def length(self) -> int:
        """Number of real (non-pad) tokens."""
        return sum(1 for t in self.ids if t != PAD)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


@dataclass
class FrameTargets:
    onset: np.ndarray
    offset: np.ndarray
    activation: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.activation.shape[0]

    def slice(self, start: int, stop: int) -> "FrameTargets":
        return FrameTargets(self.onset[start:stop], self.offset[start:stop], self.activation[start:stop])


def empty_targets(n_frames: int) -> FrameTargets:
    z = lambda: np.zeros((n_frames, N_PITCHES), dtype=np.float32)  # noqa: E731
    return FrameTargets(z(), z(), z())


def note_frames(note: NoteEvent) -> tuple[int, int]:
    return frame_of(note.onset_s), frame_of(note.offset_s)


def notes_to_frame_targets(notes: Iterable[NoteEvent], n_frames: int) -> FrameTargets:
    """Rasterise notes onto a ``n_frames x 45`` grid.

    Offsets past the grid are clipped to the last frame; a note whose onset
    is outside the grid is an error.
    """
    targets = empty_targets(n_frames)
    for note in notes:
        _check_pitch(note.pitch)
        on, off = note_frames(note)
        if not 0 <= on < n_frames:
            raise TokenizerError(f"note at {note.onset_s:.3f}s outside the {n_frames}-frame grid")
        off = min(off, n_frames - 1)
        p = note.pitch - MIN_PITCH
        targets.onset[on, p] = 1
        if frame_of(note.offset_s) < n_frames:
            targets.offset[off, p] = 1
        targets.activation[on : off + 1, p] = 1
    return targets


def segment_targets(notes: Sequence[SegmentNote], segment_len: int) -> FrameTargets:
    targets = empty_targets(segment_len)
    for n in notes:
        p = n.pitch - MIN_PITCH
        if n.has_onset:
            targets.onset[n.onset, p] = 1
        if n.has_offset:
            targets.offset[n.offset, p] = 1
        targets.activation[n.onset : n.offset + 1, p] = 1
    return targets


_KIND_ORDER = {"off": 0, "on": 1, "off-same-frame": 2}


def _event_key(event):
    frame, kind, pitch = event
    return frame, _KIND_ORDER[kind], pitch


def tokenize_segment(notes: Sequence[SegmentNote], segment_len: int, fixed_length: int | None = None) -> TokenSequence:
    """Encode segment notes as ``SOS (event FRAME)* EOS``, padded with PAD.

    Events are ordered by frame, NOTE-OFF before NOTE-ON, then pitch.
    """
    if not 0 < segment_len <= MAX_FRAMES:
        raise TokenizerError(f"segment length {segment_len} outside (0, {MAX_FRAMES}]")
    fixed_length = segment_len if fixed_length is None else fixed_length
    events = []
    for n in notes:
        _check_pitch(n.pitch)
        for frame in (n.onset, n.offset):
            if not 0 <= frame < segment_len:
                raise TokenizerError(f"frame {frame} outside segment of {segment_len}")
        if n.has_onset:
            events.append((n.onset, "on", n.pitch))
        if n.has_offset:
            # a one-frame note must close after its own onset
            same = n.has_onset and n.offset == n.onset
            events.append((n.offset, "off-same-frame" if same else "off", n.pitch))
    events.sort(key=_event_key)
    ids = [SOS]
    for frame, kind, pitch in events:
        ids.append(note_on(pitch) if kind == "on" else note_off(pitch))
        ids.append(frame_token(frame))
    ids.append(EOS)
    if len(ids) > fixed_length:
        raise TokenOverflow(f"token overflow: {len(ids)} tokens > fixed length {fixed_length}")
    ids.extend([PAD] * (fixed_length - len(ids)))
    return TokenSequence(tuple(ids), fixed_length)


def detokenize_segment(tokens: Iterable[int], segment_len: int) -> list[SegmentNote]:
    """Decode tokens to notes, repairing malformed streams.

    Repairs (each logged at WARNING): an orphan NOTE-OFF is ignored; a
    NOTE-ON for an already-open pitch closes the open note at the new onset
    frame; a note event not followed by a FRAME token is dropped; FRAME
    values that go backwards are clamped to the running maximum; frames past
    the segment are clamped to its last frame; notes still open at the end
    close on the last frame. Parsing stops at the first EOS or PAD.
    """
    last = segment_len - 1
    tokens = list(tokens)
    if tokens and tokens[0] == SOS:
        tokens = tokens[1:]
    open_notes: dict[int, int] = {}
    done: list[SegmentNote] = []
    running = 0
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == EOS or tok == PAD:
            break
        try:
            kind, value = decode_id(tok)
        except TokenizerError:
            log.warning("dropping out-of-vocabulary token %d", tok)
            i += 1
            continue
        if kind in ("sos", "frame"):
            log.warning("dropping stray %s token at position %d", kind, i)
            i += 1
            continue
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if nxt is None or not FRAME_BASE <= nxt < VOCAB_SIZE:
            log.warning("dropping %s event for pitch %d without a FRAME token", kind, value)
            i += 1
            continue
        frame = nxt - FRAME_BASE
        if frame < running:
            log.warning("clamping non-monotonic frame %d to %d", frame, running)
            frame = running
        if frame > last:
            log.warning("clamping frame %d to segment end %d", frame, last)
            frame = last
        running = frame
        if kind == "on":
            if value in open_notes:
                log.warning("re-onset of open pitch %d at frame %d closes the previous note", value, frame)
                done.append(SegmentNote(value, open_notes.pop(value), frame))
            open_notes[value] = frame
        else:
            if value not in open_notes:
                log.warning("ignoring NOTE-OFF for pitch %d with no open note", value)
            else:
                done.append(SegmentNote(value, open_notes.pop(value), frame))
        i += 2
    for pitch, onset in open_notes.items():
        log.warning("closing pitch %d left open at end of segment", pitch)
        done.append(SegmentNote(pitch, onset, last))
    done.sort(key=lambda n: (n.onset, n.pitch, n.offset))
    return done


@dataclass
class Segment:
    start: int
    stop: int
    notes: list[SegmentNote]

    @property
    def length(self) -> int:
        return self.stop - self.start


def notes_to_frame_notes(notes: Iterable[NoteEvent], total_frames: int) -> list[tuple[int, int, int, bool]]:
    """(pitch, onset_frame, offset_frame, offset_inside) with offsets clipped to the grid."""
    out = []
    for n in notes:
        on, off = note_frames(n)
        if on >= total_frames:
            continue
        inside = off < total_frames
        out.append((n.pitch, on, min(off, total_frames - 1), inside))
    return out


def segment_dataset(notes: Iterable[NoteEvent], total_frames: int, segment_len: int) -> list[Segment]:
    """Split a recording's notes into consecutive non-overlapping segments.

    A note crossing a boundary keeps its NOTE-ON in the segment holding its
    onset, its NOTE-OFF in the segment holding its offset, and its
    activation in every segment it covers.
    """
    if not 0 < segment_len <= MAX_FRAMES:
        raise TokenizerError(f"segment length {segment_len} outside (0, {MAX_FRAMES}]")
    n_segments = max(1, math.ceil(total_frames / segment_len))
    segments = [Segment(k * segment_len, min((k + 1) * segment_len, total_frames), []) for k in range(n_segments)]
    for pitch, on, off, off_inside in notes_to_frame_notes(notes, total_frames):
        for k in range(on // segment_len, off // segment_len + 1):
            seg = segments[k]
            lo, hi = max(on, seg.start), min(off, seg.stop - 1)
            seg.notes.append(
                SegmentNote(
                    pitch,
                    lo - seg.start,
                    hi - seg.start,
                    has_onset=on >= seg.start,
                    has_offset=off_inside and off <= seg.stop - 1,
                )
            )
    for seg in segments:
        seg.notes.sort(key=lambda n: (n.onset, n.pitch, n.offset))
    return segments


def format_token_dump(sequences: Iterable[TokenSequence]) -> str:
    return "".join(" ".join(str(t) for t in seq.ids if t != PAD) + "\n" for seq in sequences)


def parse_token_dump(text: str) -> list[list[int]]:
    return [[int(t) for t in line.split()] for line in text.splitlines() if line.strip()]
