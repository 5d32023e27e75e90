"""Note events, the tab format, and onset-based annotation of recordings.

The annotation pipeline turns a tab plus a performance into note labels:
tab beats are converted to expected onsets using the tab's tempo, onsets are
detected in the audio, each detected onset takes the pitch of its nearest
expected onset, and offsets are the detected onset plus the expected
duration.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import HOP, SAMPLE_RATE, AudioClip, stft_magnitude

log = logging.getLogger(__name__)

MIN_PITCH = 40  # E2
MAX_PITCH = 84  # C6
N_PITCHES = MAX_PITCH - MIN_PITCH + 1

MATCH_MAX_GAP = 0.120
ONSET_PEAK_HALF_WIDTH = 3
ONSET_MEAN_HALF_WIDTH = 10
ONSET_DELTA_RATIO = 0.05
ONSET_MERGE_S = 0.050


class NotationError(ValueError):
    pass


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset_s: float
    offset_s: float
    string: Optional[int] = None

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise NotationError(f"pitch {self.pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
        if not (math.isfinite(self.onset_s) and math.isfinite(self.offset_s)):
            raise NotationError("note times must be finite")
        if self.onset_s < 0:
            raise NotationError(f"negative onset {self.onset_s}")
        if not self.offset_s > self.onset_s:
            raise NotationError(f"offset {self.offset_s} not after onset {self.onset_s}")
        if self.string is not None and not 1 <= self.string <= 6:
            raise NotationError(f"string {self.string} outside [1, 6]")

    def to_json(self) -> dict:
        return {"pitch": self.pitch, "onset_s": self.onset_s, "offset_s": self.offset_s, "string": self.string}

    @classmethod
    def from_json(cls, d: dict) -> "NoteEvent":
        return cls(
            pitch=int(d["pitch"]),
            onset_s=float(d["onset_s"]),
            offset_s=float(d["offset_s"]),
            string=None if d.get("string") is None else int(d["string"]),
        )


def sort_notes(notes):
    return sorted(notes, key=lambda n: (n.onset_s, n.pitch))


def save_notes(path, notes) -> None:
    payload = [n.to_json() for n in sort_notes(notes)]
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_notes(path) -> list[NoteEvent]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NotationError(f"{path}: invalid JSON ({exc})") from exc
    return sort_notes(NoteEvent.from_json(d) for d in payload)


@dataclass(frozen=True)
class TabEvent:
    beat: Fraction
    duration_beats: Fraction
    pitch: int
    string: int

    def __post_init__(self):
        object.__setattr__(self, "beat", Fraction(self.beat).limit_denominator(1 << 16))
        object.__setattr__(self, "duration_beats", Fraction(self.duration_beats).limit_denominator(1 << 16))
        if self.beat < 0:
            raise NotationError("beat must be non-negative")
        if self.duration_beats <= 0:
            raise NotationError("duration_beats must be positive")
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise NotationError(f"pitch {self.pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
        if not 1 <= self.string <= 6:
            raise NotationError(f"string {self.string} outside [1, 6]")


@dataclass(frozen=True)
class TabDocument:
    bpm: float
    events: tuple[TabEvent, ...] = ()

    def __post_init__(self):
        if not self.bpm > 0:
            raise NotationError(f"bpm must be positive, got {self.bpm}")
        events = tuple(self.events)
        if any(b.beat < a.beat for a, b in zip(events, events[1:])):
            raise NotationError("tab events must be sorted by beat")
        object.__setattr__(self, "events", events)

    def to_json(self) -> dict:
        return {
            "bpm": self.bpm,
            "events": [
                {"beat": float(e.beat), "duration_beats": float(e.duration_beats), "pitch": e.pitch, "string": e.string}
                for e in self.events
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TabDocument":
        events = [
            TabEvent(Fraction(str(e["beat"])), Fraction(str(e["duration_beats"])), int(e["pitch"]), int(e["string"]))
            for e in d["events"]
        ]
        return cls(float(d["bpm"]), tuple(events))


def save_tab(path, tab: TabDocument) -> None:
    Path(path).write_text(json.dumps(tab.to_json(), indent=1) + "\n")


def load_tab(path) -> TabDocument:
    return TabDocument.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ExpectedNote:
    pitch: int
    expected_onset_s: float
    expected_duration_s: float
    string: Optional[int] = None


def tab_to_expected_notes(tab: TabDocument) -> list[ExpectedNote]:
    if not tab.bpm > 0:
        raise NotationError("bpm must be positive")
    spb = 60.0 / tab.bpm
    return [
        ExpectedNote(e.pitch, float(e.beat) * spb, float(e.duration_beats) * spb, e.string)
        for e in tab.events
    ]


# --- onset detection -------------------------------------------------------


def spectral_flux(samples: np.ndarray) -> np.ndarray:
    mag = stft_magnitude(samples)
    flux = np.zeros(mag.shape[0])
    flux[1:] = np.maximum(0.0, np.diff(mag, axis=0)).sum(axis=1)
    return flux


def detect_onsets(clip: AudioClip) -> list[float]:
    """Spectral-flux onset times in seconds (frame centres)."""
    flux = spectral_flux(clip.samples)
    n = flux.size
    delta = ONSET_DELTA_RATIO * flux.max()
    peaks = []
    for t in range(n):
        lo, hi = max(0, t - ONSET_PEAK_HALF_WIDTH), min(n, t + ONSET_PEAK_HALF_WIDTH + 1)
        if flux[t] < flux[lo:hi].max():
            continue
        lo, hi = max(0, t - ONSET_MEAN_HALF_WIDTH), min(n, t + ONSET_MEAN_HALF_WIDTH + 1)
        if flux[t] > flux[lo:hi].mean() + delta:
            peaks.append(t)

    merge_frames = ONSET_MERGE_S * SAMPLE_RATE / HOP
    kept: list[int] = []
    for t in peaks:
        if kept and t - kept[-1] < merge_frames:
            if flux[t] > flux[kept[-1]]:
                kept[-1] = t
            continue
        kept.append(t)
    return [t * HOP / SAMPLE_RATE for t in kept]


# --- matching --------------------------------------------------------------


@dataclass
class AnnotationResult:
    notes: list[NoteEvent] = field(default_factory=list)
    unmatched_expected: list[ExpectedNote] = field(default_factory=list)
    spurious_detected: list[float] = field(default_factory=list)
    # index into the expected list for each note, parallel to ``notes``
    sources: list[int] = field(default_factory=list)


def match_annotations(expected, detected, max_gap: float = MATCH_MAX_GAP) -> AnnotationResult:
    """Greedy one-to-one matching by ascending onset distance.

    Each matched pair becomes a note with the expected pitch, the detected
    onset, and an offset of detected onset plus expected duration.
    """
    pairs = []
    for i, exp in enumerate(expected):
        for j, det in enumerate(detected):
            gap = abs(det - exp.expected_onset_s)
            if gap <= max_gap:
                pairs.append((gap, i, j))
    pairs.sort()
    used_exp, used_det = set(), set()
    matched = []
    for gap, i, j in pairs:
        if i in used_exp or j in used_det:
            continue
        used_exp.add(i)
        used_det.add(j)
        matched.append((i, j))

    result = AnnotationResult()
    matched.sort(key=lambda ij: (detected[ij[1]], expected[ij[0]].pitch))
    for i, j in matched:
        exp, onset = expected[i], float(detected[j])
        result.notes.append(NoteEvent(exp.pitch, onset, onset + exp.expected_duration_s, exp.string))
        result.sources.append(i)
    result.unmatched_expected = [e for i, e in enumerate(expected) if i not in used_exp]
    result.spurious_detected = [float(d) for j, d in enumerate(detected) if j not in used_det]
    return result


def annotate(tab: TabDocument, channels) -> AnnotationResult:
    """Annotate a performance of ``tab``.

    ``channels`` is either a single mono clip or six per-string clips
    (index 0 is string 1). With per-string input each string is detected and
    matched on its own, which keeps chords from competing for one onset.
    """
    expected = tab_to_expected_notes(tab)
    if isinstance(channels, AudioClip):
        return match_annotations(expected, detect_onsets(channels))
    channels = list(channels)
    if len(channels) != 6:
        raise NotationError(f"expected 6 string channels, got {len(channels)}")
    combined = AnnotationResult()
    for string, clip in enumerate(channels, start=1):
        idx = [i for i, e in enumerate(expected) if e.string == string]
        part = match_annotations([expected[i] for i in idx], detect_onsets(clip))
        combined.notes.extend(part.notes)
        combined.sources.extend(idx[k] for k in part.sources)
        combined.unmatched_expected.extend(part.unmatched_expected)
        combined.spurious_detected.extend(part.spurious_detected)
    order = sorted(range(len(combined.notes)), key=lambda k: (combined.notes[k].onset_s, combined.notes[k].pitch))
    combined.notes = [combined.notes[k] for k in order]
    combined.sources = [combined.sources[k] for k in order]
    combined.spurious_detected.sort()
    if combined.unmatched_expected or combined.spurious_detected:
        log.info(
            "annotation left %d expected and %d detected onsets unmatched",
            len(combined.unmatched_expected),
            len(combined.spurious_detected),
        )
    return combined
