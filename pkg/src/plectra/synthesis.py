"""Synthetic guitar audio: Karplus-Strong plucks, amp-like presets, corpora.

The presets only approximate "clean to high-gain" colouring with a shelf,
a tanh waveshaper and a low-pass; the names are mnemonics, not models of
the real amplifiers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .audio import SAMPLE_RATE, AudioClip, write_wav
from .notation import (
    MAX_PITCH,
    MIN_PITCH,
    NoteEvent,
    TabDocument,
    TabEvent,
    save_notes,
    save_tab,
    tab_to_expected_notes,
)

log = logging.getLogger(__name__)

OPEN_STRINGS = {1: 64, 2: 59, 3: 55, 4: 50, 5: 45, 6: 40}
MAX_FRET = {1: 20, 2: 19, 3: 19, 4: 19, 5: 19, 6: 19}

NORMALIZE_PEAK = 0.9
SHELF_HZ = 2000.0
STRING_T60 = 4.0  # seconds for the loop loss alone
ENVELOPE_TAU = 1.5
RELEASE_S = 0.003
TAIL_S = 0.3


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class AmpPreset:
    name: str
    drive_gain: float
    tone_cutoff_hz: Optional[float]
    pre_emphasis_db: float

    @property
    def is_identity(self) -> bool:
        return self.name == "di"


PRESETS = {
    p.name: p
    for p in (
        AmpPreset("di", 1.0, None, 0.0),
        AmpPreset("jc120", 5.0, 8000.0, 2.0),
        AmpPreset("twin", 8.0, 7000.0, 3.0),
        AmpPreset("mark-v", 12.0, 6000.0, 4.0),
        AmpPreset("jcm2000", 20.0, 5500.0, 5.0),
        AmpPreset("plexi", 30.0, 5000.0, 6.0),
    )
}


def get_preset(name: str) -> AmpPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise SynthesisError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def midi_to_hz(pitch) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


@dataclass(frozen=True)
class RenderedClip:
    clip: AudioClip
    preset_name: str
    source_tab_id: Optional[str] = None


def _string_loop(period: float, rho: float):
    """Transfer function of the plucked-string feedback loop.

    The loop is an integer delay, a two-point average (half a sample of
    delay) and a first-order all-pass tuned so the phase delay at the
    fundamental makes the total exactly ``period`` samples.
    """
    n_delay = int(math.floor(period - 0.6))
    frac = period - 0.5 - n_delay  # in [0.1, 1.1)
    w = 2.0 * math.pi / period
    c = math.sin((1.0 - frac) * w / 2.0) / math.sin((1.0 + frac) * w / 2.0)
    b = np.array([1.0, c])
    a = np.zeros(n_delay + 3)
    a[0] = 1.0
    a[1] += c
    a[n_delay] -= 0.5 * rho * c
    a[n_delay + 1] -= 0.5 * rho * (c + 1.0)
    a[n_delay + 2] -= 0.5 * rho
    return b, a


def synth_pluck(pitch: int, duration_s: float, amplitude: float = 0.8, rng=None) -> AudioClip:
    if not MIN_PITCH <= pitch <= MAX_PITCH:
        raise SynthesisError(f"pitch {pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
    if not duration_s > 0:
        raise SynthesisError("duration must be positive")
    if not 0 < amplitude <= 1:
        raise SynthesisError("amplitude must be in (0, 1]")
    rng = np.random.default_rng(rng)
    n = max(1, int(round(duration_s * SAMPLE_RATE)))
    f0 = midi_to_hz(pitch)
    period = SAMPLE_RATE / f0
    rho = 10.0 ** (-3.0 / (STRING_T60 * f0))

    burst_len = int(round(period))
    burst = rng.uniform(-1.0, 1.0, burst_len)
    burst -= burst.mean()
    burst /= np.abs(burst).max()
    excitation = np.zeros(n)
    excitation[: min(n, burst_len)] = burst[:n]

    b, a = _string_loop(period, rho)
    y = lfilter(b, a, excitation)
    t = np.arange(n) / SAMPLE_RATE
    y *= np.exp(-t / ENVELOPE_TAU)
    release = int(RELEASE_S * SAMPLE_RATE)
    if n > 2 * release:
        y[-release:] *= np.linspace(1.0, 0.0, release)
    peak = np.abs(y).max()
    if peak > 0:
        y *= amplitude / peak
    return AudioClip(y.astype(np.float32))


# --- amp chain -------------------------------------------------------------


def _high_shelf(gain_db: float, freq: float):
    # biquad high shelf, shelf slope 1
    amp = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * freq / SAMPLE_RATE
    cosw, sinw = math.cos(w0), math.sin(w0)
    alpha = sinw / 2.0 * math.sqrt(2.0)
    sq = 2.0 * math.sqrt(amp) * alpha
    b = [
        amp * ((amp + 1) + (amp - 1) * cosw + sq),
        -2 * amp * ((amp - 1) + (amp + 1) * cosw),
        amp * ((amp + 1) + (amp - 1) * cosw - sq),
    ]
    a = [
        (amp + 1) - (amp - 1) * cosw + sq,
        2 * ((amp - 1) - (amp + 1) * cosw),
        (amp + 1) - (amp - 1) * cosw - sq,
    ]
    return np.array(b) / a[0], np.array(a) / a[0]


def _normalize(x: np.ndarray, peak: float = NORMALIZE_PEAK) -> np.ndarray:
    m = np.abs(x).max()
    return x * (peak / m) if m > 0 else x


def apply_preset(x: np.ndarray, preset: AmpPreset) -> np.ndarray:
    x = _normalize(np.asarray(x, dtype=np.float64))
    if not preset.is_identity:
        if preset.pre_emphasis_db:
            b, a = _high_shelf(preset.pre_emphasis_db, SHELF_HZ)
            x = lfilter(b, a, x)
        g = preset.drive_gain
        x = np.tanh(g * x) / math.tanh(g)
        if preset.tone_cutoff_hz:
            sos = butter(4, preset.tone_cutoff_hz, btype="low", fs=SAMPLE_RATE, output="sos")
            x = sosfilt(sos, x)
    return _normalize(x).astype(np.float32)


# --- tab rendering ---------------------------------------------------------


def check_string_collisions(tab: TabDocument) -> None:
    by_string: dict[int, list[TabEvent]] = {}
    for e in tab.events:
        by_string.setdefault(e.string, []).append(e)
    for string, events in by_string.items():
        events.sort(key=lambda e: e.beat)
        for prev, cur in zip(events, events[1:]):
            if cur.beat < prev.beat + prev.duration_beats:
                raise SynthesisError(f"string collision on string {string} at beat {float(cur.beat)}")


def render_strings(tab: TabDocument, rng=None) -> np.ndarray:
    """Per-string DI stems, shape (6, N); row ``s - 1`` is string ``s``."""
    check_string_collisions(tab)
    rng = np.random.default_rng(rng)
    expected = tab_to_expected_notes(tab)
    end = max((e.expected_onset_s + e.expected_duration_s for e in expected), default=0.0)
    n = int(math.ceil((end + TAIL_S) * SAMPLE_RATE))
    stems = np.zeros((6, n))
    for note in expected:
        amp = float(rng.uniform(0.5, 0.9))
        clip = synth_pluck(note.pitch, note.expected_duration_s, amp, rng=rng.integers(2**63))
        start = int(round(note.expected_onset_s * SAMPLE_RATE))
        seg = clip.samples[: n - start]
        stems[note.string - 1, start : start + seg.size] += seg
    return stems


def expected_note_events(tab: TabDocument) -> list[NoteEvent]:
    return sorted(
        (
            NoteEvent(e.pitch, e.expected_onset_s, e.expected_onset_s + e.expected_duration_s, e.string)
            for e in tab_to_expected_notes(tab)
        ),
        key=lambda n: (n.onset_s, n.pitch),
    )


def render_tab(tab: TabDocument, preset: AmpPreset, rng=None, tab_id=None, stems=None):
    """Render a tab through a preset; returns (RenderedClip, groundtruth notes)."""
    if stems is None:
        stems = render_strings(tab, rng)
    mix = stems.sum(axis=0)
    if not np.any(mix):
        mix = mix.copy()
    out = apply_preset(mix, preset)
    return RenderedClip(AudioClip(out), preset.name, tab_id), expected_note_events(tab)


# --- random tabs and corpora -----------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    n_tabs: int = 10
    notes_per_tab: int = 40
    bpm_range: tuple = (80, 140)
    polyphony_max: int = 3
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "bpm_range" in d:
            d["bpm_range"] = tuple(d["bpm_range"])
        return cls(**d)


# faster tempi and four-note chords bring the note density to about 17 notes
# (62 tokens) per 256-frame segment
DENSE_CORPUS = CorpusSpec(bpm_range=(120, 180), polyphony_max=4)


def random_tab(rng: np.random.Generator, n_notes: int, bpm_range=(80, 140), polyphony_max: int = 3) -> TabDocument:
    """Random per-string-monophonic tab on an eighth-note grid."""
    bpm = int(rng.integers(bpm_range[0], bpm_range[1] + 1))
    free_at = {s: Fraction(0) for s in OPEN_STRINGS}
    pitch_free_at: dict[int, Fraction] = {}
    chord_weights = np.array([0.55, 0.25, 0.12, 0.05, 0.02, 0.01])[:polyphony_max]
    chord_weights /= chord_weights.sum()
    durations = [Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(2)]

    beat = Fraction(1)  # one beat of lead-in
    events: list[TabEvent] = []
    while len(events) < n_notes:
        strings = [s for s in OPEN_STRINGS if free_at[s] <= beat]
        size = min(int(rng.choice(len(chord_weights), p=chord_weights)) + 1, len(strings), n_notes - len(events))
        if size > 0:
            chosen = sorted(int(s) for s in rng.choice(strings, size=size, replace=False))
            taken = set()
            for s in chosen:
                options = [
                    OPEN_STRINGS[s] + f
                    for f in range(MAX_FRET[s] + 1)
                    if OPEN_STRINGS[s] + f not in taken and pitch_free_at.get(OPEN_STRINGS[s] + f, 0) <= beat
                ]
                if not options:
                    continue
                pitch = int(rng.choice(options))
                dur = durations[int(rng.integers(len(durations)))]
                taken.add(pitch)
                free_at[s] = beat + dur
                pitch_free_at[pitch] = beat + dur
                events.append(TabEvent(beat, dur, pitch, s))
        beat += Fraction(int(rng.integers(1, 3)), 2)
    return TabDocument(float(bpm), tuple(events))


def split_counts(n_tabs: int) -> tuple[int, int, int]:
    """Train/valid/test sizes for an 8:1:1 split by tab."""
    if n_tabs < 3:
        return n_tabs, 0, 0
    n_valid = max(1, int(round(n_tabs / 10)))
    n_test = max(1, int(round(n_tabs / 10)))
    return n_tabs - n_valid - n_test, n_valid, n_test


def assign_splits(n_tabs: int, rng: np.random.Generator) -> list[str]:
    n_train, n_valid, _ = split_counts(n_tabs)
    order = rng.permutation(n_tabs)
    splits = [""] * n_tabs
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
    return splits


def tab_id_for(index: int) -> str:
    return f"tab_{index:04d}"


def generate_corpus(spec: CorpusSpec, presets: Sequence[AmpPreset], out_dir, write_stems: bool = False) -> dict:
    """Render ``spec.n_tabs`` random tabs through every preset.

    Writes ``tabs/``, ``labels/``, ``audio/`` (and ``stems/`` when asked)
    under ``out_dir`` plus ``manifest.json``; returns the manifest.
    """
    out = Path(out_dir)
    for sub in ("tabs", "labels", "audio") + (("stems",) if write_stems else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    split_seq, *tab_seqs = root.spawn(spec.n_tabs + 1)
    splits = assign_splits(spec.n_tabs, np.random.default_rng(split_seq))

    entries = []
    for i, seq in enumerate(tab_seqs):
        tab_id = tab_id_for(i)
        rng = np.random.default_rng(seq)
        tab = random_tab(rng, spec.notes_per_tab, spec.bpm_range, spec.polyphony_max)
        stems = render_strings(tab, rng)
        save_tab(out / "tabs" / f"{tab_id}.json", tab)
        labels_path = Path("labels") / f"{tab_id}.json"
        save_notes(out / labels_path, expected_note_events(tab))
        if write_stems:
            write_wav(out / "stems" / f"{tab_id}.wav", stems.astype(np.float32))
        for preset in presets:
            rendered, _ = render_tab(tab, preset, tab_id=tab_id, stems=stems)
            audio_path = Path("audio") / f"{tab_id}__{preset.name}.wav"
            write_wav(out / audio_path, rendered.clip.samples)
            entries.append(
                {
                    "tab_id": tab_id,
                    "preset": preset.name,
                    "audio_path": audio_path.as_posix(),
                    "labels_path": labels_path.as_posix(),
                    "split": splits[i],
                }
            )
        log.debug("rendered %s (%d notes)", tab_id, len(tab.events))
    manifest = {"version": 1, "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
