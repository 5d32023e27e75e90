"""Minimal standard MIDI file writer (format 0)."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

from .notation import NoteEvent

TICKS_PER_QUARTER = 480
TEMPO_BPM = 120
VELOCITY = 80
CHANNEL = 0


def var_len(value: int) -> bytes:
    """MIDI variable-length quantity."""
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def seconds_to_ticks(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_QUARTER * TEMPO_BPM / 60.0))


def midi_bytes(notes: Iterable[NoteEvent]) -> bytes:
    events = []
    for n in notes:
        on, off = seconds_to_ticks(n.onset_s), seconds_to_ticks(n.offset_s)
        off = max(off, on + 1)
        # note-offs sort before note-ons on the same tick
        events.append((on, 1, n.pitch, bytes([0x90 | CHANNEL, n.pitch, VELOCITY])))
        events.append((off, 0, n.pitch, bytes([0x80 | CHANNEL, n.pitch, 0])))
    events.sort(key=lambda e: e[:3])

    tempo = 60_000_000 // TEMPO_BPM
    track = bytearray(b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big"))
    track += b"\x00\xff\x58\x04\x04\x02\x18\x08"  # 4/4
    now = 0
    for tick, _, _, data in events:
        track += var_len(tick - now) + data
        now = tick
    track += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def export_midi(notes: Iterable[NoteEvent], path) -> None:
    Path(path).write_bytes(midi_bytes(notes))
