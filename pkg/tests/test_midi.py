import mido
import pytest

from plectra.midi import export_midi, seconds_to_ticks, var_len
from plectra.notation import NoteEvent


def test_ticks():
    assert seconds_to_ticks(0.5) == 480
    assert seconds_to_ticks(1.0) == 960


def test_var_len():
    assert var_len(0) == b"\x00"
    assert var_len(127) == b"\x7f"
    assert var_len(128) == b"\x81\x00"
    assert var_len(0x0FFFFFFF) == b"\xff\xff\xff\x7f"
    with pytest.raises(ValueError):
        var_len(-1)


def test_parses_with_reference_reader(tmp_path):
    notes = [NoteEvent(40, 0.5, 1.0), NoteEvent(45, 0.5, 0.75), NoteEvent(40, 1.0, 1.5)]
    export_midi(notes, tmp_path / "x.mid")
    mid = mido.MidiFile(tmp_path / "x.mid")
    assert mid.type == 0 and mid.ticks_per_beat == 480
    now, events = 0, []
    for msg in mid.tracks[0]:
        now += msg.time
        if msg.type == "set_tempo":
            assert msg.tempo == 500000
        if msg.type in ("note_on", "note_off"):
            kind = "on" if msg.type == "note_on" and msg.velocity > 0 else "off"
            events.append((now, kind, msg.note))
    assert events == [
        (480, "on", 40),
        (480, "on", 45),
        (720, "off", 45),
        (960, "off", 40),
        (960, "on", 40),
        (1440, "off", 40),
    ]
    assert mid.length == pytest.approx(1.5)
