import json
from fractions import Fraction

import numpy as np
import pytest

from plectra.audio import AudioClip
from plectra.notation import (
    ExpectedNote,
    NotationError,
    NoteEvent,
    TabDocument,
    TabEvent,
    annotate,
    detect_onsets,
    load_notes,
    load_tab,
    match_annotations,
    save_notes,
    save_tab,
    tab_to_expected_notes,
)
from plectra.synthesis import synth_pluck

SR = 44100


def tab(bpm, *events):
    return TabDocument(bpm, tuple(TabEvent(*e) for e in events))


def test_expected_notes_from_beats():
    (n,) = tab_to_expected_notes(tab(120, (4, 1, 40, 6)))
    assert n.expected_onset_s == 2.0 and n.expected_duration_s == 0.5
    (n,) = tab_to_expected_notes(tab(100, (Fraction(7, 2), 1, 45, 5)))
    assert n.expected_onset_s == pytest.approx(2.1, abs=1e-12)
    assert tab_to_expected_notes(TabDocument(90.0)) == []


def test_order_preserved():
    notes = tab_to_expected_notes(tab(60, (0, 1, 50, 4), (0, 1, 45, 5), (1, 1, 40, 6)))
    assert [n.pitch for n in notes] == [50, 45, 40]


@pytest.mark.parametrize("bpm", [0, -10])
def test_nonpositive_bpm(bpm):
    with pytest.raises(NotationError):
        TabDocument(bpm)


def test_note_event_invariants():
    with pytest.raises(NotationError):
        NoteEvent(39, 0.0, 1.0)
    with pytest.raises(NotationError):
        NoteEvent(85, 0.0, 1.0)
    with pytest.raises(NotationError):
        NoteEvent(40, 1.0, 1.0)
    with pytest.raises(NotationError):
        NoteEvent(40, 0.0, 1.0, string=7)


def test_detect_silence():
    assert detect_onsets(AudioClip(np.zeros(SR))) == []


def test_detect_impulse_train():
    x = np.zeros(int(2.5 * SR), dtype=np.float32)
    times = [0.25, 0.75, 1.25, 1.75]
    for t in times:
        x[int(t * SR)] = 1.0
    found = detect_onsets(AudioClip(x))
    assert len(found) == 4
    for f, t in zip(found, times):
        assert abs(f - t) <= 0.0233


def test_detect_two_plucks():
    x = np.zeros(2 * SR, dtype=np.float32)
    x[: SR // 2] += synth_pluck(45, 0.5, 0.8, rng=1).samples
    x[SR : SR + SR // 2] += synth_pluck(52, 0.5, 0.8, rng=2).samples
    found = detect_onsets(AudioClip(x))
    assert len(found) == 2
    assert found[0] < 0.03 and abs(found[1] - 1.0) < 0.03


def expected(*rows):
    return [ExpectedNote(p, t, d) for t, p, d in rows]


def test_match_nearest():
    exp = expected((0.0, 40, 0.5), (0.5, 45, 0.5))
    res = match_annotations(exp, [0.012, 0.490])
    assert [(n.pitch, n.onset_s, n.offset_s) for n in res.notes] == [
        (40, 0.012, pytest.approx(0.512)),
        (45, 0.490, pytest.approx(0.990)),
    ]
    assert res.unmatched_expected == [] and res.spurious_detected == []


def test_match_no_detections():
    res = match_annotations(expected((0.0, 40, 0.5), (0.5, 45, 0.5)), [])
    assert res.notes == [] and len(res.unmatched_expected) == 2


def test_match_spurious_leftover():
    res = match_annotations(expected((0.0, 40, 0.5), (0.5, 45, 0.5)), [0.012, 0.25, 0.490])
    assert len(res.notes) == 2 and res.spurious_detected == [0.25]


def test_match_gap_cap():
    res = match_annotations(expected((0.0, 40, 0.5)), [0.121])
    assert res.notes == [] and res.spurious_detected == [0.121]


def test_match_is_injective_and_keeps_duration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        exp = sorted(
            (ExpectedNote(int(rng.integers(40, 85)), float(t), float(d)) for t, d in rng.uniform(0.05, 3, (8, 2))),
            key=lambda e: e.expected_onset_s,
        )
        det = sorted(rng.uniform(0, 3, int(rng.integers(0, 10))).tolist())
        res = match_annotations(exp, det)
        assert len(set(res.sources)) == len(res.sources)
        assert len({n.onset_s for n in res.notes}) == len(res.notes)
        assert len(res.notes) + len(res.unmatched_expected) == len(exp)
        assert len(res.notes) + len(res.spurious_detected) == len(det)
        for note, src in zip(res.notes, res.sources):
            assert note.offset_s - note.onset_s == pytest.approx(exp[src].expected_duration_s, abs=1e-12)


def test_annotate_per_string():
    t = tab(120, (1, 1, 45, 5), (1, 1, 52, 4), (2, 1, 47, 5))
    from plectra.synthesis import render_strings

    stems = render_strings(t, rng=0)
    res = annotate(t, [AudioClip(s) for s in stems])
    assert sorted(n.pitch for n in res.notes) == [45, 47, 52]
    for n in res.notes:
        truth = 0.5 if n.pitch != 47 else 1.0
        assert abs(n.onset_s - truth) < 0.023


def test_json_roundtrips(tmp_path):
    t = tab(96, (0, Fraction(1, 2), 40, 6), (Fraction(3, 2), 2, 84, 1))
    save_tab(tmp_path / "t.json", t)
    assert load_tab(tmp_path / "t.json") == t
    notes = [NoteEvent(45, 0.5, 1.0, 5), NoteEvent(40, 0.5, 0.7), NoteEvent(41, 0.1, 0.2)]
    save_notes(tmp_path / "n.json", notes)
    raw = json.loads((tmp_path / "n.json").read_text())
    assert [d["pitch"] for d in raw] == [41, 40, 45]
    assert set(raw[0]) == {"pitch", "onset_s", "offset_s", "string"}
    assert load_notes(tmp_path / "n.json") == sorted(notes, key=lambda n: (n.onset_s, n.pitch))
