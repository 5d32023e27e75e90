import json

import numpy as np
import pytest
from oracles import brute_force_matching_size

from plectra.audio import frame_time
from plectra.metrics import (
    MetricsError,
    aggregate,
    format_table,
    frame_f1,
    onset_f1,
    onset_matches,
    score,
    score_corpus,
)
from plectra.notation import NoteEvent, save_notes


def N(p, on, off=None):
    return NoteEvent(p, on, off if off is not None else on + 0.5)


def test_onset_examples():
    assert onset_f1([N(40, 0.0, 0.5)], [N(40, 0.03, 0.4)]).f1 == 1.0
    assert onset_f1([N(40, 0.0, 0.5)], [N(40, 0.06, 0.5)]).f1 == 0.0
    r = onset_f1([N(40, 0.0), N(40, 0.04)], [N(40, 0.02)])
    assert (r.precision, r.recall) == (1.0, 0.5)
    assert r.f1 == pytest.approx(2 / 3, abs=1e-12)


def test_pitch_must_match():
    assert onset_f1([N(40, 0.0)], [N(41, 0.0)]).f1 == 0.0


def test_boundary_is_closed():
    assert onset_f1([N(40, 0.1)], [N(40, 0.15)]).f1 == 1.0
    assert onset_f1([N(40, 0.15)], [N(40, 0.1)]).f1 == 1.0
    assert onset_f1([N(40, 0.0)], [N(40, 0.0500001)]).f1 == 0.0


def test_empty_conventions():
    assert onset_f1([], []).f1 == 1.0
    assert onset_f1([N(40, 0.0)], []).f1 == 0.0
    assert onset_f1([], [N(40, 0.0)]).f1 == 0.0


def test_negative_tolerance():
    with pytest.raises(MetricsError):
        onset_f1([], [], -0.01)


def random_notes(rng, n):
    return [N(int(rng.integers(40, 43)), float(np.round(rng.uniform(0, 0.4), 3))) for _ in range(n)]


def test_matching_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        ref = random_notes(rng, int(rng.integers(0, 9)))
        est = random_notes(rng, int(rng.integers(0, 9)))
        pairs = onset_matches(ref, est)
        assert len(pairs) == brute_force_matching_size(ref, est, 0.05)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)


def test_greedy_would_fail():
    # the earliest-first greedy choice takes the shared estimate and loses one match
    ref = [N(40, 0.00), N(40, 0.06)]
    est = [N(40, 0.04), N(40, 0.10)]
    assert len(onset_matches(ref, est)) == 2


def test_symmetric_perfection_and_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ref = random_notes(rng, int(rng.integers(1, 8)))
        est = random_notes(rng, int(rng.integers(1, 8)))
        assert onset_f1(ref, ref).f1 == 1.0
        base = onset_f1(ref, est)
        assert onset_f1(ref, est + [N(84, 5.0)]).precision <= base.precision
        assert onset_f1(ref + [N(84, 5.0)], est).recall <= base.recall


def test_frame_examples():
    ref = [NoteEvent(50, frame_time(0), frame_time(9))]
    assert frame_f1(ref, ref, 1.0).f1 == 1.0
    half = frame_f1(ref, [NoteEvent(50, frame_time(0), frame_time(4))], 1.0)
    assert (half.precision, half.recall) == (1.0, 0.5)
    assert half.f1 == pytest.approx(2 / 3)
    assert frame_f1(ref, [NoteEvent(51, frame_time(0), frame_time(9))], 1.0).f1 == 0.0


def test_score_counts():
    rep = score([N(40, 0.0)], [N(40, 0.01), N(45, 0.5)])
    assert rep.counts["matched"] == 1 and rep.counts["est_notes"] == 2
    assert set(rep.to_json()) == {"onset", "frame", "counts"}
    assert "onset" in format_table(rep) and "0.667" in format_table(rep)


def test_aggregate_micro_and_macro():
    a = score([N(40, 0.0)], [N(40, 0.0)])
    b = score([N(40, 0.0)], [])
    micro, macro = aggregate([a, b])
    assert micro.onset.recall == 0.5
    assert macro["onset"]["f1"] == 0.5
    with pytest.raises(MetricsError, match="empty split"):
        aggregate([])


def _corpus(tmp_path, est_b):
    entries = []
    for name, est in (("a", [N(40, 0.0)]), ("b", est_b)):
        save_notes(tmp_path / f"{name}_ref.json", [N(40, 0.0)])
        if est is not None:
            (tmp_path / "est").mkdir(exist_ok=True)
            save_notes(tmp_path / "est" / f"{name}.json", est)
        entries.append({"audio_path": f"audio/{name}.wav", "labels_path": f"{name}_ref.json"})
    return entries


def test_score_corpus(tmp_path):
    entries = _corpus(tmp_path, [])
    out = score_corpus(entries, tmp_path, tmp_path / "est")
    assert out["micro"]["onset"]["recall"] == 0.5
    assert set(out["files"]) == {"a", "b"}
    json.dumps(out)


def test_score_corpus_errors(tmp_path):
    entries = _corpus(tmp_path, None)
    with pytest.raises(MetricsError, match="b.json"):
        score_corpus(entries, tmp_path, tmp_path / "est")
    with pytest.raises(MetricsError, match="empty split"):
        score_corpus([], tmp_path, tmp_path / "est")
