import json

import numpy as np
import pytest
from oracles import autocorr_f0, harmonic_energy

from plectra.notation import TabDocument, TabEvent
from plectra.synthesis import (
    PRESETS,
    CorpusSpec,
    SynthesisError,
    apply_preset,
    generate_corpus,
    midi_to_hz,
    random_tab,
    render_tab,
    split_counts,
    synth_pluck,
)

SR = 44100


@pytest.mark.parametrize("pitch", range(40, 85))
def test_pitch_accuracy(pitch):
    x = synth_pluck(pitch, 0.5, rng=pitch).samples
    f0 = autocorr_f0(x[: int(0.15 * SR)], SR)
    assert abs(f0 / midi_to_hz(pitch) - 1) <= 0.005


def test_reference_frequencies():
    assert midi_to_hz(69) == pytest.approx(440.0)
    assert midi_to_hz(40) == pytest.approx(82.4069, abs=1e-3)


def test_pluck_length_and_peak():
    x = synth_pluck(64, 0.25, amplitude=0.8, rng=0).samples
    assert x.size == 11025
    assert np.abs(x).max() == pytest.approx(0.8, rel=1e-6)


@pytest.mark.parametrize("pitch", [39, 85])
def test_pitch_out_of_range(pitch):
    with pytest.raises(SynthesisError):
        synth_pluck(pitch, 0.5)


def test_di_is_identity_up_to_gain():
    x = synth_pluck(52, 0.3, rng=1).samples.astype(np.float64)
    y = apply_preset(x, PRESETS["di"]).astype(np.float64)
    scale = np.dot(x, y) / np.dot(x, x)
    assert np.max(np.abs(y - scale * x)) <= 1e-6


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_bounded(name):
    x = synth_pluck(45, 0.3, rng=2).samples
    y = apply_preset(x, PRESETS[name])
    assert np.all(np.isfinite(y)) and np.abs(y).max() <= 1.0


def test_plexi_adds_odd_harmonics():
    x = np.sin(2 * np.pi * 220 * np.arange(SR // 2) / SR)
    third = {name: harmonic_energy(apply_preset(x, PRESETS[name]), 220.0, 3) for name in ("di", "plexi")}
    assert third["plexi"] > third["di"]


def test_render_is_deterministic():
    tab = random_tab(np.random.default_rng(3), 10)
    a, _ = render_tab(tab, PRESETS["twin"], rng=7)
    b, _ = render_tab(tab, PRESETS["twin"], rng=7)
    assert np.array_equal(a.clip.samples, b.clip.samples)


def test_string_collision():
    tab = TabDocument(120, (TabEvent(0, 2, 45, 5), TabEvent(1, 1, 47, 5)))
    with pytest.raises(SynthesisError, match="string collision"):
        render_tab(tab, PRESETS["di"], rng=0)


def test_random_tab_respects_monophony():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tab = random_tab(rng, 40, polyphony_max=3)
        assert len(tab.events) == 40
        for s in range(1, 7):
            ev = sorted((e for e in tab.events if e.string == s), key=lambda e: e.beat)
            for a, b in zip(ev, ev[1:]):
                assert b.beat >= a.beat + a.duration_beats


def test_split_counts():
    assert split_counts(10) == (8, 1, 1)
    assert split_counts(3) == (1, 1, 1)


def test_corpus_layout(tmp_path):
    spec = CorpusSpec(n_tabs=10, notes_per_tab=8, seed=1)
    manifest = generate_corpus(spec, list(PRESETS.values()), tmp_path)
    assert len(list((tmp_path / "audio").glob("*.wav"))) == 60
    assert len(list((tmp_path / "labels").glob("*.json"))) == 10
    per_tab = {}
    for e in manifest["entries"]:
        per_tab.setdefault(e["tab_id"], set()).add(e["split"])
    assert all(len(s) == 1 for s in per_tab.values())
    splits = [s.pop() for s in per_tab.values()]
    assert (splits.count("train"), splits.count("valid"), splits.count("test")) == (8, 1, 1)
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest


def test_corpus_deterministic(tmp_path):
    spec = CorpusSpec(n_tabs=3, notes_per_tab=5, seed=4)
    generate_corpus(spec, [PRESETS["di"]], tmp_path / "a")
    generate_corpus(spec, [PRESETS["di"]], tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
