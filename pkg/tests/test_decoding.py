import logging

import numpy as np
import pytest
import torch
from strategies import random_segment_notes

import plectra.decoding as decoding
from plectra.audio import frame_time
from plectra.decoding import (
    DecodingConfig,
    decode_decoder,
    decode_encoder,
    decode_tokens,
    frame_notes_from_probs,
    split_mel,
    stitch_segments,
    transcribe,
)
from plectra.model import DESK_CONFIG, EncoderOutputs, TranscriptionTransformer
from plectra.notation import NoteEvent
from plectra.tokenizer import SegmentNote, notes_to_frame_notes, segment_dataset, segment_targets

CFG = DecodingConfig()


def test_encoder_rule_example():
    onset = np.zeros((20, 45))
    onset[5, 0] = 0.9
    act = np.zeros((20, 45))
    act[5:13, 0] = 0.6
    assert frame_notes_from_probs(onset, act, CFG) == [SegmentNote(40, 5, 12)]


def test_encoder_min_length():
    onset = np.zeros((20, 45))
    onset[5, 0] = 0.9
    act = np.zeros((20, 45))
    act[5, 0] = 0.9
    assert frame_notes_from_probs(onset, act, CFG) == []


def test_onset_must_be_local_peak():
    onset = np.zeros((20, 45))
    onset[4:7, 0] = [0.6, 0.9, 0.7]
    act = np.zeros((20, 45))
    act[4:12, 0] = 1
    assert frame_notes_from_probs(onset, act, CFG) == [SegmentNote(40, 5, 11)]


def test_reonset_splits_note():
    onset = np.zeros((20, 45))
    onset[[2, 8], 0] = 1
    act = np.zeros((20, 45))
    act[2:15, 0] = 1
    assert frame_notes_from_probs(onset, act, CFG) == [SegmentNote(40, 2, 7), SegmentNote(40, 8, 14)]


def test_groundtruth_reproduction():
    rng = np.random.default_rng(0)
    for _ in range(200):
        notes = random_segment_notes(rng, 64, 15, touching=False)
        t = segment_targets(notes, 64)
        got = frame_notes_from_probs(t.onset, t.activation, CFG)
        assert got == [n for n in notes if n.offset - n.onset + 1 >= CFG.min_note_frames]


def _enc(onset, sustain):
    z = torch.zeros(1, *onset.shape)
    logit = lambda p: torch.logit(torch.from_numpy(np.clip(p, 1e-6, 1 - 1e-6)))[None]  # noqa: E731
    return EncoderOutputs(logit(onset), z, z, logit(sustain), torch.zeros(1, onset.shape[0], 8))


def test_decode_encoder_times():
    onset = np.zeros((20, 45))
    onset[5, 3] = 0.9
    sus = np.zeros((20, 45))
    sus[5:13, 3] = 0.8
    (n,) = decode_encoder(_enc(onset, sus), CFG, frame_offset=64)
    assert n.pitch == 43
    assert n.onset_s == pytest.approx(69 * 512 / 44100)
    assert n.offset_s == pytest.approx(76 * 512 / 44100)


def test_decode_tokens_example():
    (n,) = decode_tokens([0, 2, 92, 47, 102, 1], 64)
    assert (n.pitch, n.onset_s) == (40, 0.0)
    assert n.offset_s == pytest.approx(0.1161, abs=1e-4)
    assert decode_tokens([0, 1], 64) == []


def test_decode_decoder_uses_greedy_output(monkeypatch, caplog):
    model = TranscriptionTransformer(DESK_CONFIG)
    mel = torch.zeros(64, 229)
    monkeypatch.setattr(decoding, "greedy_decode", lambda m, x, k: torch.tensor([[0, 2, 92, 47, 102, 1]]))
    (n,) = decode_decoder(model, mel)
    assert n.offset_s == pytest.approx(10 * 512 / 44100)
    monkeypatch.setattr(decoding, "greedy_decode", lambda m, x, k: torch.tensor([[0] + [2, 92] + [3, 93] * 30 + [4]]))
    with caplog.at_level(logging.WARNING):
        notes = decode_decoder(model, mel)
    assert {n.pitch for n in notes} == {40, 41}
    assert any("without EOS" in r.message for r in caplog.records)


def test_decoder_fuzz_never_breaks_invariants(caplog):
    caplog.set_level(logging.ERROR, logger="plectra.tokenizer")
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        length = int(rng.integers(0, 64))
        tokens = rng.integers(-1, 604, length).tolist()
        if rng.random() < 0.5:
            tokens = [0] + tokens
        for n in decode_tokens(tokens, 64, frame_offset=int(rng.integers(0, 10))):
            assert 40 <= n.pitch <= 84 and n.offset_s > n.onset_s


def test_stitch_examples():
    merged = stitch_segments([[SegmentNote(50, 200, 255)], [SegmentNote(50, 0, 9)]], 256)
    assert merged == [SegmentNote(50, 200, 265)]
    apart = stitch_segments([[SegmentNote(50, 200, 255)], [SegmentNote(51, 0, 9)]], 256)
    assert apart == [SegmentNote(50, 200, 255), SegmentNote(51, 256, 265)]
    full = stitch_segments([[SegmentNote(60, 0, 63)]] * 3, 64)
    assert full == [SegmentNote(60, 0, 191)]


def test_stitch_inverts_segmentation():
    rng = np.random.default_rng(2)
    for _ in range(200):
        total = int(rng.integers(1, 400))
        raw = [n for n in random_segment_notes(rng, total, 20, touching=False) if n.offset > n.onset]
        notes = [NoteEvent(n.pitch, frame_time(n.onset) + 1e-4, frame_time(n.offset) + 1e-4) for n in raw]
        # a same-pitch pair that abuts exactly across a boundary is indistinguishable from one note
        if any(
            a.pitch == b.pitch and a.offset + 1 == b.onset and b.onset % 64 == 0 for a in raw for b in raw
        ):
            continue
        segs = segment_dataset(notes, total, 64)
        got = stitch_segments([s.notes for s in segs], 64)
        want = sorted(
            (SegmentNote(p, on, off) for p, on, off, _ in notes_to_frame_notes(notes, total)),
            key=lambda n: (n.onset, n.pitch, n.offset),
        )
        assert [(n.pitch, n.onset, n.offset) for n in got] == [(n.pitch, n.onset, n.offset) for n in want]


def test_split_mel_pads_with_floor():
    mel = np.zeros((70, 229), dtype=np.float32)
    segs = split_mel(mel, 64)
    assert segs.shape == (2, 64, 229)
    assert np.all(segs[1, 6:] == np.float32(np.log(1e-5)))


def test_transcribe_routes_run():
    torch.manual_seed(0)
    model = TranscriptionTransformer(DESK_CONFIG).eval()
    mel = np.random.default_rng(0).normal(size=(150, 229)).astype(np.float32)
    for route in ("encoder", "decoder"):
        for n in transcribe(model, mel, route, 64):
            assert n.offset_s > n.onset_s
    with pytest.raises(ValueError):
        transcribe(model, mel, "both", 64)
