import json

import pytest

from plectra.cli import main
from plectra.notation import load_notes

TINY_MODEL = {
    "d_model": 16,
    "d_hidden": 16,
    "heads": 2,
    "encoder_layers": 1,
    "decoder_layers": 1,
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = root / "corpus.json"
    cfg.write_text(json.dumps({"n_tabs": 3, "notes_per_tab": 6, "presets": ["di", "twin"]}))
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--stems", "--out", str(root / "data")]) == 0
    return root


def test_synth_layout(corpus):
    manifest = json.loads((corpus / "data" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 6
    assert {e["split"] for e in manifest["entries"]} == {"train", "valid", "test"}


def test_features_and_annotate(corpus, tmp_path):
    data = corpus / "data"
    assert main(["features", "--audio", str(data / "audio" / "tab_0000__di.wav"), "--out", str(tmp_path / "f.plml")]) == 0
    assert (tmp_path / "f.plml").read_bytes()[:4] == b"PLML"
    out = tmp_path / "notes.json"
    args = ["annotate", "--tab", str(data / "tabs" / "tab_0000.json"), "--audio", str(data / "stems" / "tab_0000.wav")]
    assert main(args + ["--out", str(out)]) == 0
    truth = load_notes(data / "labels" / "tab_0000.json")
    got = load_notes(out)
    assert [n.pitch for n in got] == [n.pitch for n in truth]


def test_train_transcribe_evaluate(corpus, tmp_path, monkeypatch):
    data = corpus / "data"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"train": {"max_steps": 4, "eval_interval": 2}, "model": TINY_MODEL}))
    ckpt = tmp_path / "m.plck"
    log = tmp_path / "log.jsonl"
    argv = ["train", "--manifest", str(data / "manifest.json"), "--config", str(cfg), "--seed", "1"]
    assert main(argv + ["--segment-len", "32", "--metrics", str(log), "--out", str(ckpt)]) == 0
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in records] == [2, 4]
    assert set(records[0]) == {"step", "L_frame", "L_onset", "L_offset", "L_AM", "L_LM", "L_total", "val_onset_f1"}

    wav = data / "audio" / "tab_0001__twin.wav"
    for route in ("encoder", "decoder"):
        out = tmp_path / f"{route}.json"
        argv = ["transcribe", "--checkpoint", str(ckpt), "--audio", str(wav), "--route", route]
        assert main(argv + ["--segment-len", "32", "--out", str(out), "--midi", str(tmp_path / "x.mid")]) == 0
        first = out.read_bytes()
        assert main(argv + ["--segment-len", "32", "--out", str(out)]) == 0
        assert out.read_bytes() == first

    ref = data / "labels" / "tab_0001.json"
    report = tmp_path / "report.json"
    assert main(["evaluate", "--ref", str(ref), "--est", str(ref), "--out", str(report)]) == 0
    assert json.loads(report.read_text())["onset"]["f1"] == 1.0

    # split-level transcription and scoring, with the data root moved by the environment
    monkeypatch.setenv("PLECTRA_DATA_DIR", str(data))
    moved = tmp_path / "elsewhere.json"
    moved.write_text((data / "manifest.json").read_text())
    est_dir = tmp_path / "est"
    assert main(["transcribe", "--checkpoint", str(ckpt), "--manifest", str(moved), "--out", str(est_dir)]) == 0
    assert main(["evaluate", "--manifest", str(moved), "--estimates", str(est_dir), "--out", str(report)]) == 0
    assert "micro" in json.loads(report.read_text())


def test_export_midi(tmp_path, corpus):
    out = tmp_path / "x.mid"
    assert main(["export-midi", "--notes", str(corpus / "data" / "labels" / "tab_0000.json"), "--out", str(out)]) == 0
    assert out.read_bytes()[:4] == b"MThd"


def test_plot(tmp_path, corpus):
    pytest.importorskip("matplotlib")
    ref = corpus / "data" / "labels" / "tab_0000.json"
    wav = corpus / "data" / "audio" / "tab_0000__di.wav"
    out = tmp_path / "fig.png"
    assert main(["evaluate", "--ref", str(ref), "--est", str(ref), "--audio", str(wav), "--plot", str(out)]) == 0
    assert out.read_bytes()[:4] == b"\x89PNG"


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert main(["train", "--out", str(tmp_path / "m.plck")]) == 1
    assert main(["evaluate", "--ref", str(tmp_path / "nope.json"), "--est", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["export-midi", "--notes", str(bad), "--out", str(tmp_path / "x.mid")]) == 2
    assert main(["transcribe", "--checkpoint", str(bad), "--audio", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
