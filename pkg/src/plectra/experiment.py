"""Seen/unseen-timbre experiment grid: train on preset subsets, test on held-out presets."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .checkpoint import Checkpoint
from .decoding import DecodingConfig, transcribe
from .metrics import aggregate, score
from .model import DESK_CONFIG, ModelConfig
from .notation import save_notes
from .synthesis import PRESETS, CorpusSpec, generate_corpus
from .training import TrainConfig, load_manifest, load_recordings, select_entries, train_on_entries

log = logging.getLogger(__name__)


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    name: str
    lambda_am: float = 1.0
    lambda_lm: float = 1.0
    batch_size: int = 8
    segment_len: int = 64
    route: str = "encoder"


@dataclass
class ExperimentSpec:
    train_sets: dict[str, list[str]]
    test_presets: list[str]
    variants: list[Variant]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    corpus: CorpusSpec = CorpusSpec()
    model: ModelConfig = DESK_CONFIG
    max_steps: int = 1500
    eval_interval: int = 250
    patience: int = 4
    learning_rate: float = 1e-4

    def __post_init__(self):
        if not self.variants:
            raise ExperimentError("experiment needs at least one variant")
        if not self.train_sets or not self.test_presets or not self.seeds:
            raise ExperimentError("experiment needs train sets, test presets and seeds")
        names = [*self.test_presets, *(p for ps in self.train_sets.values() for p in ps)]
        unknown = sorted(set(names) - set(PRESETS))
        if unknown:
            raise ExperimentError(f"unknown presets {unknown}; choose from {sorted(PRESETS)}")

    @property
    def presets(self) -> list[str]:
        used = {*self.test_presets, *(p for ps in self.train_sets.values() for p in ps)}
        return [p for p in PRESETS if p in used]

    def train_config(self, variant: Variant, seed: int) -> TrainConfig:
        return TrainConfig(
            batch_size=variant.batch_size,
            segment_len=variant.segment_len,
            learning_rate=self.learning_rate,
            max_steps=self.max_steps,
            seed=seed,
            lambda_am=variant.lambda_am,
            lambda_lm=variant.lambda_lm,
            eval_interval=self.eval_interval,
            patience=self.patience,
            eval_route=variant.route,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"]["bpm_range"] = list(self.corpus.bpm_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["variants"] = [Variant(**v) for v in d.get("variants", [])]
        if "corpus" in d:
            d["corpus"] = CorpusSpec.from_dict(d["corpus"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def timbre_grid_spec(**overrides) -> ExperimentSpec:
    """Toy version of the DI-vs-multi-amp comparison.

    The multi-amp train set keeps the clean DI signal alongside three amps;
    jc120 and plexi are never seen in training.
    """
    spec = ExperimentSpec(
        train_sets={"DI": ["di"], "3Amps": ["di", "mark-v", "twin", "jcm2000"]},
        test_presets=["jc120", "plexi"],
        variants=[
            Variant("multi-loss", 1.0, 1.0, route="encoder"),
            Variant("CE-only", 0.0, 1.0, route="decoder"),
        ],
    )
    return replace(spec, **overrides)


@dataclass
class CellResult:
    variant: str
    train_set: str
    test_preset: str
    seed: int
    report: dict

    @property
    def onset_f1(self) -> float:
        return self.report["onset"]["f1"]


def ensure_corpus(spec: ExperimentSpec, out_dir: Path, manifest_path=None) -> tuple[dict, Path]:
    if manifest_path is not None:
        return load_manifest(manifest_path), Path(manifest_path).parent
    corpus_dir = out_dir / "corpus"
    if (corpus_dir / "manifest.json").exists():
        manifest = load_manifest(corpus_dir / "manifest.json")
        if {e["preset"] for e in manifest["entries"]} >= set(spec.presets):
            return manifest, corpus_dir
    log.info("rendering a %d-tab corpus under %s", spec.corpus.n_tabs, corpus_dir)
    return generate_corpus(spec.corpus, [PRESETS[p] for p in spec.presets], corpus_dir), corpus_dir


def run_cell(spec, variant, train_set, seed, manifest, root, cell_dir: Path) -> tuple[Checkpoint, list[CellResult]]:
    presets = spec.train_sets[train_set]
    cell_dir.mkdir(parents=True, exist_ok=True)
    ckpt, _ = train_on_entries(
        select_entries(manifest, "train", presets),
        select_entries(manifest, "valid", presets),
        root,
        spec.train_config(variant, seed),
        spec.model,
        metrics_path=cell_dir / "metrics.jsonl",
    )
    ckpt.save(cell_dir / "model.plck")
    model = ckpt.build_model()
    results = []
    for preset in spec.test_presets:
        reports = []
        for rec in load_recordings(select_entries(manifest, "test", [preset]), root):
            est = transcribe(model, rec.mel, variant.route, variant.segment_len, DecodingConfig())
            save_notes(cell_dir / f"{rec.name}.json", est)
            reports.append(score(rec.notes, est))
        micro, _ = aggregate(reports)
        results.append(CellResult(variant.name, train_set, preset, seed, micro.to_json()))
    return ckpt, results


def run_experiment(spec: ExperimentSpec, out_dir, manifest_path=None) -> dict:
    """Train and test every (variant, train set, seed) cell; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, root = ensure_corpus(spec, out_dir, manifest_path)
    results: list[CellResult] = []
    for variant in spec.variants:
        for train_set in spec.train_sets:
            for seed in spec.seeds:
                cell_dir = out_dir / "cells" / f"{variant.name}__{train_set}__seed{seed}"
                log.info("cell %s", cell_dir.name)
                _, cell = run_cell(spec, variant, train_set, seed, manifest, root, cell_dir)
                results.extend(cell)
    summary = summarize(spec, results)
    (out_dir / "results.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out_dir / "table.txt").write_text(format_comparison(summary) + "\n")
    return summary


def summarize(spec: ExperimentSpec, results: list[CellResult]) -> dict:
    rows = []
    for variant in spec.variants:
        for train_set in spec.train_sets:
            row = {"variant": variant.name, "train_set": train_set, "median_onset_f1": {}, "median_frame_f1": {}}
            for preset in spec.test_presets:
                cell = [r for r in results if (r.variant, r.train_set, r.test_preset) == (variant.name, train_set, preset)]
                row["median_onset_f1"][preset] = statistics.median(r.onset_f1 for r in cell)
                row["median_frame_f1"][preset] = statistics.median(r.report["frame"]["f1"] for r in cell)
            rows.append(row)
    return {
        "spec": spec.to_dict(),
        "cells": [asdict(r) for r in results],
        "rows": rows,
        "trend": trend_check(spec, rows),
    }


def trend_check(spec: ExperimentSpec, rows: list[dict]) -> Optional[dict]:
    """Does the richer train set beat DI-only on every held-out preset?

    Compares the first and last train sets (by convention DI-only and the
    multi-amp set) per variant on median onset F1.
    """
    names = list(spec.train_sets)
    if len(names) < 2:
        return None
    base, rich = names[0], names[-1]
    by_key = {(r["variant"], r["train_set"]): r for r in rows}
    checks = {}
    for variant in spec.variants:
        a, b = by_key[(variant.name, base)], by_key[(variant.name, rich)]
        checks[variant.name] = {
            p: b["median_onset_f1"][p] > a["median_onset_f1"][p] for p in spec.test_presets
        }
    holds = all(all(v.values()) for v in checks.values())
    # all-zero medians mean no cell transcribed the held-out presets at all
    no_signal = all(v == 0 for r in rows for v in r["median_onset_f1"].values())
    return {"baseline": base, "richer": rich, "per_variant": checks, "holds": holds, "no_signal": no_signal}


def format_comparison(summary: dict) -> str:
    presets = list(summary["rows"][0]["median_onset_f1"]) if summary["rows"] else []
    head = f"{'variant':<12}{'train set':<10}" + "".join(f"{p:>10}" for p in presets)
    lines = []
    for key, title in (("median_onset_f1", "onset"), ("median_frame_f1", "frame")):
        lines += [f"median {title} F1 over seeds on held-out presets", head]
        for row in summary["rows"]:
            cells = "".join(f"{row[key][p]:10.3f}" for p in presets)
            lines.append(f"{row['variant']:<12}{row['train_set']:<10}{cells}")
    trend = summary.get("trend")
    if trend is not None:
        verdict = "holds" if trend["holds"] else "NOT reproduced"
        if trend.get("no_signal"):
            verdict += " (every median onset F1 is 0, so the comparison carries no signal)"
        lines.append(f"{trend['richer']} > {trend['baseline']} on every held-out preset: {verdict}")
    return "\n".join(lines)
