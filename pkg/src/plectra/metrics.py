"""Onset-level and frame-level transcription scores.

Onset matching is a maximum-cardinality bipartite matching between
reference and estimated notes of equal pitch whose onsets are within the
tolerance (closed interval). Offsets are never scored.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import HOP, SAMPLE_RATE, frame_of
from .notation import MIN_PITCH, N_PITCHES, NoteEvent, load_notes

ONSET_TOLERANCE = 0.05
# onset differences are rounded before comparison so that a gap of exactly
# the tolerance survives floating-point subtraction
_DECIMALS = 9


class MetricsError(ValueError):
    pass


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass
class ScoreReport:
    onset: PRF
    frame: PRF
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"onset": asdict(self.onset), "frame": asdict(self.frame), "counts": dict(self.counts)}


def prf(hits: int, n_est: int, n_ref: int) -> PRF:
    """Precision/recall/F1 with the empty-list conventions.

    Both empty scores a perfect 1; exactly one empty scores 0.
    """
    if n_est == 0 and n_ref == 0:
        return PRF(1.0, 1.0, 1.0)
    precision = hits / n_est if n_est else 0.0
    recall = hits / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PRF(precision, recall, f1)


def maximum_matching(adjacency: Sequence[Sequence[int]], n_right: int) -> list[tuple[int, int]]:
    """Maximum bipartite matching by repeated augmenting paths (Kuhn)."""
    match_right = [-1] * n_right

    def augment(u, seen):
        for v in adjacency[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    for u in range(len(adjacency)):
        augment(u, [False] * n_right)
    return sorted((u, v) for v, u in enumerate(match_right) if u != -1)


def onset_matches(ref: Sequence[NoteEvent], est: Sequence[NoteEvent], tolerance_s: float = ONSET_TOLERANCE):
    """Matched (ref index, est index) pairs of a maximum onset matching."""
    if tolerance_s < 0:
        raise MetricsError("tolerance must be non-negative")
    by_pitch: dict[int, list[tuple[float, int]]] = {}
    for j, e in enumerate(est):
        by_pitch.setdefault(e.pitch, []).append((e.onset_s, j))
    for cands in by_pitch.values():
        cands.sort()
    adjacency = []
    for r in ref:
        cands = by_pitch.get(r.pitch, [])
        lo = bisect.bisect_left(cands, (r.onset_s - tolerance_s - 1e-6, -1))
        edges = []
        for onset, j in cands[lo:]:
            if onset > r.onset_s + tolerance_s + 1e-6:
                break
            if round(abs(onset - r.onset_s), _DECIMALS) <= tolerance_s:
                edges.append(j)
        adjacency.append(edges)
    return maximum_matching(adjacency, len(est))


def onset_f1(ref: Sequence[NoteEvent], est: Sequence[NoteEvent], tolerance_s: float = ONSET_TOLERANCE) -> PRF:
    return prf(len(onset_matches(ref, est, tolerance_s)), len(est), len(ref))


def piano_roll(notes: Sequence[NoteEvent], n_frames: int) -> np.ndarray:
    roll = np.zeros((n_frames, N_PITCHES), dtype=bool)
    for n in notes:
        on, off = frame_of(n.onset_s), frame_of(n.offset_s)
        if on >= n_frames:
            continue
        roll[on : min(off, n_frames - 1) + 1, n.pitch - MIN_PITCH] = True
    return roll


def frame_grid_length(duration_s: float) -> int:
    return max(1, math.ceil(duration_s * SAMPLE_RATE / HOP - 1e-9))


def frame_counts(ref, est, duration_s=None) -> tuple[int, int, int]:
    """(tp, fp, fn) over the frame x pitch grid.

    With no duration the grid ends on the last frame any note reaches.
    """
    if duration_s is None:
        n_frames = max([frame_of(n.offset_s) + 1 for n in (*ref, *est)], default=1)
    else:
        n_frames = frame_grid_length(duration_s)
    r, e = piano_roll(ref, n_frames), piano_roll(est, n_frames)
    return int((r & e).sum()), int((~r & e).sum()), int((r & ~e).sum())


def frame_f1(ref: Sequence[NoteEvent], est: Sequence[NoteEvent], duration_s=None) -> PRF:
    tp, fp, fn = frame_counts(ref, est, duration_s)
    return prf(tp, tp + fp, tp + fn)


def score(ref, est, tolerance_s: float = ONSET_TOLERANCE, duration_s=None) -> ScoreReport:
    matched = len(onset_matches(ref, est, tolerance_s))
    tp, fp, fn = frame_counts(ref, est, duration_s)
    counts = {
        "ref_notes": len(ref),
        "est_notes": len(est),
        "matched": matched,
        "tp_frames": tp,
        "fp_frames": fp,
        "fn_frames": fn,
    }
    return report_from_counts(counts)


def report_from_counts(counts: dict) -> ScoreReport:
    onset = prf(counts["matched"], counts["est_notes"], counts["ref_notes"])
    tp = counts["tp_frames"]
    frame = prf(tp, tp + counts["fp_frames"], tp + counts["fn_frames"])
    return ScoreReport(onset, frame, dict(counts))


def aggregate(reports: Sequence[ScoreReport]) -> tuple[ScoreReport, dict]:
    """Micro-averaged report (counts summed first) and macro-averaged rates."""
    if not reports:
        raise MetricsError("empty split")
    keys = ("ref_notes", "est_notes", "matched", "tp_frames", "fp_frames", "fn_frames")
    micro = report_from_counts({k: sum(r.counts[k] for r in reports) for k in keys})
    macro = {
        level: {
            stat: float(np.mean([getattr(getattr(r, level), stat) for r in reports]))
            for stat in ("precision", "recall", "f1")
        }
        for level in ("onset", "frame")
    }
    return micro, macro


def estimate_path(estimates_dir, entry: dict) -> Path:
    return Path(estimates_dir) / (Path(entry["audio_path"]).stem + ".json")


def score_corpus(entries: Sequence[dict], root, estimates_dir, tolerance_s: float = ONSET_TOLERANCE) -> dict:
    """Score every manifest entry against ``<estimates_dir>/<audio stem>.json``."""
    if not entries:
        raise MetricsError("empty split")
    per_file = {}
    for entry in entries:
        est_path = estimate_path(estimates_dir, entry)
        if not est_path.exists():
            raise MetricsError(f"missing estimate file {est_path}")
        ref = load_notes(Path(root) / entry["labels_path"])
        per_file[Path(entry["audio_path"]).stem] = score(ref, load_notes(est_path), tolerance_s)
    micro, macro = aggregate(list(per_file.values()))
    return {
        "micro": micro.to_json(),
        "macro": macro,
        "files": {name: rep.to_json() for name, rep in sorted(per_file.items())},
    }


def format_table(report: ScoreReport, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'':8}{'P':>8}{'R':>8}{'F1':>8}")
    for level in ("onset", "frame"):
        s = getattr(report, level)
        lines.append(f"{level:8}{s.precision:8.3f}{s.recall:8.3f}{s.f1:8.3f}")
    return "\n".join(lines)


def save_report(path, payload) -> None:
    if isinstance(payload, ScoreReport):
        payload = payload.to_json()
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
