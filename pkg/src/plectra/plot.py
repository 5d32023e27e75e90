"""Spectrogram / reference / estimate panels for eyeballing a transcription."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .audio import HOP_SECONDS, frame_of
from .metrics import piano_roll
from .notation import MIN_PITCH, NoteEvent


def plot_transcription(path, ref: Sequence[NoteEvent], est: Sequence[NoteEvent], mel: Optional[np.ndarray] = None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_frames = max([frame_of(n.offset_s) + 1 for n in (*ref, *est)], default=1)
    if mel is not None:
        n_frames = max(n_frames, mel.shape[0])
    panels = [("reference", piano_roll(ref, n_frames)), ("estimate", piano_roll(est, n_frames))]
    rows = len(panels) + (mel is not None)
    fig, axes = plt.subplots(rows, 1, figsize=(10, 2.4 * rows), sharex=True, squeeze=False)
    axes = axes[:, 0]
    extent_t = n_frames * HOP_SECONDS
    if mel is not None:
        axes[0].imshow(mel.T, origin="lower", aspect="auto", extent=(0, mel.shape[0] * HOP_SECONDS, 0, mel.shape[1]))
        axes[0].set_ylabel("mel bin")
        axes[0].set_title("log-mel spectrogram")
    for ax, (title, roll) in zip(axes[rows - len(panels) :], panels):
        ax.imshow(
            roll.T,
            origin="lower",
            aspect="auto",
            cmap="Greys",
            interpolation="nearest",
            extent=(0, extent_t, MIN_PITCH - 0.5, MIN_PITCH + roll.shape[1] - 0.5),
        )
        ax.set_ylabel("MIDI pitch")
        ax.set_title(title)
    axes[-1].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
