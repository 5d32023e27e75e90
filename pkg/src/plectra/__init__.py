"""Guitar transcription toolkit: synthetic data, a multi-loss Transformer, and its evaluation."""

from .audio import AudioClip, compute_log_mel, read_wav
from .decoding import DecodingConfig, transcribe
from .metrics import onset_f1, score
from .model import DESK_CONFIG, FULL_CONFIG, ModelConfig, TranscriptionTransformer
from .notation import NoteEvent, load_notes, save_notes

__all__ = [
    "AudioClip",
    "DESK_CONFIG",
    "DecodingConfig",
    "ModelConfig",
    "NoteEvent",
    "FULL_CONFIG",
    "TranscriptionTransformer",
    "compute_log_mel",
    "load_notes",
    "onset_f1",
    "read_wav",
    "save_notes",
    "score",
    "transcribe",
]
