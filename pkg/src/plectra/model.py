"""Encoder-decoder Transformer with frame-level heads on the encoder.

The encoder feeds four heads: onset, offset and activation (each one affine
map of the last encoder layer) and a frame head that reads the three head
probabilities side by side. The decoder generates event tokens
autoregressively while cross-attending to the encoder states.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .audio import N_MELS
from .notation import N_PITCHES
from .tokenizer import EOS, MAX_FRAMES, PAD, SOS, VOCAB_SIZE


class NumericDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    d_hidden: int = 256
    heads: int = 8
    encoder_layers: int = 4
    decoder_layers: int = 4
    n_mels: int = N_MELS
    n_pitches: int = N_PITCHES
    vocab: int = VOCAB_SIZE
    max_frames: int = MAX_FRAMES
    detach_heads: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.max_frames != MAX_FRAMES:
            raise ValueError(f"max_frames must equal the FRAME vocabulary size {MAX_FRAMES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


FULL_CONFIG = ModelConfig()
DESK_CONFIG = ModelConfig(d_model=64, d_hidden=64, heads=8, encoder_layers=2, decoder_layers=2)


class EncoderOutputs(NamedTuple):
    onset_logits: torch.Tensor
    offset_logits: torch.Tensor
    activation_logits: torch.Tensor
    frame_logits: torch.Tensor
    hidden: torch.Tensor


class LossBreakdown(NamedTuple):
    L_frame: torch.Tensor
    L_onset: torch.Tensor
    L_offset: torch.Tensor
    L_AM: torch.Tensor
    L_LM: torch.Tensor
    L_total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


def sinusoidal_positions(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d_model)
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_head).transpose(1, 2)

    def forward(self, query, memory, mask=None):
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_hidden: int):
        super().__init__()
        self.inner = nn.Linear(d_model, d_hidden)
        self.outer = nn.Linear(d_hidden, d_model)

    def forward(self, x):
        return self.outer(F.gelu(self.inner(x)))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.norm_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_hidden)

    def forward(self, x):
        h = self.norm_attn(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm_ff(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.norm_cross = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.norm_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_hidden)

    def forward(self, y, memory, causal):
        h = self.norm_self(y)
        y = y + self.self_attn(h, h, causal)
        y = y + self.cross_attn(self.norm_cross(y), memory)
        return y + self.ff(self.norm_ff(y))


class TranscriptionTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.input_proj = nn.Linear(cfg.n_mels, d)
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.onset_head = nn.Linear(d, cfg.n_pitches)
        self.offset_head = nn.Linear(d, cfg.n_pitches)
        self.activation_head = nn.Linear(d, cfg.n_pitches)
        self.frame_head = nn.Linear(3 * cfg.n_pitches, cfg.n_pitches)

        self.embed = nn.Embedding(cfg.vocab, d)
        self.decoder = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, cfg.vocab)

        self.register_buffer("positions", sinusoidal_positions(cfg.max_frames, d).float(), persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.xavier_uniform_(module.weight)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def _pos(self, n: int, like: torch.Tensor) -> torch.Tensor:
        if n > self.cfg.max_frames:
            raise ValueError(f"sequence of {n} exceeds {self.cfg.max_frames} positions")
        return self.positions[:n].to(like.dtype)

    def encode(self, mel: torch.Tensor) -> EncoderOutputs:
        """``mel`` is (B, T, n_mels) or (T, n_mels)."""
        if mel.dim() == 2:
            mel = mel[None]
        if mel.shape[-1] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {mel.shape[-1]}")
        x = self.input_proj(mel) + self._pos(mel.shape[1], mel)
        for block in self.encoder:
            x = block(x)
        hidden = self.encoder_norm(x)
        onset = self.onset_head(hidden)
        offset = self.offset_head(hidden)
        activation = self.activation_head(hidden)
        probs = torch.cat([torch.sigmoid(onset), torch.sigmoid(offset), torch.sigmoid(activation)], dim=-1)
        if self.cfg.detach_heads:
            probs = probs.detach()
        frame = self.frame_head(probs)
        return EncoderOutputs(onset, offset, activation, frame, hidden)

    def decode(self, tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """Logits (B, S, vocab) for decoder input ``tokens`` (B, S)."""
        if tokens.dim() == 1:
            tokens = tokens[None]
        s = tokens.shape[1]
        y = self.embed(tokens) + self._pos(s, memory)
        causal = torch.ones(s, s, dtype=torch.bool, device=tokens.device).tril()
        for block in self.decoder:
            y = block(y, memory, causal)
        return self.output_proj(self.decoder_norm(y))

    def forward(self, mel: torch.Tensor, decoder_input: torch.Tensor):
        enc = self.encode(mel)
        logits = self.decode(decoder_input, enc.hidden)
        for t in (*enc[:4], logits):
            if not torch.isfinite(t).all():
                raise NumericDivergence("numeric divergence")
        return enc, logits


def shift_right(target_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split padded ``SOS ... EOS PAD*`` ids into (decoder_input, target).

    Both keep the full fixed length; the target is the sequence advanced by
    one with PAD appended, and the decoder input replaces PAD with EOS so it
    can be embedded (those positions are masked out of the loss and, being
    later in time, never influence earlier positions).
    """
    ids = target_ids if target_ids.dim() == 2 else target_ids[None]
    decoder_input = ids.clone()
    decoder_input[decoder_input == PAD] = EOS
    pad = torch.full_like(ids[:, :1], PAD)
    target = torch.cat([ids[:, 1:], pad], dim=1)
    return decoder_input, target


def _masked_bce(logits, targets, frame_mask):
    # weighted rather than indexed so the loss also works under torch.func.vmap
    n = int(frame_mask.sum())
    if n == 0:
        return logits.sum() * 0.0
    weight = frame_mask.unsqueeze(-1).to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (bce * weight).sum() / (n * logits.shape[-1])


def compute_losses(
    enc: EncoderOutputs,
    decoder_logits: torch.Tensor,
    onset_targets: torch.Tensor,
    offset_targets: torch.Tensor,
    activation_targets: torch.Tensor,
    target_tokens: torch.Tensor,
    lambda_am: float = 1.0,
    lambda_lm: float = 1.0,
) -> LossBreakdown:
    """All five loss terms plus the weighted total.

    Onset/offset losses only look at frames holding at least one
    groundtruth onset/offset (every pitch of such a frame counts) and are 0
    when there is none. Target tokens equal to PAD are left out of L_LM.
    """
    frame_logits = enc.frame_logits
    if frame_logits.shape != activation_targets.shape:
        raise ValueError(f"frame logits {tuple(frame_logits.shape)} vs targets {tuple(activation_targets.shape)}")
    L_frame = F.binary_cross_entropy_with_logits(frame_logits, activation_targets)
    L_onset = _masked_bce(enc.onset_logits, onset_targets, onset_targets.amax(dim=-1) > 0)
    L_offset = _masked_bce(enc.offset_logits, offset_targets, offset_targets.amax(dim=-1) > 0)
    L_AM = L_frame + L_onset + L_offset

    target_tokens = target_tokens if target_tokens.dim() == 2 else target_tokens[None]
    logits = decoder_logits if decoder_logits.dim() == 3 else decoder_logits[None]
    if logits.shape[:2] != target_tokens.shape:
        raise ValueError(f"decoder logits {tuple(logits.shape)} vs targets {tuple(target_tokens.shape)}")
    if bool((target_tokens != PAD).any()):
        L_LM = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_tokens.reshape(-1), ignore_index=PAD)
    else:
        L_LM = logits.sum() * 0.0
    L_total = lambda_am * L_AM + lambda_lm * L_LM
    return LossBreakdown(L_frame, L_onset, L_offset, L_AM, L_LM, L_total)


@torch.no_grad()
def greedy_decode(model: TranscriptionTransformer, mel: torch.Tensor, max_tokens: int, memory: Optional[torch.Tensor] = None):
    """Batched greedy generation; returns (B, <=max_tokens) ids starting with SOS.

    Rows that have emitted EOS keep emitting EOS.
    """
    if mel.dim() == 2:
        mel = mel[None]
    if memory is None:
        memory = model.encode(mel).hidden
    b = memory.shape[0]
    ids = torch.full((b, 1), SOS, dtype=torch.long, device=memory.device)
    finished = torch.zeros(b, dtype=torch.bool, device=memory.device)
    while ids.shape[1] < max_tokens and not bool(finished.all()):
        logits = model.decode(ids, memory)[:, -1]
        nxt = logits.argmax(dim=-1)
        nxt = torch.where(finished, torch.full_like(nxt, EOS), nxt)
        ids = torch.cat([ids, nxt[:, None]], dim=1)
        finished |= nxt == EOS
    return ids


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
