"""Binary checkpoint format.

Layout (little-endian)::

    b"PLCK" | u32 version | u32 n | n bytes of JSON header | u32 m | m bytes of
    JSON index | blobs

The header carries the model config, the training step and the RNG state;
the index lists ``{"name", "shape", "offset", "nbytes"}`` for each float32
parameter blob, offsets relative to the start of the blob area.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import ModelConfig, TranscriptionTransformer

MAGIC = b"PLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[str] = None  # hex of torch.get_rng_state()
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TranscriptionTransformer, step: int = 0, extra: Optional[dict] = None) -> "Checkpoint":
        params = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
        rng = torch.get_rng_state().numpy().tobytes().hex()
        return cls(model.cfg, params, step, rng, dict(extra or {}))

    def build_model(self, dtype=torch.float32) -> TranscriptionTransformer:
        model = TranscriptionTransformer(self.config)
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        missing = set(model.state_dict()) ^ set(state)
        if missing:
            raise CheckpointError(f"parameter names do not match the config: {sorted(missing)[:5]}")
        model.load_state_dict(state)
        model.to(dtype)
        model.eval()
        return model

    def to_bytes(self) -> bytes:
        header = _dumps(
            {"config": self.config.to_dict(), "step": self.step, "rng_state": self.rng_state, "extra": self.extra}
        )
        index, blobs, offset = [], [], 0
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            raw = arr.tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        index_raw = _dumps(index)
        return b"".join(
            [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(index_raw)), index_raw, *blobs]
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, n = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(raw[pos : pos + n])
        pos += n
        (m,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        index = json.loads(raw[pos : pos + m])
        pos += m
        params = {}
        for item in index:
            start = pos + item["offset"]
            blob = raw[start : start + item["nbytes"]]
            if len(blob) != item["nbytes"]:
                raise CheckpointError(f"truncated blob {item['name']}")
            params[item["name"]] = np.frombuffer(blob, dtype="<f4").reshape(item["shape"]).astype(np.float32)
        return cls(ModelConfig.from_dict(header["config"]), params, header["step"], header["rng_state"], header["extra"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = Checkpoint.from_bytes(raw)
    if expected_config is not None and ckpt.config != expected_config:
        raise CheckpointError(f"checkpoint config {ckpt.config} does not match expected {expected_config}")
    return ckpt
