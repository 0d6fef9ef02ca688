"""Versioned binary checkpoint container.

Layout::

    b"MOLCKPT\\0" | u32 version | u64 header length | JSON header | float64 LE blocks

The header (sorted keys, compact separators) stores the model config, the
parameter manifest (name, shape, offset), optional training state metadata
including the RNG state, and free-form extras. The blocks are the flat
parameter vector followed, when training state is present, by the AdamW
first and second moments. Identical state always produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, Parameters, init_params
from .training import TrainState

MAGIC = b"MOLCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: np.ndarray
    manifest: list
    state_meta: dict | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> Model:
        params = init_params(self.config, np.random.default_rng(0))
        expected = [[n, list(s), o] for n, s, o in _manifest(params)]
        if expected != self.manifest:
            raise CheckpointError("parameter manifest does not match the model config")
        params.load_flat(self.params)
        return Model(self.config, params)

    def train_state(self) -> TrainState:
        if self.state_meta is None:
            raise CheckpointError("checkpoint holds no training state")
        return TrainState.from_meta(self.state_meta, self.m.copy(), self.v.copy())


def _manifest(params: Parameters) -> list:
    offsets = params.offsets()
    return [(n, tuple(s), offsets[n][0]) for n, s in zip(params.names, params.shapes)]


def encode(model: Model, state: TrainState | None = None, extra: dict | None = None) -> bytes:
    flat = model.params.flat()
    header = {
        "config": model.config.to_dict(),
        "manifest": [[n, list(s), o] for n, s, o in _manifest(model.params)],
        "n_params": int(flat.size),
        "state": None if state is None else state.meta(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = [flat]
    if state is not None:
        blocks += [state.m, state.v]
    body = b"".join(np.ascontiguousarray(b, dtype=_F64).tobytes() for b in blocks)
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + body


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint header") from None
    n = int(header["n_params"])
    n_blocks = 1 if header["state"] is None else 3
    body = raw[start + hlen:]
    if len(body) != n_blocks * n * _F64.itemsize:
        raise CheckpointError("checkpoint payload has the wrong length")
    arrays = np.frombuffer(body, dtype=_F64).astype(np.float64).reshape(n_blocks, n)
    ck = Checkpoint(ModelConfig.from_dict(header["config"]), arrays[0].copy(),
                    header["manifest"], header["state"], extra=header["extra"])
    if header["state"] is not None:
        ck.m, ck.v = arrays[1].copy(), arrays[2].copy()
    return ck


def save_checkpoint(path, model: Model, state: TrainState | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model, state, extra))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc.strerror}") from None
    return decode(raw)
