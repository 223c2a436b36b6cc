"""NCKT1 checkpoint files.

Layout (all integers little-endian)::

    b"NCKT1"            magic
    uint16 version      currently 1
    uint64 header_len
    header              UTF-8 JSON: config, parameter table (name, shape),
                        calibration scales, RNG state, extra metadata
    payload             each parameter's row-major float64 '<f8' bytes, in
                        table order
    uint32 crc32        of header + payload

Round trips are bit-exact: parameters are written as raw IEEE-754 doubles.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import CheckpointLayer, ModelConfig, ModelState
from .tensor import Tensor

MAGIC = b"NCKT1"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def _header(state: ModelState, extra: dict | None) -> dict:
    cfg = state.config
    return {
        "config": {**cfg.__dict__, "mlp_layers": list(cfg.mlp_layers)},
        "params": [[name, list(t.shape)] for name, t in state.params.items()],
        "checkpoints": {
            k: {"target_sigma": c.target_sigma, "scale": c.calibrated_scale, "relative": c.relative}
            for k, c in state.checkpoints.items()
        },
        "rng_state": state.rng_state,
        "extra": extra or {},
    }


def dumps(state: ModelState, extra: dict | None = None) -> bytes:
    header = json.dumps(_header(state, extra), sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in state.params.values())
    body = header + payload
    return (
        MAGIC
        + struct.pack("<HQ", VERSION, len(header))
        + body
        + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    )


def loads(blob: bytes) -> tuple[ModelState, dict]:
    """Parse checkpoint bytes; returns the state and the ``extra`` metadata."""
    fixed = len(MAGIC) + 10
    if len(blob) < fixed + 4:
        raise CheckpointError("file too short to be a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not an NCKT1 checkpoint")
    version, header_len = struct.unpack("<HQ", blob[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if fixed + header_len + 4 > len(blob):
        raise CheckpointError("truncated checkpoint header")
    body = blob[fixed:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    expected = sum(8 * int(np.prod(shape, dtype=np.int64)) for _, shape in header["params"])
    if len(body) - header_len != expected:
        raise CheckpointError(
            f"truncated or oversized payload: {len(body) - header_len} bytes, shape table needs {expected}"
        )
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")

    cfg_fields = dict(header["config"])
    cfg_fields["mlp_layers"] = tuple(cfg_fields["mlp_layers"])
    config = ModelConfig(**cfg_fields)
    params: dict[str, Tensor] = {}
    offset = header_len
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
        offset += 8 * n
    checkpoints = {
        k: CheckpointLayer(v["target_sigma"], v["scale"], v["relative"]) for k, v in header["checkpoints"].items()
    }
    return ModelState(config, params, checkpoints, header["rng_state"]), header["extra"]


def save(state: ModelState, path: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(state, extra))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> ModelState:
    return loads(Path(path).read_bytes())[0]


def load_with_extra(path: str | os.PathLike) -> tuple[ModelState, dict]:
    return loads(Path(path).read_bytes())
