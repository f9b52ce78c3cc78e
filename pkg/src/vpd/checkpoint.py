"""Single-file model checkpoints: JSON header + serialized parameter tensors.

Layout: magic "VPDC" | version u16 LE | header_len u32 LE | UTF-8 JSON header
| torch.save payload. The header records tensor dims and a hash of the
originating config so stale artifacts are detectable.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

from .errors import CorruptHeader

CKPT_MAGIC = b"VPDC"
CKPT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, state_dict, config: dict, kind: str) -> None:
    import torch

    header = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "dims": {k: list(v.shape) for k, v in state_dict.items()},
    }
    payload = io.BytesIO()
    torch.save(state_dict, payload)
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(encoded)))
        fh.write(encoded)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, state_dict)."""
    import torch

    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != CKPT_MAGIC:
        raise CorruptHeader(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != CKPT_VERSION:
        raise CorruptHeader(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 10 + header_len:
        raise CorruptHeader(f"{path}: truncated header")
    header = json.loads(data[10 : 10 + header_len].decode("utf-8"))
    state_dict = torch.load(io.BytesIO(data[10 + header_len :]), weights_only=True)
    return header, state_dict
