"""Model checkpoints (``DFNC``).

Layout, little-endian::

    b"DFNC" | u8 version | u32 block_len | key=value block (ModelConfig + meta.* keys)
    u32 entry count | per entry: u16 name_len | name (UTF-8) | DFNT tensor

Entries cover parameters, batch-norm running statistics and SGD momentum
buffers, so a checkpoint resumes training exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data.io import decode_kv, encode_kv
from .errors import FormatError
from .model import DFN, ModelConfig
from .serialize import decode_tensor, encode_tensor

MAGIC = b"DFNC"
VERSION = 1


def encode_checkpoint(cfg: ModelConfig, state: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    kv = cfg.to_kv()
    for k, v in (meta or {}).items():
        kv[f"meta.{k}"] = str(v)
    block = encode_kv(kv)
    parts = [MAGIC, struct.pack("<BI", VERSION, len(block)), block, struct.pack("<I", len(state))]
    for name in sorted(state):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(state[name]))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    if buf[:4] != MAGIC:
        raise FormatError("bad checkpoint magic, expected b'DFNC'", 0)
    if len(buf) < 9:
        raise FormatError("truncated checkpoint header", len(buf))
    version, block_len = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 9
    if len(buf) < pos + block_len + 4:
        raise FormatError("truncated checkpoint config block", len(buf))
    kv = decode_kv(buf[pos : pos + block_len], pos)
    pos += block_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for i in range(count):
        if len(buf) < pos + 2:
            raise FormatError(f"truncated entry {i} name length", len(buf))
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + n:
            raise FormatError(f"truncated entry {i} name", len(buf))
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        try:
            state[name], pos = decode_tensor(buf, pos)
        except FormatError as exc:
            raise FormatError(f"entry {i} ({name}): {exc}", exc.offset) from None
    if pos != len(buf):
        raise FormatError("trailing bytes after last checkpoint entry", pos)
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    cfg = ModelConfig.from_kv({k: v for k, v in kv.items() if not k.startswith("meta.")})
    return cfg, state, meta


def save_checkpoint(path, model: DFN, meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model.cfg, model.state(), meta))


def load_checkpoint(path) -> tuple[DFN, dict[str, str]]:
    cfg, state, meta = decode_checkpoint(Path(path).read_bytes())
    model = DFN(cfg)
    model.load_state(state)
    return model, meta
