"""On-disk dataset container (``DFND``) and PGM export.

DFND layout, little-endian::

    b"DFND" | u8 version | u32 count | u32 spec_len | spec block (UTF-8 key=value lines)
    per sample:
        u64 seed | u8 scenario code | u8 n_focus | n_focus x u8 class id
        image tensor (DFNT) | H*W u8 labels | H*W u8 boundary
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, FormatError
from ..serialize import decode_tensor, encode_tensor
from .synth import SCENARIOS, DatasetSpec, SampleRecord

MAGIC = b"DFND"
VERSION = 1


def encode_kv(kv: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in sorted(kv.items())).encode("utf-8")


def decode_kv(raw: bytes, offset: int = 0) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"key=value block is not UTF-8: {exc}", offset) from None
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed key=value line {line!r}", offset)
        k, v = line.split("=", 1)
        out[k] = v
    return out


def write_dataset(samples: list[SampleRecord], spec: DatasetSpec, path) -> None:
    for i, smp in enumerate(samples):
        if smp.image.shape != (3, spec.height, spec.width) or smp.labels.shape != (spec.height, spec.width):
            raise ConfigurationError(f"sample {i} has size {smp.labels.shape}, dataset is {spec.height}x{spec.width}")
        if smp.labels.size and int(smp.labels.max()) >= spec.num_classes:
            raise ConfigurationError(f"sample {i} has label >= {spec.num_classes}")
    kv = spec.to_kv()
    kv["count"] = str(len(samples))
    block = encode_kv(kv)
    parts = [MAGIC, struct.pack("<BII", VERSION, len(samples), len(block)), block]
    for smp in samples:
        parts.append(struct.pack("<QBB", smp.seed, SCENARIOS.index(smp.scenario), len(smp.focus)))
        parts.append(bytes(bytearray(smp.focus)))
        parts.append(encode_tensor(smp.image.astype(np.float32)))
        parts.append(np.ascontiguousarray(smp.labels, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(smp.boundary, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> tuple[DatasetSpec, list[SampleRecord]]:
    return decode_dataset(Path(path).read_bytes())


def decode_dataset(buf: bytes) -> tuple[DatasetSpec, list[SampleRecord]]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad dataset magic, expected b'DFND'", 0)
    if len(buf) < 13:
        raise FormatError("truncated dataset header", len(buf))
    version, count, spec_len = struct.unpack_from("<BII", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    pos = 13
    if len(buf) < pos + spec_len:
        raise FormatError("truncated spec block", len(buf))
    kv = decode_kv(buf[pos : pos + spec_len], pos)
    try:
        spec = DatasetSpec.from_kv(kv)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid spec block: {exc}", pos) from None
    pos += spec_len
    h, w = spec.height, spec.width
    samples = []
    for i in range(count):
        start = pos
        try:
            if len(buf) < pos + 10:
                raise FormatError("truncated sample header", len(buf))
            seed, code, n_focus = struct.unpack_from("<QBB", buf, pos)
            pos += 10
            if code >= len(SCENARIOS):
                raise FormatError(f"unknown scenario code {code}", pos - 2)
            if len(buf) < pos + n_focus:
                raise FormatError("truncated focus list", len(buf))
            focus = tuple(buf[pos : pos + n_focus])
            pos += n_focus
            image, pos = decode_tensor(buf, pos)
            if image.shape != (3, h, w):
                raise FormatError(f"image shape {image.shape} does not match dataset {h}x{w}", pos)
            if len(buf) < pos + 2 * h * w:
                raise FormatError("truncated label/boundary grids", len(buf))
            labels = np.frombuffer(buf, np.uint8, h * w, pos).reshape(h, w).copy()
            pos += h * w
            boundary = np.frombuffer(buf, np.uint8, h * w, pos).reshape(h, w).copy()
            pos += h * w
        except FormatError as exc:
            raise FormatError(f"sample {i} (starting at byte {start}): {exc}", exc.offset) from None
        samples.append(SampleRecord(image, labels, boundary, int(seed), SCENARIOS[code], focus))
    if pos != len(buf):
        raise FormatError("trailing bytes after last sample", pos)
    spec.count = count
    return spec, samples


# ---------------------------------------------------------------------------
# PGM


def to_gray(values: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Map a label map, {0,1} mask or probability map to 8-bit grey levels."""
    values = np.asarray(values)
    if values.dtype.kind == "f":
        return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    k = num_classes if num_classes is not None else max(int(values.max(initial=0)) + 1, 2)
    step = 255 // max(k - 1, 1)
    scaled = values.astype(np.int64) * step
    if scaled.max(initial=0) > 255:
        raise ConfigurationError(f"values up to {values.max()} do not fit 8 bits at step {step}")
    return scaled.astype(np.uint8)


def export_pgm(values: np.ndarray, path, num_classes: int | None = None) -> None:
    """Write a binary (P5) PGM with maxval 255.

    Integer maps are scaled by ``floor(255 / (K - 1))``; a {0,1} boundary mask
    therefore maps to {0, 255}. Float maps are treated as probabilities.
    """
    gray = to_gray(values, num_classes)
    if gray.ndim != 2:
        raise ConfigurationError(f"PGM export needs a 2-D map, got shape {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], np.uint8, h * w).reshape(h, w)
