"""Single-file checkpoint container.

Layout, all little-endian: magic "MOMO", version u32, entry count u32,
then per entry a u32-length-prefixed UTF-8 name, u32 rank, u32 extents,
and a float32 payload. Parameters live under ``param/``, EMA shadows under
``ema/``, and metadata (step counter, RNG seed, config JSON) is encoded as
small float arrays under ``meta/``. Writes are atomic
(write-temp-then-rename); load(save(c)) is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MOMO"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    step: int = 0
    version: int = VERSION


def _encode_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    entries += [(f"ema/{k}", v) for k, v in sorted(ckpt.ema.items())]
    entries.append(("meta/step", np.array([ckpt.step], dtype=np.float32)))
    # 16-bit limbs keep 64-bit seeds exact in float32 payloads
    seed = int(ckpt.seed)
    limbs = [(seed >> (16 * i)) & 0xFFFF for i in range(4)]
    entries.append(("meta/seed", np.array(limbs, dtype=np.float32)))
    cfg_bytes = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    entries.append(("meta/config", np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float32)))
    return entries


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    entries = _encode_entries(ckpt)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", ckpt.version, len(entries))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, path: str):
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"{self.path}: truncated checkpoint "
                             f"(wanted {n} bytes at offset {self.pos}, "
                             f"file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path: str) -> Checkpoint:
    r = _Reader(path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic (expected {MAGIC!r})")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} "
                         f"(this build reads {VERSION})")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", r.take(4))
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
        entries[name] = arr
    if r.pos != len(r.buf):
        raise ValueError(f"{path}: {len(r.buf) - r.pos} trailing bytes after "
                         f"{count} entries")
    params = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    ema = {k[len("ema/"):]: v for k, v in entries.items() if k.startswith("ema/")}
    step = int(entries["meta/step"][0]) if "meta/step" in entries else 0
    seed = 0
    if "meta/seed" in entries:
        limbs = entries["meta/seed"].astype(np.int64)
        seed = int(sum(int(l) << (16 * i) for i, l in enumerate(limbs)))
    config = {}
    if "meta/config" in entries:
        cfg_bytes = entries["meta/config"].astype(np.uint8).tobytes()
        config = json.loads(cfg_bytes.decode("utf-8")) if cfg_bytes else {}
    return Checkpoint(params=params, ema=ema, config=config,
                      seed=seed, step=step, version=version)
