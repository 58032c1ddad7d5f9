"""PWDR checkpoint files.

Layout (little-endian)::

    b"PWDR"  u32 version  u32 n  n bytes of JSON metadata
    u8 has_optimizer  u64 param_count  param_count x f32
    [u64 adam_step  param_count x f32 first moment  param_count x f32 second moment]

The JSON holds the network config and the schedule parameters (T,
beta_start, beta_end); keys are sorted so identical state gives identical bytes.
"""
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams
from .volume import FormatError, _atomic_write

MAGIC = b"PWDR"
VERSION = 1


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class Checkpoint:
    net_cfg: DenoiserConfig
    schedule: dict
    params: DenoiserParams
    optimizer: AdamState = None
    extra: dict = None


def checkpoint_bytes(ckpt):
    meta = {"denoiser": ckpt.net_cfg.to_dict(), "schedule": ckpt.schedule}
    if ckpt.extra:
        meta["extra"] = ckpt.extra
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    opt = ckpt.optimizer
    parts.append(struct.pack("<BQ", 1 if opt is not None else 0, ckpt.params.size))
    parts.append(ckpt.params.vector.astype("<f4").tobytes())
    if opt is not None:
        parts.append(struct.pack("<Q", opt.step))
        parts.append(opt.m.astype("<f4").tobytes())
        parts.append(opt.v.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    _atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'PWDR'", 0)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 12
    try:
        meta = json.loads(buf[off:off + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata ({exc})", off) from None
    off += n
    if len(buf) < off + 9:
        raise FormatError("truncated header", len(buf))
    has_opt, count = struct.unpack_from("<BQ", buf, off)
    off += 9
    cfg = DenoiserConfig.from_dict(meta["denoiser"])
    params = DenoiserParams(cfg)
    if count != params.size:
        raise FormatError(f"parameter count {count} does not match config ({params.size})", off - 8)

    def take(k):
        nonlocal off
        if len(buf) < off + 4 * k:
            raise FormatError("truncated payload", len(buf))
        arr = np.frombuffer(buf, dtype="<f4", count=k, offset=off).astype(np.float64)
        off += 4 * k
        return arr

    params.vector[:] = take(count)
    opt = None
    if has_opt:
        if len(buf) < off + 8:
            raise FormatError("truncated optimizer state", len(buf))
        (step,) = struct.unpack_from("<Q", buf, off)
        off += 8
        opt = AdamState(take(count), take(count), int(step))
    if off != len(buf):
        raise FormatError("trailing bytes after payload", off)
    return Checkpoint(cfg, meta["schedule"], params, opt, meta.get("extra"))


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
