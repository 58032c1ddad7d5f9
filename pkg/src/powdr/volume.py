"""Dense 3D volumes, binary masks, PVOL file I/O and preprocessing primitives.

Arrays are indexed ``[x, y, z]`` with shape ``(H, W, D)``. On disk the payload
is x-fastest, which is numpy Fortran order for that shape.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PVOL_MAGIC = b"PVOL"
PVOL_VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2

_HEADER = struct.Struct("<4sIIIII3f")
_MAX_VOXELS = 1 << 31


class FormatError(ValueError):
    """Malformed PVOL file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    data: np.ndarray
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        object.__setattr__(self, "data", data.astype(bool, copy=False))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())


def _array(v):
    return v.data if isinstance(v, (Volume, Mask)) else np.asarray(v)


def _percentile_linear(values, q):
    # linear interpolation between order statistics at rank q/100 * (n - 1)
    s = np.sort(values, axis=None).astype(np.float64)
    pos = q / 100.0 * (s.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, s.size - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def normalize_percentile(v, lo=1.0, hi=99.0):
    """Clip to the [lo, hi] percentiles of ``v`` and rescale that range to [0, 1]."""
    if not (0 <= lo < hi <= 100):
        raise ValueError(f"need 0 <= lo < hi <= 100, got lo={lo}, hi={hi}")
    data = _array(v).astype(np.float64)
    if data.min() == data.max():
        raise ValueError("constant volume")
    p_lo = _percentile_linear(data, lo)
    p_hi = _percentile_linear(data, hi)
    if p_hi <= p_lo:
        raise ValueError("constant volume")
    out = (np.clip(data, p_lo, p_hi) - p_lo) / (p_hi - p_lo)
    spacing = v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)


def ball(radius):
    """Boolean ball of voxels with Euclidean offset <= radius."""
    r = int(radius)
    g = np.arange(-r, r + 1)
    return (g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2) <= r * r


def dilate_spherical(m, radius_voxels):
    """Binary dilation by a Euclidean ball measured in voxel units."""
    if radius_voxels < 0:
        raise ValueError("radius must be non-negative")
    data = _array(m).astype(bool)
    spacing = m.spacing if isinstance(m, Mask) else (1.0, 1.0, 1.0)
    if radius_voxels == 0:
        return Mask(data.copy(), spacing)
    out = ndimage.binary_dilation(data, structure=ball(radius_voxels))
    return Mask(out, spacing)


def apply_mask(v, m):
    """Keep voxels of ``v`` where ``m`` is set, zero elsewhere."""
    data = _array(v)
    mask = _array(m).astype(bool)
    if data.shape != mask.shape:
        raise ValueError(f"dims mismatch: volume {data.shape} vs mask {mask.shape}")
    out = np.where(mask, data, np.zeros((), dtype=data.dtype))
    spacing = v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)


def mask_union(*masks):
    """Voxelwise OR of same-shaped masks (e.g. several tissue compartments)."""
    if not masks:
        raise ValueError("need at least one mask")
    arrays = [_array(m).astype(bool) for m in masks]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"dims mismatch: {shape} vs {a.shape}")
    spacing = masks[0].spacing if isinstance(masks[0], Mask) else (1.0, 1.0, 1.0)
    return Mask(np.logical_or.reduce(arrays), spacing)


# -- PVOL I/O ---------------------------------------------------------------

def encode_header(dtype_code, dims, spacing):
    H, W, D = (int(d) for d in dims)
    return _HEADER.pack(PVOL_MAGIC, PVOL_VERSION, dtype_code, H, W, D, *spacing)


def decode_header(buf, offset=0):
    """Parse a PVOL header; returns (dtype_code, dims, spacing, payload_offset)."""
    if len(buf) - offset < 4 or buf[offset:offset + 4] != PVOL_MAGIC:
        raise FormatError("bad magic, expected b'PVOL'", offset)
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, code, H, W, D, sx, sy, sz = _HEADER.unpack_from(buf, offset)
    if version != PVOL_VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if code not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"unknown dtype code {code}", offset + 8)
    if min(H, W, D) < 1 or H * W * D >= _MAX_VOXELS:
        raise FormatError(f"dim overflow ({H}x{W}x{D})", offset + 12)
    if not (sx > 0 and sy > 0 and sz > 0):
        raise FormatError("spacing must be positive", offset + 24)
    return code, (H, W, D), (float(sx), float(sy), float(sz)), offset + _HEADER.size


def _atomic_write(path, payload):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def volume_bytes(v):
    if isinstance(v, Mask):
        code, payload = DTYPE_U8, v.data.astype("u1").ravel(order="F")
    else:
        code, payload = DTYPE_F32, v.data.astype("<f4").ravel(order="F")
    return encode_header(code, v.dims, v.spacing) + payload.tobytes()


def write_volume(v, path):
    """Write a Volume (float32) or Mask (uint8 0/1) as PVOL."""
    _atomic_write(path, volume_bytes(v))


def parse_volume(buf):
    code, dims, spacing, off = decode_header(buf)
    n = dims[0] * dims[1] * dims[2]
    itemsize = 4 if code == DTYPE_F32 else 1
    expected = n * itemsize
    actual = len(buf) - off
    if actual != expected:
        raise FormatError(f"payload length {actual} bytes, header implies {expected}", off)
    if code == DTYPE_F32:
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise FormatError("non-finite payload value", off)
        return Volume(data.reshape(dims, order="F"), spacing)
    data = np.frombuffer(buf, dtype="u1", count=n, offset=off)
    if data.max(initial=0) > 1:
        raise FormatError("mask payload must be 0/1", off)
    return Mask(data.reshape(dims, order="F").astype(bool), spacing)


def read_volume(path):
    """Read a PVOL file; returns a Volume or a Mask depending on the dtype code."""
    with open(path, "rb") as f:
        return parse_volume(f.read())


def read_mask(path):
    obj = read_volume(path)
    if isinstance(obj, Mask):
        return obj
    return Mask(obj.data > 0.5, obj.spacing)
