"""Single-level orthonormal 3D Haar transform.

Subbands are stacked on a channel axis in the order LLL, LLH, LHL, LHH, HLL,
HLH, HHL, HHH, where the letters name the filter along x, y, z. Channel index
is therefore ``4*fx + 2*fy + fz`` with L=0, H=1.
"""
import struct

import numpy as np

from .volume import DTYPE_F32, FormatError, Volume, decode_header, encode_header, _atomic_write

SUBBANDS = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def _split(x, axis):
    a = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    b = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (a + b) * _INV_SQRT2, (a - b) * _INV_SQRT2


def _merge(lo, hi, axis):
    a = (lo + hi) * _INV_SQRT2
    b = (lo - hi) * _INV_SQRT2
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=lo.dtype)
    idx = [slice(None)] * lo.ndim
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = a
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = b
    return out


def dwt3(v):
    """Forward transform of a volume (or a batch ``(..., H, W, D)``).

    Returns float64 coefficients of shape ``(..., 8, H/2, W/2, D/2)``.
    """
    x = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError("need at least 3 dimensions")
    if any(n % 2 for n in x.shape[-3:]):
        raise ValueError(f"all dims must be even for the Haar transform, got {x.shape[-3:]}")
    bands = [x]
    for axis in (-3, -2, -1):
        nxt = []
        for band in bands:
            nxt.extend(_split(band, axis))
        bands = nxt
    return np.stack(bands, axis=-4)


def idwt3(s):
    """Exact inverse of :func:`dwt3`; returns a float64 array ``(..., H, W, D)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim < 4 or s.shape[-4] != 8:
        raise ValueError(f"expected 8 subbands on axis -4, got shape {s.shape}")
    bands = [s[..., c, :, :, :] for c in range(8)]
    for axis in (-1, -2, -3):
        bands = [_merge(bands[i], bands[i + 1], axis) for i in range(0, len(bands), 2)]
    return bands[0]


def write_subbands(s, path, spacing=(1.0, 1.0, 1.0)):
    """8 PVOL payload blocks under one header with a trailing channel count."""
    s = np.asarray(s)
    if s.ndim != 4 or s.shape[0] != 8:
        raise ValueError(f"expected shape (8, h, w, d), got {s.shape}")
    head = encode_header(DTYPE_F32, s.shape[1:], spacing) + struct.pack("<I", 8)
    payload = b"".join(s[c].astype("<f4").ravel(order="F").tobytes() for c in range(8))
    _atomic_write(path, head + payload)


def read_subbands(path):
    with open(path, "rb") as f:
        buf = f.read()
    code, dims, _, off = decode_header(buf)
    if code != DTYPE_F32:
        raise FormatError("subband files must be float32", 8)
    if len(buf) < off + 4:
        raise FormatError("truncated header", len(buf))
    (nch,) = struct.unpack_from("<I", buf, off)
    if nch != 8:
        raise FormatError(f"channel count {nch}, expected 8", off)
    off += 4
    n = dims[0] * dims[1] * dims[2]
    if len(buf) - off != 8 * n * 4:
        raise FormatError(f"payload length {len(buf) - off} bytes, header implies {32 * n}", off)
    flat = np.frombuffer(buf, dtype="<f4", offset=off).reshape(8, n)
    return np.stack([flat[c].reshape(dims, order="F") for c in range(8)]).astype(np.float32)
