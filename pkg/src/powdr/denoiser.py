"""Conditional 3D residual U-Net on wavelet subbands, with hand-written backprop.

Input is the noisy subband tensor concatenated with the condition subbands
(16 channels); output is the predicted clean subbands (8 channels).

Layout for ``L = len(channel_multipliers)`` levels, ``ch[l] = base * mult[l]``::

    in_conv            16 -> ch[0]
    enc{l}.block{b}    residual blocks (level l > 0 starts with down{l}, stride 2)
    up{l}              nearest 2x upsample, conv ch[l+1] -> ch[l], add skip from enc{l}
    dec{l}.block{b}    residual blocks
    out_conv           SiLU, conv ch[0] -> 8 (zero-initialised)

Each residual block::

    h = conv1(silu(x)) + proj(silu(temb))      # per-channel time bias
    h = conv2(dropout(silu(h)))
    out = h + skip(x)                          # 1x1x1 conv when channels change
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._backend import get_kernels

IN_CHANNELS = 16
OUT_CHANNELS = 8


class CacheError(RuntimeError):
    """Backward called with a cache that does not belong to the current parameters."""


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 8
    channel_multipliers: tuple = (1, 2)
    blocks_per_level: int = 1
    dropout_rate: float = 0.1
    time_embed_dim: int = 32
    in_channels: int = IN_CHANNELS
    out_channels: int = OUT_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.in_channels != IN_CHANNELS or self.out_channels != OUT_CHANNELS:
            raise ValueError("in_channels must be 16 and out_channels 8")
        if self.base_channels < 1 or self.blocks_per_level < 1 or self.time_embed_dim < 2:
            raise ValueError("base_channels, blocks_per_level >= 1 and time_embed_dim >= 2 required")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive integers")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def levels(self):
        return len(self.channel_multipliers)

    def channels(self, level):
        return self.base_channels * self.channel_multipliers[level]

    def to_dict(self):
        return {
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "blocks_per_level": self.blocks_per_level,
            "dropout_rate": self.dropout_rate,
            "time_embed_dim": self.time_embed_dim,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in (
            "base_channels", "channel_multipliers", "blocks_per_level",
            "dropout_rate", "time_embed_dim")})


# full-resolution configuration; recorded for reference, far too large for numpy
FULL_SCALE_CONFIG = DenoiserConfig(base_channels=64, channel_multipliers=(1, 2, 2, 4, 4),
                              blocks_per_level=2, dropout_rate=0.1, time_embed_dim=256)


# -- parameter store ----------------------------------------------------------

def _block_spec(prefix, cin, cout, emb):
    spec = [
        (f"{prefix}.conv1.w", (cout, cin, 3, 3, 3), "conv"),
        (f"{prefix}.conv1.b", (cout,), "zero"),
        (f"{prefix}.temb.w", (cout, emb), "dense"),
        (f"{prefix}.temb.b", (cout,), "zero"),
        (f"{prefix}.conv2.w", (cout, cout, 3, 3, 3), "conv"),
        (f"{prefix}.conv2.b", (cout,), "zero"),
    ]
    if cin != cout:
        spec += [(f"{prefix}.skip.w", (cout, cin), "dense"), (f"{prefix}.skip.b", (cout,), "zero")]
    return spec


def layer_table(cfg):
    """Ordered (name, shape, init) triples; defines the flat parameter layout."""
    E = cfg.time_embed_dim
    table = [
        ("temb.fc1.w", (E, E), "dense"), ("temb.fc1.b", (E,), "zero"),
        ("temb.fc2.w", (E, E), "dense"), ("temb.fc2.b", (E,), "zero"),
        ("in_conv.w", (cfg.channels(0), IN_CHANNELS, 3, 3, 3), "conv"),
        ("in_conv.b", (cfg.channels(0),), "zero"),
    ]
    cin = cfg.channels(0)
    for lvl in range(cfg.levels):
        if lvl > 0:
            table += [(f"down{lvl}.w", (cin, cin, 3, 3, 3), "conv"), (f"down{lvl}.b", (cin,), "zero")]
        for b in range(cfg.blocks_per_level):
            table += _block_spec(f"enc{lvl}.block{b}", cin, cfg.channels(lvl), E)
            cin = cfg.channels(lvl)
    for lvl in range(cfg.levels - 2, -1, -1):
        c_lo, c_hi = cfg.channels(lvl), cfg.channels(lvl + 1)
        table += [(f"up{lvl}.w", (c_lo, c_hi, 3, 3, 3), "conv"), (f"up{lvl}.b", (c_lo,), "zero")]
        for b in range(cfg.blocks_per_level):
            table += _block_spec(f"dec{lvl}.block{b}", c_lo, c_lo, E)
    table += [
        ("out_conv.w", (OUT_CHANNELS, cfg.channels(0), 3, 3, 3), "zero"),
        ("out_conv.b", (OUT_CHANNELS,), "zero"),
    ]
    return table


class DenoiserParams:
    """Flat parameter vector with named views, plus a gradient vector of the same layout."""

    def __init__(self, cfg, vector=None):
        self.cfg = cfg
        self.layout = {}
        offset = 0
        for name, shape, _ in layer_table(cfg):
            size = int(np.prod(shape))
            self.layout[name] = (offset, shape)
            offset += size
        self.size = offset
        if vector is None:
            vector = np.zeros(offset)
        vector = np.ascontiguousarray(vector, dtype=np.float64)
        if vector.shape != (offset,):
            raise ValueError(f"parameter vector has {vector.size} entries, config needs {offset}")
        self.vector = vector
        self.grad = np.zeros(offset)
        self.version = 0

    def __getitem__(self, name):
        off, shape = self.layout[name]
        return self.vector[off:off + int(np.prod(shape))].reshape(shape)

    def grad_view(self, grad, name):
        off, shape = self.layout[name]
        return grad[off:off + int(np.prod(shape))].reshape(shape)

    def touch(self):
        """Mark the parameters as modified (invalidates outstanding caches)."""
        self.version += 1

    def copy(self):
        return DenoiserParams(self.cfg, self.vector.copy())


def init_params(cfg, rng):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero output conv."""
    params = DenoiserParams(cfg)
    for name, shape, kind in layer_table(cfg):
        if kind == "zero":
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


def parameter_count(cfg):
    return sum(int(np.prod(shape)) for _, shape, _ in layer_table(cfg))


# -- elementwise pieces -------------------------------------------------------

def _silu(x):
    s = expit(x)
    return x * s, s


def _silu_grad(x, s, g):
    return g * (s * (1.0 + x * (1.0 - s)))


def timestep_features(t, dim):
    """Sinusoidal features of the integer step(s) ``t``: shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _upsample(x):
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def _upsample_grad(g):
    N, C, X, Y, Z = g.shape
    return g.reshape(N, C, X // 2, 2, Y // 2, 2, Z // 2, 2).sum(axis=(3, 5, 7))


@dataclass
class ActivationCache:
    params_id: int
    params_version: int
    records: dict = field(default_factory=dict)
    consumed: bool = False


class Denoiser:
    """Forward and backward passes for one :class:`DenoiserConfig`.

    ``periodic=True`` switches convolutions to circular padding; it exists for
    equivariance tests and supports forward passes only.
    """

    def __init__(self, cfg, backend=None, periodic=False):
        self.cfg = cfg
        self.k = get_kernels(backend)
        self.periodic = periodic

    # -- convolution helpers
    def _conv(self, x, w, b, stride=1):
        if not self.periodic:
            return self.k.conv3d_forward(x, w, b, stride)
        if stride != 1:
            raise ValueError("periodic mode supports single-level configs only")
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)), mode="wrap")
        return self.k.conv3d_forward(xp, w, b, 1)[:, :, 1:-1, 1:-1, 1:-1]

    @staticmethod
    def _pointwise(x, w, b):
        return np.einsum("oc,ncxyz->noxyz", w, x) + b[None, :, None, None, None]

    def check_input(self, x_t, c):
        if x_t.shape != c.shape:
            raise ValueError(f"x_t {x_t.shape} and condition {c.shape} differ")
        if x_t.ndim != 5 or x_t.shape[1] != 8:
            raise ValueError(f"expected (N, 8, h, w, d) subbands, got {x_t.shape}")
        div = 2 ** (self.cfg.levels - 1)
        if any(n % div for n in x_t.shape[2:]):
            raise ValueError(
                f"subband dims {x_t.shape[2:]} not divisible by {div} for {self.cfg.levels} levels")

    # -- forward
    def forward(self, params, x_t, c, t, mode="eval", rng=None):
        """Predict clean subbands. Returns (prediction, cache); cache is None in eval mode.

        ``x_t`` and ``c`` are (N, 8, h, w, d) or a single (8, h, w, d) tensor;
        ``t`` is an int or length-N integer array.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        single = np.ndim(x_t) == 4
        x_t = np.asarray(x_t, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if single:
            x_t, c = x_t[None], c[None]
        self.check_input(x_t, c)
        N = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (N,))
        train = mode == "train"
        if train and self.periodic:
            raise ValueError("periodic mode is forward/eval only")
        drop = self.cfg.dropout_rate if train else 0.0
        if drop > 0 and rng is None:
            raise ValueError("train mode with dropout needs an rng")
        rec = {} if train else None
        P = params

        feats = timestep_features(t, self.cfg.time_embed_dim)
        e1 = feats @ P["temb.fc1.w"].T + P["temb.fc1.b"]
        a1, s1 = _silu(e1)
        e2 = a1 @ P["temb.fc2.w"].T + P["temb.fc2.b"]
        emb, s2 = _silu(e2)
        if train:
            rec["temb"] = (feats, e1, s1, a1, e2, s2, emb)

        x = np.concatenate([x_t, c], axis=1)
        h = self._conv(x, P["in_conv.w"], P["in_conv.b"])
        if train:
            rec["in_conv"] = x
        skips = []
        for lvl in range(self.cfg.levels):
            if lvl > 0:
                if train:
                    rec[f"down{lvl}"] = h
                h = self._conv(h, P[f"down{lvl}.w"], P[f"down{lvl}.b"], stride=2)
            for b in range(self.cfg.blocks_per_level):
                h = self._block_forward(P, f"enc{lvl}.block{b}", h, emb, drop, rng, rec)
            skips.append(h)
        for lvl in range(self.cfg.levels - 2, -1, -1):
            u = _upsample(h)
            if train:
                rec[f"up{lvl}"] = u
            h = self._conv(u, P[f"up{lvl}.w"], P[f"up{lvl}.b"]) + skips[lvl]
            for b in range(self.cfg.blocks_per_level):
                h = self._block_forward(P, f"dec{lvl}.block{b}", h, emb, drop, rng, rec)
        a, s = _silu(h)
        out = self._conv(a, P["out_conv.w"], P["out_conv.b"])
        cache = None
        if train:
            rec["out_conv"] = (h, s, a)
            rec["N"] = N
            rec["single"] = single
            cache = ActivationCache(id(params), params.version, rec)
        return (out[0] if single else out), cache

    def _block_forward(self, P, name, x, emb, drop, rng, rec):
        a1, s1 = _silu(x)
        tb = emb @ P[f"{name}.temb.w"].T + P[f"{name}.temb.b"]
        h1 = self._conv(a1, P[f"{name}.conv1.w"], P[f"{name}.conv1.b"]) + tb[:, :, None, None, None]
        a2, s2 = _silu(h1)
        keep = None
        if drop > 0:
            keep = (rng.random(a2.shape) >= drop) / (1.0 - drop)
            d = a2 * keep
        else:
            d = a2
        h2 = self._conv(d, P[f"{name}.conv2.w"], P[f"{name}.conv2.b"])
        if f"{name}.skip.w" in P.layout:
            sk = self._pointwise(x, P[f"{name}.skip.w"], P[f"{name}.skip.b"])
        else:
            sk = x
        if rec is not None:
            rec[name] = (x, s1, a1, h1, s2, keep, d)
        return h2 + sk

    # -- backward
    def backward(self, params, cache, grad_out):
        """Gradient of ``sum(grad_out * prediction)`` w.r.t. the flat parameter vector."""
        if not isinstance(cache, ActivationCache):
            raise CacheError("backward needs the cache of a train-mode forward pass")
        if cache.params_id != id(params) or cache.params_version != params.version:
            raise CacheError("stale cache: parameters changed since the forward pass")
        if cache.consumed:
            raise CacheError("cache already consumed by a previous backward pass")
        cache.consumed = True
        rec = cache.records
        g = np.asarray(grad_out, dtype=np.float64)
        if rec["single"]:
            g = g[None]
        grad = np.zeros(params.size)
        P = params

        def G(name):
            return params.grad_view(grad, name)

        feats, e1, s1, a1, e2, s2, emb = rec["temb"]
        gemb = np.zeros_like(emb)
        L = self.cfg.levels

        h, s, a = rec["out_conv"]
        ga, gw, gb = self.k.conv3d_backward(a, P["out_conv.w"], g, 1)
        G("out_conv.w")[...] += gw
        G("out_conv.b")[...] += gb
        gh = _silu_grad(h, s, ga)

        gskip = {}
        for lvl in range(L - 1):
            for b in reversed(range(self.cfg.blocks_per_level)):
                gh = self._block_backward(P, G, f"dec{lvl}.block{b}", gh, emb, gemb, rec)
            gskip[lvl] = gh
            gu, gw, gb = self.k.conv3d_backward(rec[f"up{lvl}"], P[f"up{lvl}.w"], gh, 1)
            G(f"up{lvl}.w")[...] += gw
            G(f"up{lvl}.b")[...] += gb
            gh = _upsample_grad(gu)

        for lvl in range(L - 1, -1, -1):
            if lvl < L - 1:
                gh = gh + gskip[lvl]
            for b in reversed(range(self.cfg.blocks_per_level)):
                gh = self._block_backward(P, G, f"enc{lvl}.block{b}", gh, emb, gemb, rec)
            if lvl > 0:
                gh, gw, gb = self.k.conv3d_backward(rec[f"down{lvl}"], P[f"down{lvl}.w"], gh, 2)
                G(f"down{lvl}.w")[...] += gw
                G(f"down{lvl}.b")[...] += gb

        _, gw, gb = self.k.conv3d_backward(rec["in_conv"], P["in_conv.w"], gh, 1,
                                           need_input_grad=False)
        G("in_conv.w")[...] += gw
        G("in_conv.b")[...] += gb

        ge2 = _silu_grad(e2, s2, gemb)
        G("temb.fc2.w")[...] += ge2.T @ a1
        G("temb.fc2.b")[...] += ge2.sum(axis=0)
        ge1 = _silu_grad(e1, s1, ge2 @ P["temb.fc2.w"])
        G("temb.fc1.w")[...] += ge1.T @ feats
        G("temb.fc1.b")[...] += ge1.sum(axis=0)
        return grad

    def _block_backward(self, P, G, name, g, emb, gemb, rec):
        x, s1, a1, h1, s2, keep, d = rec[name]
        gd, gw, gb = self.k.conv3d_backward(d, P[f"{name}.conv2.w"], g, 1)
        G(f"{name}.conv2.w")[...] += gw
        G(f"{name}.conv2.b")[...] += gb
        ga2 = gd * keep if keep is not None else gd
        gh1 = _silu_grad(h1, s2, ga2)
        gtb = gh1.sum(axis=(2, 3, 4))
        G(f"{name}.temb.w")[...] += gtb.T @ emb
        G(f"{name}.temb.b")[...] += gtb.sum(axis=0)
        gemb += gtb @ P[f"{name}.temb.w"]
        ga1, gw, gb = self.k.conv3d_backward(a1, P[f"{name}.conv1.w"], gh1, 1)
        G(f"{name}.conv1.w")[...] += gw
        G(f"{name}.conv1.b")[...] += gb
        gx = _silu_grad(x, s1, ga1)
        if f"{name}.skip.w" in P.layout:
            w = P[f"{name}.skip.w"]
            G(f"{name}.skip.w")[...] += np.einsum("noxyz,ncxyz->oc", g, x)
            G(f"{name}.skip.b")[...] += g.sum(axis=(0, 2, 3, 4))
            gx += np.einsum("oc,noxyz->ncxyz", w, g)
        else:
            gx += g
        return gx
