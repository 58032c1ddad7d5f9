"""Similarity and diversity metrics for repeated samples of one condition."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Mask, Volume

# Wang et al. multiscale weights for scales 1..3, renormalised to sum to 1
_MS_WEIGHTS_5 = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
MS_WEIGHTS = _MS_WEIGHTS_5[:3] / _MS_WEIGHTS_5[:3].sum()
KL_SMOOTHING = 1e-10


def _flat(v):
    return np.asarray(v.data if isinstance(v, (Volume, Mask)) else v, dtype=np.float64)


def cosine_similarity(a, b):
    a, b = _flat(a), _flat(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    a, b = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def kl_divergence(p, q):
    """Sum p log(p / q) over bins with p > 0 (natural log)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def histogram_kl(a, b, bins=50):
    """KL between intensity histograms of ``a`` and ``b`` over their joint range."""
    a, b = _flat(a).ravel(), _flat(b).ravel()
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = ha + KL_SMOOTHING
    q = hb + KL_SMOOTHING
    return max(0.0, kl_divergence(p / p.sum(), q / q.sum()))


# -- SSIM ---------------------------------------------------------------------

def gaussian_window(size=7, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x, win):
    for axis in range(3):
        x = ndimage.correlate1d(x, win, axis=axis, mode="reflect")
    return x


def ssim_maps(a, b, data_range=1.0, win_size=7, sigma=1.5):
    """Local luminance and contrast-structure maps (same shape as the input)."""
    C1 = (0.01 * data_range) ** 2
    C2 = (0.03 * data_range) ** 2
    win = gaussian_window(win_size, sigma)
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    saa = _filter(a * a, win) - mu_a ** 2
    sbb = _filter(b * b, win) - mu_b ** 2
    sab = _filter(a * b, win) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + C1) / (mu_a ** 2 + mu_b ** 2 + C1)
    cs = (2 * sab + C2) / (saa + sbb + C2)
    return lum, cs


def _region(mask, region, shape):
    if region == "all" or mask is None:
        if region != "all":
            raise ValueError(f"region={region!r} needs a mask")
        return np.ones(shape, dtype=bool)
    m = _flat(mask) > 0.5
    if m.shape != shape:
        raise ValueError(f"mask dims {m.shape} do not match volume {shape}")
    if region == "inside":
        sel = m
    elif region == "outside":
        sel = ~m
    else:
        raise ValueError(f"region must be inside, outside or all, got {region!r}")
    if not sel.any():
        raise ValueError(f"region {region!r} is empty")
    return sel


def _pool(x):
    X, Y, Z = (n // 2 * 2 for n in x.shape)
    x = x[:X, :Y, :Z]
    return x.reshape(X // 2, 2, Y // 2, 2, Z // 2, 2).mean(axis=(1, 3, 5))


def ssim(a, b, mask=None, region="all", data_range=1.0):
    """Single-scale 3D SSIM averaged over window centres in the selected region."""
    a, b = _flat(a), _flat(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    sel = _region(mask, region, a.shape)
    lum, cs = ssim_maps(a, b, data_range)
    return float(np.mean((lum * cs)[sel]))


def _signed_pow(x, w):
    return np.sign(x) * np.abs(x) ** w


def ms_ssim(a, b, mask=None, region="all", scales=3, data_range=1.0):
    """3-scale 3D MS-SSIM with optional inside/outside-mask restriction.

    Coarser scales average-pool volume and mask by 2; a coarse voxel belongs to
    the inside region if any fine voxel was inside, to the outside region if
    any was outside. Negative terms keep their sign under the fractional
    exponents so the result stays in [-1, 1].
    """
    a, b = _flat(a), _flat(b)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < 2 ** (scales + 1):
        raise ValueError(f"dims {a.shape} too small for {scales} scales (need >= {2 ** (scales + 1)})")
    weights = MS_WEIGHTS if scales == 3 else _MS_WEIGHTS_5[:scales] / _MS_WEIGHTS_5[:scales].sum()
    sel = _region(mask, region, a.shape)
    frac = sel.astype(np.float64)
    result = 1.0
    for j in range(scales):
        lum, cs = ssim_maps(a, b, data_range)
        cs_mean = float(np.mean(cs[sel]))
        if j == scales - 1:
            lum_mean = float(np.mean(lum[sel]))
            result *= _signed_pow(lum_mean * cs_mean, weights[j])
        else:
            result *= _signed_pow(cs_mean, weights[j])
            a, b, frac = _pool(a), _pool(b), _pool(frac)
            sel = frac > 0
    return float(result)


# -- diversity ----------------------------------------------------------------

@dataclass
class DiversityReport:
    n_samples: int
    pair_count: int
    cosine_mean: float
    cosine_std: float
    kl_mean: float
    kl_std: float
    voxelwise_mean: np.ndarray
    voxelwise_std: np.ndarray
    pairs: list
    outside_cosine_mean: float | None = None
    outside_cosine_std: float | None = None
    outside_kl_mean: float | None = None
    outside_kl_std: float | None = None

    def summary(self):
        d = {k: getattr(self, k) for k in (
            "n_samples", "pair_count", "cosine_mean", "cosine_std", "kl_mean", "kl_std",
            "outside_cosine_mean", "outside_cosine_std", "outside_kl_mean", "outside_kl_std")}
        d["std_map_mean"] = float(self.voxelwise_std.mean())
        return d


def diversity_report(samples, mask=None, bins=50):
    """Voxelwise mean/std plus mean +- std of all N(N-1)/2 pairwise cosine and KL values."""
    arrays = [_flat(s) for s in samples]
    if len(arrays) < 2:
        raise ValueError("diversity needs at least 2 samples")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("samples have different dims")
    stack = np.stack(arrays)
    # deviations from the first sample keep the std map exactly 0 for duplicates
    dev = stack - stack[0]
    outside = None
    if mask is not None:
        outside = ~(_flat(mask) > 0.5)
        if outside.shape != shape:
            raise ValueError("mask dims do not match samples")
    pairs = []
    for i, j in itertools.combinations(range(len(arrays)), 2):
        row = {"i": i, "j": j,
               "cosine": cosine_similarity(arrays[i], arrays[j]),
               "kl": histogram_kl(arrays[i], arrays[j], bins)}
        if outside is not None:
            row["cosine_outside"] = cosine_similarity(arrays[i][outside], arrays[j][outside])
            row["kl_outside"] = histogram_kl(arrays[i][outside], arrays[j][outside], bins)
        pairs.append(row)
    cos = np.array([p["cosine"] for p in pairs])
    kl = np.array([p["kl"] for p in pairs])
    rep = DiversityReport(
        n_samples=len(arrays), pair_count=len(pairs),
        cosine_mean=float(cos.mean()), cosine_std=float(cos.std()),
        kl_mean=float(kl.mean()), kl_std=float(kl.std()),
        voxelwise_mean=stack[0] + dev.mean(axis=0), voxelwise_std=dev.std(axis=0),
        pairs=pairs,
    )
    if outside is not None:
        co = np.array([p["cosine_outside"] for p in pairs])
        ko = np.array([p["kl_outside"] for p in pairs])
        rep.outside_cosine_mean, rep.outside_cosine_std = float(co.mean()), float(co.std())
        rep.outside_kl_mean, rep.outside_kl_std = float(ko.mean()), float(ko.std())
    return rep
