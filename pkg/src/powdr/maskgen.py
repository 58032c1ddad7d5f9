"""Random 6-connected masks with lesion-like voxel counts."""
from collections import deque
from dataclasses import dataclass

import numpy as np

from ._backend import get_kernels
from .volume import Mask


@dataclass(frozen=True)
class VolumeDistribution:
    """Empirical reference voxel counts, resampled with multiplicative jitter."""

    samples: tuple
    jitter_fraction: float = 0.1

    def __post_init__(self):
        samples = tuple(int(s) for s in self.samples)
        if not samples:
            raise ValueError("volume distribution needs at least one sample")
        if min(samples) < 1:
            raise ValueError("reference volumes must be positive")
        if self.jitter_fraction < 0:
            raise ValueError("jitter_fraction must be non-negative")
        object.__setattr__(self, "samples", samples)


def load_distribution(path, jitter_fraction=0.1):
    """One integer per line; blank lines and ``#`` comments are ignored."""
    values = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected an integer, got {line!r}") from None
    return VolumeDistribution(tuple(values), jitter_fraction)


def sample_target_volume(dist, rng):
    ref = dist.samples[rng.integers(len(dist.samples))]
    u = rng.uniform(-dist.jitter_fraction, dist.jitter_fraction)
    return max(1, int(round(ref * (1.0 + u))))


def grow_connected_mask(dims, target_voxels, rng, allowed=None, backend=None):
    """Grow a single 6-connected region of exactly ``target_voxels`` voxels.

    The seed is uniform over the grid (or over ``allowed`` when given); each
    step admits a uniformly chosen voxel from the current face-neighbour
    frontier. With ``allowed``, growth that gets boxed in before reaching the
    target raises ``RuntimeError``; callers may retry with a new seed.
    """
    dims = tuple(int(d) for d in dims)
    n = dims[0] * dims[1] * dims[2]
    target_voxels = int(target_voxels)
    if target_voxels < 1:
        raise ValueError("target_voxels must be >= 1")
    if allowed is None:
        if target_voxels > n:
            raise ValueError(f"target {target_voxels} exceeds grid size {n}")
        ok = np.ones(dims, dtype=np.uint8)
        seed = int(rng.integers(n))
    else:
        ok = np.ascontiguousarray(np.asarray(allowed, dtype=bool), dtype=np.uint8)
        if ok.shape != dims:
            raise ValueError(f"allowed region {ok.shape} does not match dims {dims}")
        idx = np.flatnonzero(ok)
        if target_voxels > idx.size:
            raise ValueError(f"target {target_voxels} exceeds allowed region size {idx.size}")
        seed = int(idx[rng.integers(idx.size)])
    draws = rng.random(max(target_voxels - 1, 1))
    grown = get_kernels(backend).grow_region(ok, seed, target_voxels, draws)
    count = int(grown.sum())
    if count != target_voxels:
        raise RuntimeError(f"region boxed in at {count} of {target_voxels} voxels")
    return Mask(grown.astype(bool))


_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def check_6_connected(m):
    """True iff the mask is non-empty and one face-connected component (BFS)."""
    data = np.asarray(m.data if isinstance(m, Mask) else m, dtype=bool)
    pts = np.argwhere(data)
    if len(pts) == 0:
        return False
    seen = np.zeros_like(data)
    start = tuple(pts[0])
    seen[start] = True
    queue = deque([start])
    reached = 1
    shape = data.shape
    while queue:
        x, y, z = queue.popleft()
        for dx, dy, dz in _FACE_OFFSETS:
            nb = (x + dx, y + dy, z + dz)
            if all(0 <= nb[i] < shape[i] for i in range(3)) and data[nb] and not seen[nb]:
                seen[nb] = True
                reached += 1
                queue.append(nb)
    return reached == len(pts)


def random_mask_like(dims, dist, rng, allowed=None, max_tries=20):
    """Draw a target volume from ``dist`` and grow a mask of that size."""
    target = sample_target_volume(dist, rng)
    if allowed is None:
        target = min(target, int(np.prod(dims)))
        return grow_connected_mask(dims, target, rng)
    for _ in range(max_tries):
        try:
            return grow_connected_mask(dims, target, rng, allowed=allowed)
        except RuntimeError:
            continue
    raise RuntimeError(f"could not grow a {target}-voxel region inside the allowed area")
