"""Procedural brain-like phantoms with a bright 6-connected lesion.

Intensity levels: background 0, head 0.5, ventricle 0.2, lesion 0.85, plus an
optional smooth texture inside the head.
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from .maskgen import grow_connected_mask
from .trainer import TrainingExample
from .volume import Volume, read_mask, read_volume, write_volume

BACKGROUND, VENTRICLE, TISSUE, LESION = 0.0, 0.2, 0.5, 0.85


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (16, 16, 16)
    n_cases: int = 32
    lesion_volume_range: tuple = (10, 60)
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 2 or d % 2 for d in dims):
            raise ValueError(f"phantom dims must be three even sizes >= 2, got {self.dims}")
        lo, hi = (int(v) for v in self.lesion_volume_range)
        if not (1 <= lo <= hi):
            raise ValueError(f"bad lesion volume range {self.lesion_volume_range}")
        if not (0.0 <= self.texture_amplitude <= 0.5):
            raise ValueError("texture_amplitude must lie in [0, 0.5]")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "lesion_volume_range", (lo, hi))


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _ellipsoid(coords, center, semi):
    r = sum(((c - c0) / s) ** 2 for c, c0, s in zip(coords, center, semi))
    return r <= 1.0


def generate_phantom(spec, case_index, max_retries=8):
    """Deterministic phantom for ``(spec.seed, case_index)``."""
    rng = np.random.default_rng([spec.seed, case_index])
    dims = spec.dims
    coords = _grid(dims)
    center = [(n - 1) / 2.0 for n in dims]
    semi = [n * rng.uniform(0.35, 0.45) for n in dims]
    head = _ellipsoid(coords, center, semi)

    v_semi = [s * rng.uniform(0.25, 0.4) for s in semi]
    v_center = [c + s * rng.uniform(-0.15, 0.15) for c, s in zip(center, semi)]
    ventricle = _ellipsoid(coords, v_center, v_semi) & head

    image = np.zeros(dims)
    image[head] = TISSUE
    image[ventricle] = VENTRICLE
    if spec.texture_amplitude > 0:
        texture = np.zeros(dims)
        weights = rng.uniform(-1.0, 1.0, size=3)
        weights /= np.abs(weights).sum()
        for w in weights:
            freq = rng.integers(0, 3, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(2 * np.pi * f * c / n for f, c, n in zip(freq, coords, dims))
            texture += w * np.cos(arg + phase)
        image[head] += spec.texture_amplitude * texture[head]

    lo, hi = spec.lesion_volume_range
    head_size = int(head.sum())
    target = int(rng.integers(lo, hi + 1))
    if target > head_size:
        raise ValueError(f"lesion of {target} voxels cannot fit in a head of {head_size}")
    lesion = None
    for _ in range(max_retries):
        try:
            lesion = grow_connected_mask(dims, target, rng, allowed=head)
            break
        except RuntimeError:
            target = max(lo, target // 2)
    if lesion is None:
        raise RuntimeError(f"case {case_index}: lesion could not be placed after {max_retries} tries")
    image[lesion.data] = LESION
    image = np.clip(image, 0.0, 1.0)
    return TrainingExample(Volume(image.astype(np.float32)), lesion)


def head_region(image):
    return np.asarray(image.data if isinstance(image, Volume) else image) > 0


def write_phantoms(spec, out_dir):
    """Write ``case<i>.pvol``, ``case<i>_mask.pvol``, ``manifest.json`` and
    ``lesion_volumes.txt`` (one voxel count per line)."""
    os.makedirs(out_dir, exist_ok=True)
    cases = []
    for i in range(spec.n_cases):
        ex = generate_phantom(spec, i)
        img_name, mask_name = f"case{i}.pvol", f"case{i}_mask.pvol"
        write_volume(ex.image, os.path.join(out_dir, img_name))
        write_volume(ex.pathology_mask, os.path.join(out_dir, mask_name))
        cases.append({"index": i, "image": img_name, "mask": mask_name,
                      "lesion_voxels": ex.pathology_mask.count})
    manifest = {
        "dims": list(spec.dims),
        "seed": spec.seed,
        "lesion_volume_range": list(spec.lesion_volume_range),
        "texture_amplitude": spec.texture_amplitude,
        "cases": cases,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    with open(os.path.join(out_dir, "lesion_volumes.txt"), "w") as f:
        f.writelines(f"{c['lesion_voxels']}\n" for c in cases)
    return manifest


def load_dataset(data_dir):
    """Read a phantom directory: returns (examples, manifest)."""
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    with open(path) as f:
        manifest = json.load(f)
    examples = []
    for case in manifest["cases"]:
        img = read_volume(os.path.join(data_dir, case["image"]))
        mask = read_mask(os.path.join(data_dir, case["mask"]))
        examples.append(TrainingExample(img, mask))
    if not examples:
        raise ValueError(f"{data_dir} lists no cases")
    return examples, manifest

