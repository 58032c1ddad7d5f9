"""Conditional DDPM reverse process in the wavelet domain."""
import json
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import file_sha256, load_checkpoint
from .denoiser import Denoiser
from .schedule import linear_schedule
from .volume import Mask, Volume, apply_mask, write_volume
from .wavelet import dwt3, idwt3


class ContractError(ValueError):
    """Request incompatible with the checkpoint (schedule or shape)."""


@dataclass(frozen=True)
class SampleRequest:
    condition_image: Volume
    condition_mask: Mask
    steps: int = 1000
    seed: int = 0
    hard_composite: bool = False
    repeats: int = 1
    clamp: bool = False

    def __post_init__(self):
        if self.condition_image.dims != self.condition_mask.dims:
            raise ValueError("condition image and mask dims differ")
        if self.condition_mask.count == 0:
            raise ValueError("condition mask is empty")
        if self.steps < 1 or self.repeats < 1:
            raise ValueError("steps and repeats must be positive")


def posterior_coefficients(sched, t):
    """(weight on x0, weight on x_t, variance) of q(x_{t-1} | x_t, x0)."""
    sched.check_step(t)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    beta = sched.beta[t]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct, var


def reverse_step(x_t, pred_x0, t, sched, rng=None, noise=None):
    """One ancestral step; exactly the posterior mean at ``t = 1``."""
    c0, ct, var = posterior_coefficients(sched, t)
    mean = c0 * np.asarray(pred_x0, dtype=np.float64) + ct * np.asarray(x_t, dtype=np.float64)
    if t == 1:
        return mean
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    return mean + np.sqrt(var) * noise


def repeat_rng(seed, repeat):
    """Counter-based stream for one repeat, independent of the others."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(repeat)])))


def reverse_chain(predict, c, sched, rngs, steps=None):
    """Run x_T ~ N(0, I) down to x_0 for a batch; one rng per batch item.

    ``predict(x_t, c, t)`` returns the clean-subband estimate for the batch.
    """
    steps = sched.T if steps is None else steps
    shape = c.shape[1:]
    x = np.stack([r.standard_normal(shape) for r in rngs])
    for t in range(steps, 0, -1):
        pred = predict(x, c, t)
        noise = None
        if t > 1:
            noise = np.stack([r.standard_normal(shape) for r in rngs])
        x = reverse_step(x, pred, t, sched, noise=noise)
    return x


def sample(checkpoint, req, backend=None, batch=None):
    """Draw ``req.repeats`` volumes for one condition; returns a list of Volumes.

    ``checkpoint`` is a loaded :class:`~powdr.checkpoint.Checkpoint` or a path.
    """
    if isinstance(checkpoint, (str, os.PathLike)):
        checkpoint = load_checkpoint(checkpoint)
    sp = checkpoint.schedule
    if int(sp["T"]) != req.steps:
        raise ContractError(f"requested {req.steps} steps but the checkpoint schedule has T={sp['T']}")
    sched = linear_schedule(sp["T"], sp["beta_start"], sp["beta_end"])
    net = Denoiser(checkpoint.net_cfg, backend=backend)
    params = checkpoint.params
    c1 = dwt3(apply_mask(req.condition_image, req.condition_mask))
    try:
        net.check_input(c1[None], c1[None])
    except ValueError as exc:
        raise ContractError(str(exc)) from None

    def predict(x, c, t):
        out, _ = net.forward(params, x, c, t, "eval")
        return out

    batch = req.repeats if batch is None else batch
    out = []
    for start in range(0, req.repeats, batch):
        ks = range(start, min(start + batch, req.repeats))
        rngs = [repeat_rng(req.seed, k) for k in ks]
        c = np.broadcast_to(c1, (len(rngs),) + c1.shape)
        x0 = reverse_chain(predict, c, sched, rngs)
        for y in idwt3(x0):
            if req.hard_composite:
                m = req.condition_mask.data
                y[m] = req.condition_image.data[m]
            if req.clamp:
                y = np.clip(y, 0.0, 1.0)
            out.append(Volume(y.astype(np.float32), req.condition_image.spacing))
    return out


def write_samples(volumes, prefix, meta):
    """``<prefix>_r<k>.pvol`` per repeat plus ``<prefix>.json``; returns the paths."""
    paths = []
    for k, v in enumerate(volumes):
        path = f"{prefix}_r{k}.pvol"
        write_volume(v, path)
        paths.append(path)
    sidecar = dict(meta)
    sidecar["files"] = [os.path.basename(p) for p in paths]
    with open(f"{prefix}.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return paths


def sidecar_meta(checkpoint_path, req):
    return {
        "checkpoint_sha256": file_sha256(checkpoint_path),
        "seed": req.seed,
        "repeats": req.repeats,
        "steps": req.steps,
        "hard_composite": req.hard_composite,
        "clamp": req.clamp,
    }
