"""Conditional diffusion training in the wavelet domain."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import AdamState, Checkpoint, save_checkpoint
from .denoiser import Denoiser, DenoiserConfig, init_params
from .maskgen import VolumeDistribution, random_mask_like
from .schedule import forward_noise, linear_schedule
from .volume import Mask, Volume, apply_mask
from .wavelet import dwt3

log = logging.getLogger(__name__)

CONDITIONING_MODES = ("fixed_pathology", "random_connected")


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainingExample:
    image: Volume
    pathology_mask: Mask

    def __post_init__(self):
        if self.image.dims != self.pathology_mask.dims:
            raise ValueError(f"image {self.image.dims} and mask {self.pathology_mask.dims} differ")
        if any(d % 2 for d in self.image.dims):
            raise ValueError(f"training volumes need even dims, got {self.image.dims}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    conditioning_mode: str = "fixed_pathology"
    seed: int = 0
    # random masks may overlap the real lesion unless this is set
    random_mask_avoid_pathology: bool = False

    def __post_init__(self):
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning_mode must be one of {CONDITIONING_MODES}, "
                              f"got {self.conditioning_mode!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")


@dataclass(frozen=True)
class RunConfig:
    """Everything a config file describes: optimiser, schedule and network."""

    train: TrainConfig = field(default_factory=TrainConfig)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    net: DenoiserConfig = field(default_factory=DenoiserConfig)
    checkpoint_interval: int = 0

    def schedule(self):
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def schedule_params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def flat(self):
        d = asdict(self.train)
        d.update(T=self.T, beta_start=self.beta_start, beta_end=self.beta_end,
                 checkpoint_interval=self.checkpoint_interval)
        d.update(self.net.to_dict())
        return d


_TRAIN_KEYS = {
    "iterations": int, "batch_size": int, "learning_rate": float, "weight_decay": float,
    "adam_beta1": float, "adam_beta2": float, "adam_eps": float, "conditioning_mode": str,
    "seed": int, "random_mask_avoid_pathology": lambda s: _parse_bool(s),
}
_NET_KEYS = {
    "base_channels": int, "blocks_per_level": int, "dropout_rate": float, "time_embed_dim": int,
    "channel_multipliers": lambda s: tuple(int(v) for v in s.split(",") if v.strip()),
}
_RUN_KEYS = {"T": int, "beta_start": float, "beta_end": float, "checkpoint_interval": int}


def _parse_bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        conv = _TRAIN_KEYS.get(key) or _NET_KEYS.get(key) or _RUN_KEYS.get(key)
        if conv is None:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        train = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
        net = DenoiserConfig(**{k: v for k, v in values.items() if k in _NET_KEYS})
        run = RunConfig(train=train, net=net,
                        **{k: v for k, v in values.items() if k in _RUN_KEYS})
        run.schedule()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return run


def load_config(path):
    with open(path) as f:
        return parse_config_text(f.read(), source=str(path))


def format_config(run):
    lines = []
    for k, v in run.flat().items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(i) for i in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- pieces of one iteration ---------------------------------------------------

def build_condition(ex, mode, dist=None, rng=None, avoid_pathology=False):
    """Condition subbands: the image masked by the lesion or by a random connected region."""
    if mode == "fixed_pathology":
        return dwt3(apply_mask(ex.image, ex.pathology_mask))
    if mode == "random_connected":
        if dist is None or rng is None:
            raise ValueError("random_connected conditioning needs a volume distribution and an rng")
        allowed = ~ex.pathology_mask.data if avoid_pathology else None
        m = random_mask_like(ex.image.dims, dist, rng, allowed=allowed)
        return dwt3(apply_mask(ex.image, m))
    raise ValueError(f"unknown conditioning mode {mode!r}")


def loss_wavelet_mse(pred, target):
    """Mean squared error over all coefficients, and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    K = diff.size
    return float(np.sum(diff * diff) / K), (2.0 / K) * diff


def adamw_step(params, grads, state, cfg):
    """Decoupled-weight-decay Adam update, in place on ``params.vector``."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.vector.shape or state.m.shape != g.shape:
        raise ValueError("gradient / optimizer state shape mismatch")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteError(f"non-finite gradient at parameter index {bad}; step skipped")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    k = state.step
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** k)
    v_hat = state.v / (1.0 - b2 ** k)
    theta = params.vector
    theta -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * theta)
    params.touch()
    return params, state


def sample_timesteps(rng, T, n):
    return rng.integers(1, T + 1, size=n)


def _streams(seed):
    ss = np.random.SeedSequence(int(seed))
    init, data, drop = ss.spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(data), np.random.default_rng(drop))


def write_loss_csv(losses, path):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])
    os.replace(tmp, path)


def train(dataset, run, dist=None, checkpoint_path=None, backend=None, progress=None):
    """Train a denoiser; returns (Checkpoint, per-iteration losses).

    With ``checkpoint_path`` a checkpoint is written every
    ``run.checkpoint_interval`` iterations (if > 0) and at the end. A
    non-finite loss raises :class:`NonFiniteError` and leaves the last written
    checkpoint in place.
    """
    if not dataset:
        raise ValueError("empty dataset")
    dims = dataset[0].image.dims
    for ex in dataset:
        if ex.image.dims != dims:
            raise ValueError(f"inconsistent dims in dataset: {ex.image.dims} vs {dims}")
    cfg = run.train
    if cfg.conditioning_mode == "random_connected" and dist is None:
        raise ConfigError("random_connected conditioning needs a reference volume distribution")
    sched = run.schedule()
    net = Denoiser(run.net, backend=backend)
    init_rng, rng, drop_rng = _streams(cfg.seed)
    params = init_params(run.net, init_rng)
    state = AdamState.zeros(params.size)

    x0_all = np.stack([dwt3(ex.image) for ex in dataset])
    net.check_input(x0_all[:1], x0_all[:1])
    fixed_c = None
    if cfg.conditioning_mode == "fixed_pathology":
        fixed_c = np.stack([build_condition(ex, "fixed_pathology") for ex in dataset])

    def snapshot(done):
        return Checkpoint(run.net, run.schedule_params(), params.copy(), AdamState(
            state.m.copy(), state.v.copy(), state.step),
            extra={"train": asdict(cfg), "iterations_done": done})

    losses = []
    B = cfg.batch_size
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(len(dataset), size=B)
        t = sample_timesteps(rng, sched.T, B)
        x0 = x0_all[idx]
        eps = rng.standard_normal(x0.shape)
        if fixed_c is not None:
            c = fixed_c[idx]
        else:
            c = np.stack([build_condition(dataset[i], "random_connected", dist, rng,
                                          cfg.random_mask_avoid_pathology) for i in idx])
        x_t = forward_noise(x0, t, eps, sched)
        pred, cache = net.forward(params, x_t, c, t, "train", drop_rng)
        loss, gpred = loss_wavelet_mse(pred, x0)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at iteration {it}")
        grads = net.backward(params, cache, gpred)
        adamw_step(params, grads, state, cfg)
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
        if checkpoint_path and run.checkpoint_interval > 0 and it % run.checkpoint_interval == 0:
            save_checkpoint(snapshot(it), checkpoint_path)
    ckpt = snapshot(cfg.iterations)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, losses


__all__ = [
    "TrainingExample", "TrainConfig", "RunConfig", "ConfigError", "NonFiniteError",
    "parse_config_text", "load_config", "format_config", "build_condition",
    "loss_wavelet_mse", "adamw_step", "train", "write_loss_csv", "VolumeDistribution",
]
