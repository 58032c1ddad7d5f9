"""Linear noise schedule and the closed-form forward diffusion step."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step: entry 0 is the ``t = 0`` convention.

    ``beta[0]`` and ``alpha[0]`` are unused placeholders (0 and 1);
    ``alpha_bar[0] = 1``.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_step(self, t):
        if not (1 <= int(t) <= self.T):
            raise ValueError(f"step t={t} out of range [1, {self.T}]")


def linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start < beta_end < 1):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        beta[1] = beta_start
    else:
        k = np.arange(T, dtype=np.float64)
        beta[1:] = beta_start + k / (T - 1) * (beta_end - beta_start)
        beta[T] = beta_end
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1, dtype=np.float64)
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar)


def forward_noise(x0, t, eps, sched):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be an int or an integer array with one entry per leading batch item.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"step out of range [1, {sched.T}]")
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
