"""Variance-preserving noise schedule and the forward noising process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_T = 1000
DEFAULT_ALPHA_1 = 0.9999
DEFAULT_ALPHA_T = 0.98


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alphas and their cumulative products, with index 0 a sentinel.

    alpha[0] = alpha_bar[0] = 1 so that t=0 means "no noise"; the process
    proper runs over t = 1..T.
    """

    T: int
    alpha: np.ndarray  # (T+1,)
    alpha_bar: np.ndarray  # (T+1,)

    def __post_init__(self):
        assert self.alpha.shape == (self.T + 1,) and self.alpha_bar.shape == (self.T + 1,)

    def sqrt_alpha_bar(self, t):
        return np.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_alpha_bar(self, t):
        return np.sqrt(1.0 - self.alpha_bar[t])


def make_schedule(T: int = DEFAULT_T, alpha_1: float = DEFAULT_ALPHA_1,
                  alpha_T: float = DEFAULT_ALPHA_T) -> NoiseSchedule:
    """Linear per-step alphas from alpha_1 at t=1 to alpha_T at t=T."""
    if not (0.0 < alpha_T <= alpha_1 < 1.0):
        raise ValueError(f"need 0 < alpha_T <= alpha_1 < 1, got {alpha_1}, {alpha_T}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    alpha = np.ones(T + 1, dtype=np.float64)
    if T == 1:
        alpha[1] = alpha_1
    else:
        alpha[1:] = np.linspace(alpha_1, alpha_T, T)
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=alpha_bar)


def _gather(coeff: np.ndarray, t, like):
    """Index schedule coefficients by t and shape them to broadcast over `like`."""
    if isinstance(like, torch.Tensor):
        tt = torch.as_tensor(t, device=like.device)
        table = torch.as_tensor(coeff, dtype=like.dtype, device=like.device)
        out = table[tt]
        while out.dim() < like.dim():
            out = out.unsqueeze(-1)
        return out
    out = np.asarray(coeff)[np.asarray(t)]
    return np.reshape(out, np.shape(out) + (1,) * (np.ndim(like) - np.ndim(out)))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Noise x0 to step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works on torch tensors (batched, with per-element t) and numpy arrays
    alike; t=0 returns x0 exactly.
    """
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if t_arr.min() < 0 or t_arr.max() > schedule.T:
        raise ValueError(f"t out of range [0, {schedule.T}]: {t_arr.min()}..{t_arr.max()}")
    if isinstance(x0, torch.Tensor) and eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    c_sig = _gather(np.sqrt(schedule.alpha_bar), t, x0)
    c_noise = _gather(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
    return c_sig * x0 + c_noise * eps
