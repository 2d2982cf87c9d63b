"""DDIM sampling with the coarse-edit latent initialization, plus the
SDEdit-style baseline mode."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from ..core import BinaryMask, RasterImage, from_diffusion_space, to_diffusion_space
from .model import DualDenoiser, SingleDenoiser
from .schedule import NoiseSchedule, q_sample
from .unet import FeatureStack

DEFAULT_STEPS = 50
SDEDIT_STRENGTH = 0.4


def ddim_timesteps(t_start: int, steps: int) -> np.ndarray:
    """Evenly strided integer steps from t_start down to 0 (inclusive ends).

    The model is evaluated at the first `steps` entries; the final entry 0
    only receives the last update.
    """
    return np.unique(np.round(np.linspace(t_start, 0, steps + 1)).astype(np.int64))[::-1]


def _ddim_loop(denoise, x: Tensor, ts: np.ndarray, schedule: NoiseSchedule,
               eta: float, generator: torch.Generator, clip_x0: bool = True) -> Tensor:
    abar = schedule.alpha_bar
    for i in range(len(ts) - 1):
        t, t_next = int(ts[i]), int(ts[i + 1])
        t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
        eps_hat = denoise(x, t_batch)
        a_t, a_n = abar[t], abar[t_next]
        x0_hat = (x - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
        if clip_x0:
            # pixel-space images are bounded; clamping the prediction keeps the
            # 1/sqrt(alpha_bar) amplification at the noisy end from diverging
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        if eta > 0.0:
            sigma = eta * np.sqrt((1.0 - a_n) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_n)
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            x = (np.sqrt(a_n) * x0_hat
                 + np.sqrt(max(1.0 - a_n - sigma ** 2, 0.0)) * eps_hat + sigma * noise)
        else:
            x = np.sqrt(a_n) * x0_hat + np.sqrt(1.0 - a_n) * eps_hat
    return x


def _dual_denoise_fn(model: DualDenoiser, reference: Tensor, coarse: Tensor,
                     mask: Tensor, generator: torch.Generator):
    """Per-step closure: re-extract detail features at the current t with a
    fresh noise draw, then run the synthesizer."""

    def denoise(x, t_batch):
        eps_ref = torch.randn(reference.shape, generator=generator, dtype=reference.dtype)
        features = model.extract_details(reference, mask, t_batch, eps_ref)
        return model.predict_eps(x, coarse, mask, t_batch, features)

    return denoise


@torch.no_grad()
def ddim_sample_batch(model: DualDenoiser, reference: Tensor, coarse: Tensor,
                      mask: Tensor, steps: int = DEFAULT_STEPS, eta: float = 0.0,
                      seed: int = 0) -> Tensor:
    """Sample a batch of fixups; tensors are (B, C, H, W) in diffusion space.

    Sampling starts from the coarse edit under near-total, schedule-consistent
    noise at t = T-1 rather than from pure Gaussian noise, then follows
    deterministic DDIM updates (eta=0), re-extracting detail features at
    every step.
    """
    schedule = model.schedule
    if steps > schedule.T:
        raise ValueError(f"steps {steps} > schedule T {schedule.T}")
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    t_start = schedule.T - 1
    eps = torch.randn(coarse.shape, generator=generator, dtype=coarse.dtype)
    t0 = torch.full((coarse.shape[0],), t_start, dtype=torch.long)
    x = q_sample(coarse, t0, eps, schedule)
    denoise = _dual_denoise_fn(model, reference, coarse, mask, generator)
    ts = ddim_timesteps(t_start, steps)
    return _ddim_loop(denoise, x, ts, schedule, eta, generator)


def ddim_sample(model: DualDenoiser, reference: RasterImage, coarse: RasterImage,
                mask: BinaryMask, steps: int = DEFAULT_STEPS, eta: float = 0.0,
                seed: int = 0) -> RasterImage:
    """Single-image fixup at the editing-space level."""
    ref = _to_tensor(to_diffusion_space(reference))
    crs = _to_tensor(to_diffusion_space(coarse))
    msk = torch.from_numpy(mask.bits.astype(np.float32))[None, None]
    out = ddim_sample_batch(model, ref, crs, msk, steps=steps, eta=eta, seed=seed)
    return _to_image(out)


@torch.no_grad()
def sdedit_sample_batch(model, coarse: Tensor, strength: float = SDEDIT_STRENGTH,
                        steps: int = DEFAULT_STEPS, seed: int = 0,
                        mask: Tensor | None = None) -> Tensor:
    """Noise the coarse edit `strength` of the way along the schedule, then
    denoise without any detail features.

    Accepts either a SingleDenoiser or a DualDenoiser; for the latter the
    cross-attention sites are bypassed entirely (no reference information).
    """
    if not (0.0 < strength <= 1.0):
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    schedule = model.schedule
    model.eval()
    t_start = int(round(strength * schedule.T))
    generator = torch.Generator().manual_seed(seed)
    eps = torch.randn(coarse.shape, generator=generator, dtype=coarse.dtype)
    t0 = torch.full((coarse.shape[0],), t_start, dtype=torch.long)
    x = q_sample(coarse, t0, eps, schedule)

    if isinstance(model, SingleDenoiser):
        def denoise(xt, t_batch):
            return model.predict_eps(xt, t_batch)
    else:
        if mask is None:
            mask = torch.zeros_like(coarse[:, :1])
        def denoise(xt, t_batch):
            return model.predict_eps(xt, coarse, mask, t_batch, features=None)

    n_steps = min(steps, max(t_start, 1))
    ts = ddim_timesteps(t_start, n_steps)
    return _ddim_loop(denoise, x, ts, schedule, eta=0.0, generator=generator)


def sdedit_sample(model, coarse: RasterImage, strength: float = SDEDIT_STRENGTH,
                  steps: int = DEFAULT_STEPS, seed: int = 0,
                  mask: BinaryMask | None = None) -> RasterImage:
    crs = _to_tensor(to_diffusion_space(coarse))
    msk = None
    if mask is not None:
        msk = torch.from_numpy(mask.bits.astype(np.float32))[None, None]
    out = sdedit_sample_batch(model, crs, strength=strength, steps=steps, seed=seed, mask=msk)
    return _to_image(out)


def _to_tensor(image: RasterImage) -> Tensor:
    return torch.from_numpy(image.data.copy()).permute(2, 0, 1)[None]


def _to_image(batch: Tensor) -> RasterImage:
    arr = batch[0].permute(1, 2, 0).numpy()
    return from_diffusion_space(RasterImage(arr))
