"""Joint training of the synthesizer and detail extractor."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ..dataset import TrainingPair
from .model import DualDenoiser, SingleDenoiser
from .schedule import q_sample

DEFAULT_LR = 1e-4  # desk-scale default; drop to 1e-5 for long runs
ADAM_BETAS = (0.9, 0.999)


@dataclass
class TrainReport:
    steps: int
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def smoothed(self, window: int = 50) -> list[float]:
        out = []
        for i in range(len(self.losses)):
            lo = max(0, i - window + 1)
            out.append(float(np.mean(self.losses[lo:i + 1])))
        return out


def pairs_to_tensors(pairs: list[TrainingPair]) -> dict[str, torch.Tensor]:
    """Stack training pairs into diffusion-space tensors."""

    def stack(images):
        arr = np.stack([im.data for im in images]).astype(np.float32)
        return torch.from_numpy(arr).permute(0, 3, 1, 2) * 2.0 - 1.0

    masks = np.stack([p.mask.bits for p in pairs]).astype(np.float32)
    return {
        "reference": stack([p.reference for p in pairs]),
        "target": stack([p.target for p in pairs]),
        "coarse": stack([p.coarse for p in pairs]),
        "mask": torch.from_numpy(masks)[:, None],
    }


def train_step(model: DualDenoiser, batch: dict[str, torch.Tensor],
               optimizer: torch.optim.Optimizer, generator: torch.Generator) -> float:
    """One joint gradient step; returns the scalar loss.

    Per element: t ~ U{1..T}, noise the target, extract detail features with
    an independent noise draw, predict, and regress the target noise.
    Gradients flow through both networks.
    """
    if batch["target"].shape[0] == 0:
        raise ValueError("empty batch")
    model.train()
    schedule = model.schedule
    b = batch["target"].shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(batch["target"].shape, generator=generator)
    eps_detail = torch.randn(batch["reference"].shape, generator=generator)

    x_t = q_sample(batch["target"], t, eps, schedule)
    features = model.extract_details(batch["reference"], batch["mask"], t, eps_detail)
    eps_hat = model.predict_eps(x_t, batch["coarse"], batch["mask"], t, features)
    loss = torch.mean((eps - eps_hat) ** 2)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite training loss {loss.item()} "
                           f"(t range {t.min().item()}..{t.max().item()})")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train_step_single(model: SingleDenoiser, batch: dict[str, torch.Tensor],
                      optimizer: torch.optim.Optimizer, generator: torch.Generator) -> float:
    """Unconditional denoising step for the SDEdit-style baseline."""
    model.train()
    schedule = model.schedule
    b = batch["target"].shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(batch["target"].shape, generator=generator)
    x_t = q_sample(batch["target"], t, eps, schedule)
    loss = torch.mean((eps - model.predict_eps(x_t, t)) ** 2)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite training loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train_model(model, pairs: list[TrainingPair], steps: int, batch_size: int = 16,
                lr: float = DEFAULT_LR, seed: int = 0,
                log_every: int = 0) -> TrainReport:
    """Seeded training loop with deterministic batch order.

    Works for both the dual model and the unconditional baseline; batches are
    drawn with replacement from `pairs` using a numpy RNG separate from the
    torch noise generator so the two streams cannot alias.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    tensors = pairs_to_tensors(pairs)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS)
    order_rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed + 1)
    step_fn = train_step if isinstance(model, DualDenoiser) else train_step_single

    report = TrainReport(steps=steps)
    t0 = time.time()
    for step in range(steps):
        idx = order_rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        batch = {k: v[idx] for k, v in tensors.items()}
        loss = step_fn(model, batch, optimizer, generator)
        report.losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(report.losses[-log_every:]))
            print(f"step {step + 1}/{steps}  loss {recent:.4f}  "
                  f"({time.time() - t0:.0f}s)", flush=True)
    report.seconds = time.time() - t0
    return report
