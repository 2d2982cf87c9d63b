"""Diagnose the train/sample gap: train briefly, then inspect x0_hat quality
along the DDIM trajectory and at isolated noise levels."""

import numpy as np
import torch

from collagefix.dataset import build_sprite_corpus
from collagefix.diffusion.model import DualDenoiser, save_checkpoint
from collagefix.diffusion.sampling import ddim_timesteps
from collagefix.diffusion.schedule import q_sample
from collagefix.diffusion.train import pairs_to_tensors, train_model
from collagefix.diffusion.unet import DenoiserConfig

torch.set_num_threads(2)
torch.manual_seed(0)

pairs = build_sprite_corpus(seed=11, n_pairs=200, motion_model="both")
cfg = DenoiserConfig(resolution=32, base_channels=24, channel_mults=(1, 2, 2),
                     num_res_blocks=1, attn_stages=(1, 2), num_heads=4)
model = DualDenoiser(cfg)
rep = train_model(model, pairs, steps=500, batch_size=16, lr=1e-4, seed=0, log_every=100)
save_checkpoint(model, "/tmp/debug_model.ckpt")

model.eval()
tens = pairs_to_tensors(pairs[:4])
ref, coarse, mask, target = tens["reference"], tens["coarse"], tens["mask"], tens["target"]
schedule = model.schedule

print("\n-- single-step x0_hat quality at isolated t (x_t from TARGET) --")
gen = torch.Generator().manual_seed(5)
with torch.no_grad():
    for t in (999, 900, 700, 500, 300, 100, 20):
        tb = torch.full((4,), t, dtype=torch.long)
        eps = torch.randn(target.shape, generator=gen)
        x_t = q_sample(target, tb, eps, schedule)
        feats = model.extract_details(ref, mask, tb, torch.randn(ref.shape, generator=gen))
        eps_hat = model.predict_eps(x_t, coarse, mask, tb, feats)
        a = schedule.alpha_bar[t]
        x0_hat = (x_t - np.sqrt(1 - a) * eps_hat) / np.sqrt(a)
        print(f"t={t:4d}  eps_err={float(((eps - eps_hat) ** 2).mean()):.4f}  "
              f"x0_err={float(((x0_hat - target) ** 2).mean()):.4f}")

print("\n-- DDIM trajectory: distance of x0_hat to target and coarse --")
gen = torch.Generator().manual_seed(7)
with torch.no_grad():
    t0 = schedule.T - 1
    eps = torch.randn(coarse.shape, generator=gen)
    x = q_sample(coarse, torch.full((4,), t0, dtype=torch.long), eps, schedule)
    ts = ddim_timesteps(t0, 50)
    for i in range(len(ts) - 1):
        t, t_next = int(ts[i]), int(ts[i + 1])
        tb = torch.full((4,), t, dtype=torch.long)
        feats = model.extract_details(ref, mask, tb, torch.randn(ref.shape, generator=gen))
        eps_hat = model.predict_eps(x, coarse, mask, tb, feats)
        a_t, a_n = schedule.alpha_bar[t], schedule.alpha_bar[t_next]
        x0_hat = (x - np.sqrt(1 - a_t) * eps_hat) / np.sqrt(a_t)
        if i % 7 == 0 or t_next == 0:
            print(f"t={t:4d}  |x|={float(x.abs().mean()):.3f}  "
                  f"x0_hat->target={float(((x0_hat - target) ** 2).mean()):.4f}  "
                  f"x0_hat->coarse={float(((x0_hat - coarse) ** 2).mean()):.4f}")
        x = np.sqrt(a_n) * x0_hat + np.sqrt(1 - a_n) * eps_hat
    final = x
    print(f"final MSE to target {float(((final - target) ** 2).mean()):.4f}, "
          f"to coarse {float(((final - coarse) ** 2).mean()):.4f}")
