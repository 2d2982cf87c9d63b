"""Calibration run for the end-to-end ordering: is the desk-scale budget
enough for the full model to beat (a) the coarse edit on MSE and (b) the
SDEdit baseline on flow error? Prints the two fractions."""

import sys
import time

import numpy as np
import torch

from collagefix.dataset import build_sprite_corpus
from collagefix.diffusion.model import DualDenoiser, SingleDenoiser
from collagefix.diffusion.sampling import ddim_sample_batch, sdedit_sample_batch
from collagefix.diffusion.train import pairs_to_tensors, train_model
from collagefix.diffusion.unet import DenoiserConfig
from collagefix.evaluate import EvalItem, flow_error_metric
from collagefix.metrics import mse
from collagefix.core import RasterImage, from_diffusion_space
from collagefix.sprites import generate_rearrangement_benchmark

N_PAIRS = int(sys.argv[1]) if len(sys.argv) > 1 else 600
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 800
N_EDITS = int(sys.argv[3]) if len(sys.argv) > 3 else 40
BASE = int(sys.argv[4]) if len(sys.argv) > 4 else 24
LR = float(sys.argv[5]) if len(sys.argv) > 5 else 1e-4

torch.set_num_threads(2)
t0 = time.time()
pairs = build_sprite_corpus(seed=11, n_pairs=N_PAIRS, motion_model="both")
print(f"[{time.time()-t0:.0f}s] corpus: {len(pairs)} pairs", flush=True)

cfg = DenoiserConfig(resolution=32, base_channels=BASE, channel_mults=(1, 2, 2),
                     num_res_blocks=1, attn_stages=(1, 2), num_heads=4)
torch.manual_seed(0)
full = DualDenoiser(cfg)
rep = train_model(full, pairs, steps=STEPS, batch_size=16, lr=LR, seed=0, log_every=100)
print(f"[{time.time()-t0:.0f}s] full trained; tail loss {np.mean(rep.losses[-50:]):.4f}", flush=True)

cfg_b = DenoiserConfig(resolution=32, base_channels=BASE, channel_mults=(1, 2, 2),
                       num_res_blocks=1, attn_stages=(1, 2), num_heads=4, in_channels=3)
torch.manual_seed(0)
baseline = SingleDenoiser(cfg_b)
rep_b = train_model(baseline, pairs, steps=STEPS, batch_size=16, lr=LR, seed=0, log_every=200)
print(f"[{time.time()-t0:.0f}s] baseline trained; tail loss {np.mean(rep_b.losses[-50:]):.4f}", flush=True)

edits = generate_rearrangement_benchmark(seed=99, n_collections=(N_EDITS + 5) // 6)[:N_EDITS]
items = [EvalItem.from_rearrangement(e) for e in edits]
print(f"[{time.time()-t0:.0f}s] {len(items)} eval edits", flush=True)


def to_images(batch):
    return [from_diffusion_space(RasterImage(batch[i].permute(1, 2, 0).numpy()))
            for i in range(batch.shape[0])]


wins_mse, wins_flow, details = 0, 0, []
B = 16
for lo in range(0, len(items), B):
    chunk = items[lo:lo + B]
    tens = pairs_to_tensors([type("P", (), dict(reference=i.reference, target=i.target,
                                                coarse=i.coarse, mask=i.mask))() for i in chunk])
    out_full = to_images(ddim_sample_batch(full, tens["reference"], tens["coarse"],
                                           tens["mask"], steps=50, seed=7))
    out_sd = to_images(sdedit_sample_batch(baseline, tens["coarse"], strength=0.4,
                                           steps=50, seed=7))
    for item, of, os_ in zip(chunk, out_full, out_sd):
        m_out, m_coarse = mse(of, item.target), mse(item.coarse, item.target)
        f_full = flow_error_metric(item, of)
        f_sd = flow_error_metric(item, os_)
        wins_mse += m_out < m_coarse
        wins_flow += f_full < f_sd
        details.append((m_out, m_coarse, f_full, f_sd))
    print(f"[{time.time()-t0:.0f}s] scored {lo+len(chunk)}", flush=True)

details = np.array(details)
print(f"MSE win rate (out < coarse): {wins_mse}/{len(items)} = {wins_mse/len(items):.2f}")
print(f"flow win rate (full < sdedit): {wins_flow}/{len(items)} = {wins_flow/len(items):.2f}")
print(f"mean MSE out {details[:,0].mean():.5f} vs coarse {details[:,1].mean():.5f}")
print(f"mean flow full {details[:,2].mean():.3f} vs sdedit {details[:,3].mean():.3f}")
print(f"total {time.time()-t0:.0f}s")
