"""Training ladder: how do the e2e win rates evolve with training steps?"""

import sys
import time

import numpy as np
import torch

from collagefix.dataset import build_sprite_corpus
from collagefix.diffusion.model import DualDenoiser, SingleDenoiser, save_checkpoint
from collagefix.diffusion.sampling import ddim_sample_batch, sdedit_sample_batch
from collagefix.diffusion.train import pairs_to_tensors, train_model
from collagefix.diffusion.unet import DenoiserConfig
from collagefix.evaluate import EvalItem, flow_error_metric
from collagefix.metrics import mse
from collagefix.core import RasterImage, from_diffusion_space
from collagefix.sprites import generate_rearrangement_benchmark

BASE = int(sys.argv[1]) if len(sys.argv) > 1 else 24
BATCH = int(sys.argv[2]) if len(sys.argv) > 2 else 8
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-4
RUNGS = [int(x) for x in (sys.argv[4].split(",") if len(sys.argv) > 4 else ["1000", "1000", "1000"])]

torch.set_num_threads(2)
t_start = time.time()
pairs = build_sprite_corpus(seed=11, n_pairs=1200, motion_model="both")
print(f"[{time.time()-t_start:.0f}s] corpus {len(pairs)}", flush=True)

edits = generate_rearrangement_benchmark(seed=99, n_collections=4)[:20]
items = [EvalItem.from_rearrangement(e) for e in edits]
tens_eval = pairs_to_tensors([type("P", (), dict(reference=i.reference, target=i.target,
                                                 coarse=i.coarse, mask=i.mask))() for i in items])


def to_images(batch):
    return [from_diffusion_space(RasterImage(batch[i].permute(1, 2, 0).numpy()))
            for i in range(batch.shape[0])]


def score(model, tag):
    out = to_images(ddim_sample_batch(model, tens_eval["reference"], tens_eval["coarse"],
                                      tens_eval["mask"], steps=50, seed=7))
    wins, mo, mc, fe = 0, [], [], []
    for item, o in zip(items, out):
        a, b = mse(o, item.target), mse(item.coarse, item.target)
        wins += a < b
        mo.append(a); mc.append(b)
        fe.append(flow_error_metric(item, o))
    print(f"  {tag}: mse-wins {wins}/{len(items)}  mean mse {np.mean(mo):.5f} "
          f"(coarse {np.mean(mc):.5f})  flow-err {np.mean(fe):.3f}", flush=True)


cfg = DenoiserConfig(resolution=32, base_channels=BASE, channel_mults=(1, 2, 2),
                     num_res_blocks=1, attn_stages=(1, 2), num_heads=4)
torch.manual_seed(0)
model = DualDenoiser(cfg)
total = 0
for rung in RUNGS:
    rep = train_model(model, pairs, steps=rung, batch_size=BATCH, lr=LR, seed=total, log_every=500)
    total += rung
    print(f"[{time.time()-t_start:.0f}s] steps={total} tail loss "
          f"{np.mean(rep.losses[-50:]):.4f}", flush=True)
    score(model, f"steps={total}")
    save_checkpoint(model, f"/tmp/ladder_{BASE}_{total}.ckpt")
print(f"done {time.time()-t_start:.0f}s")
