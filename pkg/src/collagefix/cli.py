"""Command-line interface: data pipeline, training, sampling, eval, serving."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import io as cfio
from .core import BinaryMask, DepthMap, RasterImage, SegmentMap
from .flow import compose_flows, flow_reject, softmax_splat


@click.group()
def main():
    """Collage-style photo editing pipeline."""


# ---------------------------------------------------------------------------
# flow tools


@main.group()
def flow():
    """Flow composition, splatting, and the rejection check."""


def _load_flow(path: str):
    if path.endswith(".flo"):
        return cfio.load_flo(path)
    from .core import FlowField
    return FlowField(cfio.load_tensor(path))


@flow.command()
@click.argument("flows", nargs=-1, required=True)
@click.option("--out", required=True, help="output .flo path")
def compose(flows, out):
    """Compose consecutive-frame flows into one field."""
    composed = compose_flows([_load_flow(f) for f in flows])
    cfio.save_flo(composed, out)
    click.echo(f"wrote {out}")


@flow.command()
@click.option("--image", required=True)
@click.option("--flow", "flow_path", required=True)
@click.option("--depth", default=None, help="MFXT depth used as splat importance")
@click.option("--beta", default=10.0, show_default=True)
@click.option("--out", required=True)
@click.option("--out-mask", default=None)
def splat(image, flow_path, depth, beta, out, out_mask):
    """Forward-warp an image with softmax splatting."""
    img = cfio.load_png(image)
    fl = _load_flow(flow_path)
    importance = None
    if depth:
        importance = -cfio.load_tensor(depth)[..., 0]
    result = softmax_splat(img, fl, importance, beta)
    cfio.save_png(result.image, out)
    if out_mask:
        cfio.save_png(RasterImage(result.coverage.bits.astype(np.float32)), out_mask, bitdepth=8)
    click.echo(f"wrote {out} (holes: {result.coverage.hole_fraction():.3f})")


@flow.command("reject-check")
@click.argument("flow_path")
@click.option("--frac", default=0.10, show_default=True)
@click.option("--mag", default=350.0, show_default=True)
def reject_check(flow_path, frac, mag):
    """Report whether a flow fails the large-motion filter."""
    fl = _load_flow(flow_path)
    rejected = flow_reject(fl, frac=frac, mag=mag)
    click.echo("REJECT" if rejected else "ACCEPT")


# ---------------------------------------------------------------------------
# edit constructors


@main.group()
def edit():
    """Build EditPackages from flow/segments or user ops."""


def _write_package(pkg, out):
    from .motion import save_edit_package
    save_edit_package(pkg, out)
    click.echo(f"wrote {out} (holes: {pkg.mask.hole_fraction():.3f})")


@edit.command("flow-edit")
@click.option("--reference", required=True)
@click.option("--flow", "flow_path", required=True)
@click.option("--depth", default=None)
@click.option("--out", required=True)
def flow_edit_cmd(reference, flow_path, depth, out):
    from .motion import flow_edit
    ref = cfio.load_png(reference)
    dep = DepthMap(cfio.load_tensor(depth)[..., 0]) if depth else None
    _write_package(flow_edit(ref, _load_flow(flow_path), dep), out)


@edit.command("pw-edit")
@click.option("--reference", required=True)
@click.option("--flow", "flow_path", required=True)
@click.option("--segments", required=True, help="MFXT label map")
@click.option("--depth", required=True, help="MFXT depth map")
@click.option("--mode", type=click.Choice(["affine", "similarity"]), default="affine",
              show_default=True)
@click.option("--out", required=True)
def pw_edit_cmd(reference, flow_path, segments, depth, mode, out):
    from .motion import piecewise_affine_edit
    ref = cfio.load_png(reference)
    seg = SegmentMap(np.round(cfio.load_tensor(segments)[..., 0]).astype(np.int32))
    dep = DepthMap(cfio.load_tensor(depth)[..., 0])
    _write_package(piecewise_affine_edit(ref, _load_flow(flow_path), seg, dep, mode), out)


@edit.command("user-edit")
@click.option("--reference", required=True)
@click.option("--segments", required=True)
@click.option("--ops", "ops_path", required=True, help="JSON file with {ops: [...]}")
@click.option("--depth", default=None)
@click.option("--out", required=True)
def user_edit_cmd(reference, segments, ops_path, depth, out):
    from .motion import UserOp, apply_user_edit
    ref = cfio.load_png(reference)
    seg = SegmentMap(np.round(cfio.load_tensor(segments)[..., 0]).astype(np.int32))
    dep = DepthMap(cfio.load_tensor(depth)[..., 0]) if depth else None
    ops = [UserOp.from_dict(d) for d in json.loads(Path(ops_path).read_text())["ops"]]
    _write_package(apply_user_edit(ref, seg, ops, dep), out)


# ---------------------------------------------------------------------------
# dataset


@main.group()
def dataset():
    """Build training corpora and benchmarks."""


@dataset.command()
@click.option("--frames-dir", required=True,
              help="directory of frame PNGs plus flow/segment/depth MFXT files")
@click.option("--fps", default=3.0, show_default=True)
@click.option("--motion-model", type=click.Choice(["flow", "pw", "both"]), default="both",
              show_default=True)
@click.option("--pairs", "n_pairs", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True)
def build(frames_dir, fps, motion_model, n_pairs, seed, out):
    """Build a corpus from decoded frames (frame_0000.png ... + ground truth).

    Expects per-frame files frame_%04d.png and segments_%04d.mfxt /
    depth_%04d.mfxt, plus flow files flow_%04d_%04d.mfxt for sampled pairs
    (or consecutive flows flow_%04d.mfxt, composed on the fly).
    """
    from .dataset import build_sample, sample_pair, write_manifest
    from .flow import compose_flows

    frames_dir = Path(frames_dir)
    frame_paths = sorted(frames_dir.glob("frame_*.png"))
    if len(frame_paths) < 2:
        raise click.ClickException(f"need at least two frames in {frames_dir}")
    rng = np.random.default_rng(seed)
    pairs = []
    attempts = 0
    while len(pairs) < n_pairs and attempts < n_pairs * 10:
        attempts += 1
        i, j = sample_pair(frame_paths, fps, rng)
        direct = frames_dir / f"flow_{i:04d}_{j:04d}.mfxt"
        if direct.exists():
            fl = _load_flow(str(direct))
        else:
            steps = []
            for k in range(i, j):
                step_path = frames_dir / f"flow_{k:04d}.mfxt"
                if not step_path.exists():
                    raise click.ClickException(f"missing flow file {step_path}")
                steps.append(_load_flow(str(step_path)))
            fl = compose_flows(steps)
        seg_path = frames_dir / f"segments_{i:04d}.mfxt"
        dep_path = frames_dir / f"depth_{i:04d}.mfxt"
        seg = SegmentMap(np.round(cfio.load_tensor(seg_path)[..., 0]).astype(np.int32)) \
            if seg_path.exists() else None
        dep = DepthMap(cfio.load_tensor(dep_path)[..., 0]) if dep_path.exists() else None
        result = build_sample(cfio.load_png(frame_paths[i]), cfio.load_png(frame_paths[j]),
                              fl, seg, dep, motion_model,
                              clip_id=frames_dir.name, interval_s=(j - i) / fps)
        if isinstance(result, list):
            pairs.extend(result)
    write_manifest(pairs[:n_pairs], out)
    click.echo(f"wrote {len(pairs[:n_pairs])} pairs to {out}")


@dataset.command()
@click.option("--pairs", "n_pairs", default=2000, show_default=True)
@click.option("--motion-model", type=click.Choice(["flow", "pw", "both"]), default="both",
              show_default=True)
@click.option("--res", default=32, show_default=True)
@click.option("--sprites", "n_sprites", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True)
def sprites(n_pairs, motion_model, res, n_sprites, seed, out):
    """Build a synthetic sprite-world corpus with exact ground truth."""
    from .dataset import build_sprite_corpus, write_manifest
    pairs = build_sprite_corpus(seed=seed, n_pairs=n_pairs, motion_model=motion_model,
                                height=res, width=res, n_sprites=n_sprites)
    write_manifest(pairs, out)
    click.echo(f"wrote {len(pairs)} pairs to {out}")


@dataset.command()
@click.option("--collections", default=50, show_default=True)
@click.option("--arrangements", default=3, show_default=True)
@click.option("--res", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True)
def bench(collections, arrangements, res, seed, out):
    """Generate the object-rearrangement benchmark."""
    from .sprites import generate_rearrangement_benchmark
    from .motion import save_edit_package

    edits = generate_rearrangement_benchmark(seed, collections, arrangements,
                                             height=res, width=res)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, e in enumerate(edits):
        edir = out / f"edit_{i:04d}"
        save_edit_package(e.package, edir)
        cfio.save_png(e.target, edir / "target.png", bitdepth=16)
        cfio.save_flo(e.gt_flow, edir / "gt_flow.flo")
        cfio.save_tensor(e.segments.labels.astype(np.float32), edir / "segments.mfxt")
        index.append({"id": f"edit_{i:04d}", "collection": e.collection,
                      "source": e.source_arrangement, "target": e.target_arrangement})
    (out / "index.json").write_text(json.dumps(index, indent=2))
    click.echo(f"wrote {len(edits)} edits to {out}")


# ---------------------------------------------------------------------------
# train / sample / eval / serve


@main.command()
@click.option("--corpus", required=True)
@click.option("--steps", default=1000, show_default=True)
@click.option("--batch", default=16, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--res", default=32, show_default=True)
@click.option("--base-channels", default=24, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--ablate", type=click.Choice(["mask-detail", "mask-both", "timestep-detail",
                                             "noisy-detail", "global-embed"]), default=None)
@click.option("--baseline", is_flag=True, help="train the unconditional SDEdit baseline")
@click.option("--data", type=click.Choice(["flow", "pw", "both"]), default="both",
              show_default=True, help="motion-model subset of the corpus to train on")
@click.option("--out", required=True, help="checkpoint path")
def train(corpus, steps, batch, lr, res, base_channels, seed, ablate, baseline, data, out):
    """Train the dual model (or the SDEdit baseline) on a serialized corpus."""
    import torch
    from .dataset import read_manifest
    from .diffusion.model import DualDenoiser, SingleDenoiser, save_checkpoint
    from .diffusion.train import train_model
    from .diffusion.unet import DenoiserConfig
    from .evaluate import ablation_flags

    pairs = list(read_manifest(corpus))
    if data != "both":
        tag = {"flow": "flow", "pw": "piecewise-affine"}[data]
        pairs = [p for p in pairs if p.motion_model == tag]
    torch.manual_seed(seed)
    if baseline:
        config = DenoiserConfig(resolution=res, base_channels=base_channels, in_channels=3)
        model = SingleDenoiser(config)
    else:
        flags, _ = ablation_flags(ablate or "baseline")
        config = DenoiserConfig(resolution=res, base_channels=base_channels)
        model = DualDenoiser(config, flags=flags)
    report = train_model(model, pairs, steps=steps, batch_size=batch, lr=lr,
                         seed=seed, log_every=max(steps // 20, 1))
    save_checkpoint(model, out, extra_meta={
        "steps": steps, "lr": lr, "seed": seed, "data": data,
        "ablate": ablate, "final_loss": float(np.mean(report.losses[-50:]))})
    click.echo(f"wrote checkpoint {out}")


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--edit-dir", required=True, help="EditPackage directory")
@click.option("--steps", default=50, show_default=True)
@click.option("--mode", type=click.Choice(["fixup", "sdedit"]), default="fixup",
              show_default=True)
@click.option("--strength", default=0.4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True)
def sample(checkpoint, edit_dir, steps, mode, strength, seed, out):
    """Run the model on a serialized EditPackage."""
    from .diffusion.model import load_checkpoint
    from .diffusion.sampling import ddim_sample, sdedit_sample
    from .motion import load_edit_package

    model, _ = load_checkpoint(checkpoint)
    pkg = load_edit_package(edit_dir)
    if mode == "sdedit":
        result = sdedit_sample(model, pkg.coarse, strength=strength, steps=steps,
                               seed=seed, mask=pkg.mask)
    else:
        result = ddim_sample(model, pkg.reference, pkg.coarse, pkg.mask,
                             steps=steps, seed=seed)
    cfio.save_png(result, out, bitdepth=8)
    click.echo(f"wrote {out}")


@main.command("eval")
@click.option("--checkpoints", required=True, multiple=True,
              help="name=path entries; repeatable")
@click.option("--bench", "bench_kind", type=click.Choice(["rearrange", "heldout"]),
              default="rearrange", show_default=True)
@click.option("--corpus", default=None, help="heldout corpus directory")
@click.option("--collections", default=10, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, help="report JSON path")
def eval_cmd(checkpoints, bench_kind, corpus, collections, steps, seed, out):
    """Score checkpoints on the rearrangement benchmark or a held-out corpus."""
    from .diffusion.model import DualDenoiser, load_checkpoint
    from .diffusion.sampling import ddim_sample, sdedit_sample
    from .evaluate import EvalItem, default_metrics, flow_error_metric, format_table, run_table
    from .sprites import generate_rearrangement_benchmark

    if bench_kind == "rearrange":
        edits = generate_rearrangement_benchmark(seed, n_collections=collections)
        items = [EvalItem.from_rearrangement(e) for e in edits]
        metrics = default_metrics()
        metrics["flow_err"] = flow_error_metric
    else:
        from .dataset import read_manifest
        if corpus is None:
            raise click.ClickException("--corpus is required for heldout eval")
        items = [EvalItem(reference=p.reference, coarse=p.coarse, mask=p.mask,
                          target=p.target, motion_model=p.motion_model)
                 for p in read_manifest(corpus)]
        metrics = default_metrics()

    models = {}
    for entry in checkpoints:
        name, _, path = entry.partition("=")
        model, _ = load_checkpoint(path)
        if isinstance(model, DualDenoiser):
            models[name] = (lambda m: lambda item: ddim_sample(
                m, item.reference, item.coarse, item.mask, steps=steps, seed=seed))(model)
        else:
            models[name] = (lambda m: lambda item: sdedit_sample(
                m, item.coarse, steps=steps, seed=seed))(model)
    report = run_table(items, models, metrics, seed=seed)
    click.echo(format_table(report))
    if out:
        Path(out).write_text(json.dumps(report, indent=2))
        click.echo(f"wrote {out}")


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--port", default=8787, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--workers", default=2, show_default=True, help="sampling worker threads")
def serve(checkpoint, port, host, workers):
    """Serve the interactive editing API."""
    import uvicorn
    from .server import create_app
    app = create_app(checkpoint=checkpoint, workers=workers)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
