"""Turn frame sequences into serialized training-pair corpora."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BinaryMask, DepthMap, FlowField, RasterImage, SegmentMap
from .flow import flow_reject
from .motion import flow_edit, piecewise_affine_edit
from .sprites import SpriteWorld
from . import io as cfio

MIN_INTERVAL_S = 1
MAX_INTERVAL_S = 10
REJECT_RETRIES = 5

MOTION_FLOW = "flow"
MOTION_PIECEWISE = "piecewise-affine"


@dataclass(frozen=True)
class TrainingPair:
    reference: RasterImage
    target: RasterImage
    coarse: RasterImage
    mask: BinaryMask
    motion_model: str  # MOTION_FLOW | MOTION_PIECEWISE
    interval_s: float
    clip_id: str

    def __post_init__(self):
        dims = {(self.reference.height, self.reference.width),
                (self.target.height, self.target.width),
                (self.coarse.height, self.coarse.width),
                (self.mask.height, self.mask.width)}
        if len(dims) != 1:
            raise ValueError(f"training pair dimensions disagree: {sorted(dims)}")
        if self.motion_model not in (MOTION_FLOW, MOTION_PIECEWISE):
            raise ValueError(f"unknown motion model {self.motion_model!r}")


@dataclass(frozen=True)
class Rejection:
    """A sampled pair whose motion was too large to warp usefully."""

    clip_id: str
    interval_s: float
    big_fraction: float  # fraction of pixels at/above the magnitude threshold
    threshold_px: float


def sample_pair(frames, fps: float, rng: np.random.Generator) -> tuple[int, int]:
    """Pick (i, j) with a 1-10 s forward interval, uniform over what fits.

    The interval in seconds is drawn uniformly from the feasible part of
    {1..10}; the start index is then uniform over the starts that keep j in
    range.
    """
    n = len(frames)
    feasible = [d for d in range(MIN_INTERVAL_S, MAX_INTERVAL_S + 1)
                if round(d * fps) <= n - 1 and round(d * fps) >= 1]
    if not feasible:
        raise ValueError(f"sequence of {n} frames at {fps} fps is shorter than 1 s")
    delta = int(rng.choice(feasible))
    span = round(delta * fps)
    i = int(rng.integers(0, n - span))
    return i, i + span


def build_sample(reference: RasterImage, target: RasterImage, flow: FlowField,
                 segments: SegmentMap | None, depth: DepthMap | None,
                 motion_model: str, clip_id: str = "", interval_s: float = 0.0,
                 ) -> list[TrainingPair] | Rejection:
    """Construct the coarse edit(s) for one frame pair, or reject it.

    motion_model is "flow", "pw", or "both"; "both" emits one pair per
    editing model. Acceptance depends on the flow alone.
    """
    if flow_reject(flow):
        big = float(np.mean(flow.magnitude() >= 350.0))
        return Rejection(clip_id=clip_id, interval_s=interval_s,
                         big_fraction=big, threshold_px=350.0)
    pairs = []
    if motion_model in ("flow", "both"):
        pkg = flow_edit(reference, flow, depth)
        pairs.append(TrainingPair(reference, target, pkg.coarse, pkg.mask,
                                  MOTION_FLOW, interval_s, clip_id))
    if motion_model in ("pw", "both"):
        if segments is None or depth is None:
            raise ValueError("piecewise-affine model needs segments and depth")
        pkg = piecewise_affine_edit(reference, flow, segments, depth, mode="affine")
        pairs.append(TrainingPair(reference, target, pkg.coarse, pkg.mask,
                                  MOTION_PIECEWISE, interval_s, clip_id))
    if motion_model not in ("flow", "pw", "both"):
        raise ValueError(f"unknown motion model {motion_model!r}")
    return pairs


def build_clip_pairs(world: SpriteWorld, motion_model: str, rng: np.random.Generator,
                     clip_id: str) -> list[TrainingPair]:
    """Sample one accepted pair from a sprite-world clip (up to 5 retries)."""
    for _ in range(REJECT_RETRIES + 1):
        i, j = sample_pair(range(world.n_frames), world.fps, rng)
        interval = (j - i) / world.fps
        result = build_sample(world.frame(i), world.frame(j), world.flow(i, j),
                              world.segments(i), world.depth(i), motion_model,
                              clip_id=clip_id, interval_s=interval)
        if isinstance(result, list):
            return result
    return []


def build_sprite_corpus(seed: int, n_pairs: int, motion_model: str = "both",
                        height: int = 32, width: int = 32, n_sprites: int = 3,
                        n_frames: int = 24, workers: int = 2) -> list[TrainingPair]:
    """Desk-scale corpus: one clip per accepted sample, deterministic in seed.

    Work is partitioned by sample index, so the result does not depend on
    worker scheduling. n_pairs counts emitted TrainingPairs; with
    motion_model="both" each sampled frame pair contributes two.
    """
    per_sample = 2 if motion_model == "both" else 1
    n_samples = (n_pairs + per_sample - 1) // per_sample

    def make(idx: int) -> list[TrainingPair]:
        world = SpriteWorld(seed + 1000 * idx + 1, n_frames=n_frames,
                            n_sprites=n_sprites, height=height, width=width)
        rng = np.random.default_rng((seed, idx))
        return build_clip_pairs(world, motion_model, rng, clip_id=f"clip{idx:05d}")

    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(make, range(n_samples)))
    pairs = [p for chunk in chunks for p in chunk]
    return pairs[:n_pairs]


# ---------------------------------------------------------------------------
# corpus serialization


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(pairs: list[TrainingPair], directory: str | Path) -> None:
    """Serialize pairs as 16-bit PNGs plus a line-delimited JSON index."""
    directory = Path(directory)
    (directory / "pairs").mkdir(parents=True, exist_ok=True)
    lines = []
    for idx, pair in enumerate(pairs):
        pid = f"{idx:06d}"
        pdir = directory / "pairs" / pid
        pdir.mkdir(exist_ok=True)
        cfio.save_png(pair.reference, pdir / "ref.png", bitdepth=16)
        cfio.save_png(pair.target, pdir / "target.png", bitdepth=16)
        cfio.save_png(pair.coarse, pdir / "coarse.png", bitdepth=16)
        cfio.save_png(RasterImage(pair.mask.bits.astype(np.float32)),
                      pdir / "mask.png", bitdepth=8)
        meta = {"id": pid, "clip_id": pair.clip_id, "motion_model": pair.motion_model,
                "interval_s": pair.interval_s}
        (pdir / "meta.json").write_text(json.dumps(meta))
        entry = dict(meta)
        entry["sha256"] = {name: _sha256(pdir / name)
                           for name in ("ref.png", "target.png", "coarse.png", "mask.png")}
        lines.append(json.dumps(entry))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))


class CorpusReader:
    """Streaming reader over a serialized corpus; validates checksums lazily."""

    def __init__(self, directory: str | Path, verify: bool = True):
        self.directory = Path(directory)
        self.verify = verify
        manifest = self.directory / "manifest.jsonl"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest at {manifest}")
        self.entries = []
        for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                self.entries.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"manifest line {lineno} is not valid JSON: {e}") from e

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> TrainingPair:
        entry = self.entries[idx]
        pdir = self.directory / "pairs" / entry["id"]
        for name in ("ref.png", "target.png", "coarse.png", "mask.png"):
            path = pdir / name
            if not path.exists():
                raise FileNotFoundError(f"{path} listed in manifest but missing")
            if self.verify and _sha256(path) != entry["sha256"][name]:
                raise ValueError(f"checksum mismatch for {path}")
        return TrainingPair(
            reference=cfio.load_png(pdir / "ref.png"),
            target=cfio.load_png(pdir / "target.png"),
            coarse=cfio.load_png(pdir / "coarse.png"),
            mask=BinaryMask(cfio.load_png(pdir / "mask.png").data[..., 0] > 0.5),
            motion_model=entry["motion_model"],
            interval_s=float(entry["interval_s"]),
            clip_id=entry["clip_id"],
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def read_manifest(directory: str | Path, verify: bool = True) -> CorpusReader:
    return CorpusReader(directory, verify=verify)
