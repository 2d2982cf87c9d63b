"""Deterministic sprite worlds: synthetic frame sequences with exact flow,
segments, and depth, plus the object-rearrangement benchmark.

Every sprite is a rigid body (circle / square / triangle) with an attached
orbiting appendage sharing its label. Body and appendage translate by whole
pixels each frame, so per-part flow is exact and integer-valued, while the
appendage's orbit makes whole-sprite motion non-affine — dense flow warps
align such a sprite perfectly, a single per-segment transform cannot.
Sprites cast soft attached shadows that are baked into the rendered frames
but deliberately absent from the flow/segment/depth ground truth: they are
the second-order effect the model has to learn to move on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import (AffineTransform2D, BinaryMask, DepthMap, EditPackage,
                   FlowField, RasterImage, SegmentMap)
from .motion import UserOp, apply_user_edit

BACKGROUND_DEPTH = 10.0
SHADOW_OFFSET = (2, 3)  # (dx, dy) pixels
SHADOW_OPACITY = 0.45
SHADOW_BLUR = 1.0

SHAPES = ("circle", "square", "triangle")


@dataclass(frozen=True, eq=False)
class Sprite:
    shape: str
    size: float
    color: np.ndarray  # base RGB
    grad: np.ndarray  # per-channel linear gradient along (gx, gy)
    stripe_axis: int  # 0 = vertical stripes, 1 = horizontal
    stripe_period: int
    depth: float
    start: np.ndarray  # (x, y) at frame 0
    velocity: np.ndarray  # integer (vx, vy) px/frame
    arm_size: float
    arm_radius: float
    arm_phase: float
    arm_rate: float  # rad/frame


def _fold(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect value into [lo, hi] (triangle-wave bounce)."""
    if hi <= lo:
        return np.full_like(np.asarray(value, dtype=np.float64), lo)
    span = hi - lo
    v = np.mod(np.asarray(value, dtype=np.float64) - lo, 2 * span)
    return lo + np.where(v > span, 2 * span - v, v)


def _part_mask(shape: str, size: float, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= size
    if shape == "triangle":
        return (dy >= -size) & (dy <= size) & (np.abs(dx) <= (size - dy) * 0.75)
    raise ValueError(f"unknown shape {shape!r}")


class SpriteWorld:
    """A seeded clip of frames over a textured background."""

    def __init__(self, seed: int, n_frames: int = 40, n_sprites: int = 3,
                 height: int = 32, width: int = 32, fps: float = 3.0,
                 with_arms: bool = True):
        if n_sprites < 1:
            raise ValueError("need at least one sprite")
        self.seed = seed
        self.n_frames = n_frames
        self.height = height
        self.width = width
        self.fps = fps
        rng = np.random.default_rng(seed)
        self.background = self._make_background(rng)
        self.sprites = self._make_sprites(rng, n_sprites, with_arms)
        self._frame_cache: dict[int, tuple] = {}

    # -- construction -------------------------------------------------------

    def _make_background(self, rng: np.random.Generator) -> np.ndarray:
        base = rng.uniform(0.35, 0.75, size=3)
        noise = rng.normal(0.0, 1.0, size=(self.height, self.width, 3))
        smooth = gaussian_filter(noise, sigma=(4.0, 4.0, 0.0))
        smooth /= max(np.abs(smooth).max(), 1e-6)
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        ramp = (xs / max(self.width - 1, 1) - 0.5) * rng.uniform(-0.2, 0.2) \
            + (ys / max(self.height - 1, 1) - 0.5) * rng.uniform(-0.2, 0.2)
        field = base[None, None, :] + 0.15 * smooth + ramp[:, :, None]
        return np.clip(field, 0.05, 0.95).astype(np.float32)

    def _make_sprites(self, rng: np.random.Generator, n: int, with_arms: bool) -> list[Sprite]:
        scale = min(self.height, self.width)
        depths = 1.0 + 6.0 * rng.permutation(np.arange(n) + rng.uniform(0.1, 0.9, n)) / max(n, 1)
        sprites = []
        for i in range(n):
            size = rng.uniform(0.09, 0.16) * scale
            arm = with_arms and rng.random() < 0.8
            sprites.append(Sprite(
                shape=SHAPES[rng.integers(0, len(SHAPES))],
                size=size,
                color=rng.uniform(0.15, 0.95, size=3),
                grad=rng.uniform(-0.25, 0.25, size=2),
                stripe_axis=int(rng.integers(0, 2)),
                stripe_period=int(rng.integers(3, 6)),
                depth=float(depths[i]),
                start=rng.integers(4, [max(self.width - 4, 5), max(self.height - 4, 5)]).astype(np.float64),
                velocity=rng.integers(-2, 3, size=2).astype(np.float64),
                arm_size=size * rng.uniform(0.4, 0.6) if arm else 0.0,
                arm_radius=size * rng.uniform(1.2, 1.6) if arm else 0.0,
                arm_phase=rng.uniform(0, 2 * np.pi),
                arm_rate=rng.uniform(0.25, 0.7) * rng.choice([-1.0, 1.0]),
            ))
        return sprites

    # -- kinematics ----------------------------------------------------------

    def body_position(self, sprite: Sprite, t: int) -> np.ndarray:
        margin = max(2.0, sprite.size * 0.5)
        raw = sprite.start + sprite.velocity * t
        x = _fold(raw[0], margin, self.width - 1 - margin)
        y = _fold(raw[1], margin, self.height - 1 - margin)
        return np.round(np.array([x, y]))

    def arm_position(self, sprite: Sprite, t: int) -> np.ndarray | None:
        if sprite.arm_radius <= 0:
            return None
        angle = sprite.arm_phase + sprite.arm_rate * t
        offset = sprite.arm_radius * np.array([np.cos(angle), np.sin(angle)])
        return self.body_position(sprite, t) + np.round(offset)

    def part_positions(self, t: int) -> list[list[np.ndarray]]:
        """Per sprite, the integer centers of its parts at frame t."""
        out = []
        for sp in self.sprites:
            parts = [self.body_position(sp, t)]
            arm = self.arm_position(sp, t)
            if arm is not None:
                parts.append(arm)
            out.append(parts)
        return out

    # -- rendering -----------------------------------------------------------

    def _part_color(self, sprite: Sprite, part: int, cx: float, cy: float) -> np.ndarray:
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        lx, ly = (xs - cx) / max(sprite.size, 1.0), (ys - cy) / max(sprite.size, 1.0)
        shade = sprite.grad[0] * lx + sprite.grad[1] * ly
        stripes = 0.08 * np.sign(np.sin(
            np.pi * (lx if sprite.stripe_axis == 0 else ly) * sprite.stripe_period))
        tint = 0.9 if part == 1 else 1.0
        color = sprite.color[None, None, :] * tint + (shade + stripes)[:, :, None]
        return np.clip(color, 0.02, 0.98)

    def _render(self, t: int):
        if t in self._frame_cache:
            return self._frame_cache[t]
        h, w = self.height, self.width
        image = self.background.astype(np.float64).copy()
        labels = np.zeros((h, w), dtype=np.int32)
        parts = np.full((h, w), -1, dtype=np.int32)  # sprite*2 + part index
        depth = np.full((h, w), BACKGROUND_DEPTH, dtype=np.float64)

        order = sorted(range(len(self.sprites)), key=lambda i: -self.sprites[i].depth)
        positions = self.part_positions(t)
        for i in order:
            sp = self.sprites[i]
            foot = np.zeros((h, w), dtype=bool)
            part_masks = []
            for p, center in enumerate(positions[i]):
                size = sp.size if p == 0 else sp.arm_size
                m = _part_mask(sp.shape if p == 0 else "circle", size,
                               center[0], center[1], h, w)
                part_masks.append((p, center, m))
                foot |= m
            # attached soft shadow, cast on whatever is currently beneath
            shifted = np.zeros((h, w), dtype=np.float64)
            sy, sx = SHADOW_OFFSET[1], SHADOW_OFFSET[0]
            src = foot.astype(np.float64)
            shifted[max(sy, 0):h + min(sy, 0), max(sx, 0):w + min(sx, 0)] = \
                src[max(-sy, 0):h + min(-sy, 0), max(-sx, 0):w + min(-sx, 0)]
            soft = gaussian_filter(shifted, SHADOW_BLUR)
            image *= (1.0 - SHADOW_OPACITY * np.clip(soft, 0.0, 1.0))[:, :, None]
            for p, center, m in part_masks:
                image[m] = self._part_color(sp, p, center[0], center[1])[m]
                labels[m] = i + 1
                parts[m] = i * 2 + p
                depth[m] = sp.depth

        # a sprite can be fully occluded; compress labels so they stay gap-free
        present = np.unique(labels)
        remap = np.zeros(int(present.max()) + 1, dtype=np.int32)
        remap[present] = np.arange(len(present)) if present[0] == 0 \
            else np.arange(1, len(present) + 1)
        labels = remap[labels]

        result = (RasterImage(np.clip(image, 0.0, 1.0).astype(np.float32)),
                  SegmentMap(labels), DepthMap(depth.astype(np.float32)),
                  parts)
        self._frame_cache[t] = result
        return result

    def frame(self, t: int) -> RasterImage:
        return self._render(t)[0]

    def segments(self, t: int) -> SegmentMap:
        return self._render(t)[1]

    def depth(self, t: int) -> DepthMap:
        return self._render(t)[2]

    def flow(self, i: int, j: int) -> FlowField:
        """Exact displacement of frame-i content toward frame j."""
        parts = self._render(i)[3]
        pos_i = self.part_positions(i)
        pos_j = self.part_positions(j)
        data = np.zeros((self.height, self.width, 2), dtype=np.float32)
        for s in range(len(self.sprites)):
            for p in range(len(pos_i[s])):
                delta = pos_j[s][p] - pos_i[s][p]
                sel = parts == s * 2 + p
                data[sel] = delta.astype(np.float32)
        return FlowField(data)

    def disocclusion_oracle(self, i: int, j: int) -> BinaryMask:
        """Holes left when frame-i content moves to frame j, from geometry
        alone: a target pixel is covered iff some visible source pixel's
        integer displacement lands on it."""
        flow = self.flow(i, j).data
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        tx = xs + np.round(flow[..., 0]).astype(np.int64)
        ty = ys + np.round(flow[..., 1]).astype(np.int64)
        inb = (tx >= 0) & (tx < self.width) & (ty >= 0) & (ty < self.height)
        covered = np.zeros((self.height, self.width), dtype=bool)
        covered[ty[inb], tx[inb]] = True
        return BinaryMask(~covered)


def generate_sprite_world(seed: int, n_frames: int = 40, n_sprites: int = 3,
                          height: int = 32, width: int = 32, fps: float = 3.0,
                          with_arms: bool = True) -> SpriteWorld:
    return SpriteWorld(seed, n_frames=n_frames, n_sprites=n_sprites,
                       height=height, width=width, fps=fps, with_arms=with_arms)


# ---------------------------------------------------------------------------
# rearrangement benchmark


@dataclass(frozen=True)
class RearrangementEdit:
    """One benchmark item: rearrange collection objects from one layout to
    another, with the true target available for scoring."""

    collection: int
    source_arrangement: int
    target_arrangement: int
    package: EditPackage
    target: RasterImage
    gt_flow: FlowField
    segments: SegmentMap


@dataclass
class _Collection:
    world: SpriteWorld
    placements: list[list[np.ndarray]]  # per arrangement, per sprite center


def _sample_placements(rng: np.random.Generator, world: SpriteWorld,
                       n_arrangements: int) -> list[list[np.ndarray]]:
    sizes = [sp.size + max(sp.arm_radius + sp.arm_size, 0.0) for sp in world.sprites]
    placements = []
    for _ in range(n_arrangements):
        centers: list[np.ndarray] = []
        for si, sp in enumerate(world.sprites):
            margin = max(2.0, sp.size * 0.5)
            for _attempt in range(200):
                c = np.round(rng.uniform([margin, margin],
                                         [world.width - 1 - margin, world.height - 1 - margin]))
                if all(np.abs(c - o).max() >= (sizes[si] + sizes[oi]) * 0.75
                       for oi, o in enumerate(centers)):
                    break
            centers.append(c)
        placements.append(centers)
    return placements


class _StaticWorld(SpriteWorld):
    """A sprite world whose frame index selects an arrangement, not time.

    Arm angles are frozen so rearrangement is a pure per-sprite translation.
    """

    def __init__(self, seed: int, n_sprites: int, height: int, width: int):
        super().__init__(seed, n_frames=1, n_sprites=n_sprites,
                         height=height, width=width, with_arms=True)
        self.placements: list[list[np.ndarray]] = []

    def body_position(self, sprite: Sprite, t: int) -> np.ndarray:
        idx = self.sprites.index(sprite)
        return np.asarray(self.placements[t][idx], dtype=np.float64)

    def arm_position(self, sprite: Sprite, t: int) -> np.ndarray | None:
        if sprite.arm_radius <= 0:
            return None
        offset = sprite.arm_radius * np.array([np.cos(sprite.arm_phase),
                                               np.sin(sprite.arm_phase)])
        return self.body_position(sprite, t) + np.round(offset)


def generate_rearrangement_benchmark(seed: int, n_collections: int = 50,
                                     n_arrangements: int = 3, n_sprites: int = 3,
                                     height: int = 32, width: int = 32,
                                     ) -> list[RearrangementEdit]:
    """Collections of sprites, each rearranged n_arrangements times; one edit
    per ordered arrangement pair warps a layout toward another. Defaults give
    n_collections * n_arrangements * (n_arrangements - 1) = 300 edits."""
    rng = np.random.default_rng(seed)
    edits: list[RearrangementEdit] = []
    for c in range(n_collections):
        world = _StaticWorld(int(rng.integers(0, 2 ** 31)), n_sprites, height, width)
        world.placements = _sample_placements(rng, world, n_arrangements)
        world.n_frames = n_arrangements
        for a in range(n_arrangements):
            for b in range(n_arrangements):
                if a == b:
                    continue
                reference = world.frame(a)
                segments = world.segments(a)
                depth = world.depth(a)
                ops = []
                for k, sp in enumerate(world.sprites):
                    delta = world.placements[b][k] - world.placements[a][k]
                    ops.append(UserOp(label=k + 1, kind="transform",
                                      transform=AffineTransform2D.translation(*delta)))
                package = apply_user_edit(reference, segments, ops, depth)
                edits.append(RearrangementEdit(
                    collection=c, source_arrangement=a, target_arrangement=b,
                    package=package, target=world.frame(b),
                    gt_flow=world.flow(a, b), segments=segments))
    return edits
