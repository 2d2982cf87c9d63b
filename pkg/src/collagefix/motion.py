"""Editing models: build EditPackages from flow, segments, and depth.

Two automated constructors mirror the training-data warps (dense flow warping
and per-segment affine/similarity warping) and a third applies explicit user
ops. All three share the same bookkeeping: a coarse edit, a disocclusion
mask, and a dense correspondence map back to the reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (AffineTransform2D, BinaryMask, CorrespondenceMap, DepthMap,
                   EditPackage, EditProvenance, FlowField, RasterImage,
                   SegmentMap, bilinear_sample_many)
from .flow import DEFAULT_BETA, splat_dominant_source
from . import io as cfio

INPAINT_ITERATIONS = 500
INPAINT_TOL = 1e-5


class DegenerateSegmentError(ValueError):
    """Raised when a segment's pixels cannot pin down the requested transform."""

    def __init__(self, message: str, label: int | None = None):
        super().__init__(message)
        self.label = label


def _as_bool_mask(segment) -> np.ndarray:
    if isinstance(segment, BinaryMask):
        return segment.as_bool()
    return np.asarray(segment, dtype=bool)


def fit_segment_transform(flow: FlowField, segment, mode: str = "affine",
                          label: int | None = None) -> AffineTransform2D:
    """Least-squares transform mapping segment pixels p to p + flow(p).

    `segment` is a bit mask selecting the pixels to fit (set bits = in
    segment). Affine mode solves the 6-parameter normal equations; similarity
    mode solves the 4-parameter problem in closed form on the centered point
    pairs, allowing a mirror when it fits better.
    """
    sel = _as_bool_mask(segment)
    if sel.shape != (flow.height, flow.width):
        raise ValueError(f"segment shape {sel.shape} != flow {(flow.height, flow.width)}")
    ys, xs = np.nonzero(sel)
    src = np.stack([xs, ys], axis=1).astype(np.float64)
    dst = src + flow.data[ys, xs].astype(np.float64)

    if mode == "affine":
        if len(src) < 3:
            raise DegenerateSegmentError(
                f"affine fit needs >= 3 pixels, segment {label} has {len(src)}", label)
        design = np.column_stack([src, np.ones(len(src))])
        sol, _, rank, _ = np.linalg.lstsq(design, dst, rcond=None)
        if rank < 3:
            raise DegenerateSegmentError(
                f"segment {label}: collinear pixels, affine fit is rank-deficient", label)
        (a11, a21), (a12, a22), (tx, ty) = sol
        return AffineTransform2D(a11, a12, a21, a22, tx, ty)

    if mode == "similarity":
        z = src[:, 0] + 1j * src[:, 1]
        w = dst[:, 0] + 1j * dst[:, 1]
        mz, mw = z.mean(), w.mean()
        zc, wc = z - mz, w - mw
        pow_z = np.vdot(zc, zc).real
        if pow_z < 1e-12:
            raise DegenerateSegmentError(
                f"similarity fit needs >= 2 distinct pixels (segment {label})", label)
        # direct form w = a*z + b, mirrored form w = a*conj(z) + b
        a_rot = np.vdot(zc, wc) / pow_z
        a_mir = (wc * zc).sum() / pow_z
        res_rot = np.abs(wc - a_rot * zc).sum()
        res_mir = np.abs(wc - a_mir * np.conj(zc)).sum()
        if res_mir < res_rot:
            a = a_mir
            b = mw - a * np.conj(mz)
            return AffineTransform2D(a.real, a.imag, a.imag, -a.real, b.real, b.imag)
        a = a_rot
        b = mw - a * mz
        return AffineTransform2D(a.real, -a.imag, a.imag, a.real, b.real, b.imag)

    raise ValueError(f"unknown fit mode {mode!r}")


def segment_fit_residual(flow: FlowField, segment, transform: AffineTransform2D) -> float:
    """RMS residual of a fitted transform against the flow, in pixels.

    The RMS runs over both displacement components, so for isotropic noise of
    std sigma on an exactly realizable flow it converges to sigma.
    """
    sel = _as_bool_mask(segment)
    ys, xs = np.nonzero(sel)
    src = np.stack([xs, ys], axis=1).astype(np.float64)
    dst = src + flow.data[ys, xs].astype(np.float64)
    err = transform.apply(src) - dst
    return float(np.sqrt((err ** 2).mean()))


def inpaint_holes(image: RasterImage, mask: BinaryMask,
                  iterations: int = INPAINT_ITERATIONS, tol: float = INPAINT_TOL) -> RasterImage:
    """Fill mask=1 pixels by Jacobi relaxation of the discrete Laplace equation.

    Valid pixels act as Dirichlet boundary values and are returned bit-exact.
    Iteration stops after `iterations` rounds or when the largest update
    drops below `tol`.
    """
    if (image.height, image.width) != (mask.height, mask.width):
        raise ValueError("inpaint_holes dimension mismatch")
    holes = mask.as_bool()
    if not holes.any():
        return image
    out = image.data.copy()
    if holes.all():
        out[:] = image.data.mean(axis=(0, 1))
        return RasterImage(out)

    work = image.data.astype(np.float64)
    work[holes] = image.data[~holes].mean(axis=0)
    for _ in range(iterations):
        padded = np.pad(work, ((1, 1), (1, 1), (0, 0)), mode="edge")
        neighbors = (padded[:-2, 1:-1] + padded[2:, 1:-1]
                     + padded[1:-1, :-2] + padded[1:-1, 2:]) * 0.25
        delta = np.abs(neighbors[holes] - work[holes]).max()
        work[holes] = neighbors[holes]
        if delta < tol:
            break
    out[holes] = work[holes].astype(np.float32)
    return RasterImage(out)


def flow_edit(reference: RasterImage, flow: FlowField,
              depth: DepthMap | None = None, beta: float = DEFAULT_BETA) -> EditPackage:
    """Warp the reference forward along the flow into a coarse edit.

    The softmax splat (importance = -depth when depth is given, so nearer
    content wins collisions) resolves, per target pixel, the dominant source
    pixel; the coarse edit takes that single source's value so every valid
    pixel traces back to the reference exactly. Uncovered pixels are recorded
    as holes and inpainted.
    """
    if (reference.height, reference.width) != (flow.height, flow.width):
        raise ValueError("flow_edit dimension mismatch")
    importance = -depth.depth.astype(np.float64) if depth is not None else None
    source, covered = splat_dominant_source(flow, importance, beta)
    mask = BinaryMask(~covered)

    coarse = np.zeros_like(reference.data)
    sx = source[..., 0][covered].astype(np.int64)
    sy = source[..., 1][covered].astype(np.int64)
    coarse[covered] = reference.data[sy, sx]
    coarse_img = inpaint_holes(RasterImage(coarse), mask)
    return EditPackage(reference=reference, coarse=coarse_img, mask=mask,
                       correspondence=CorrespondenceMap(source),
                       provenance=EditProvenance.FLOW_MODEL,
                       meta={"beta": beta})


@dataclass
class _Layer:
    covered: np.ndarray  # H x W bool
    color: np.ndarray  # H x W x C
    corr: np.ndarray  # H x W x 2
    depth: float
    order: float


def _render_segment_layer(reference: RasterImage, footprint: np.ndarray,
                          transform: AffineTransform2D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward-resample a segment under its transform onto the full canvas.

    The segment's footprint is resampled alongside the colors and thresholded
    at 0.5, which positions the edge with sub-pixel accuracy without blending
    foreign content into the layer.
    """
    h, w = reference.height, reference.width
    inv = transform.inverse()
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.stack([xs, ys], axis=-1)
    srcpts = inv.apply(pts)
    sx, sy = srcpts[..., 0], srcpts[..., 1]
    alpha = bilinear_sample_many(footprint.astype(np.float32)[..., None], sx, sy)[..., 0]
    inside = (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)
    covered = (alpha >= 0.5) & inside
    color = bilinear_sample_many(reference.data, sx, sy)
    corr = np.stack([sx, sy], axis=-1).astype(np.float32)
    return covered, color, corr


def _composite(reference: RasterImage, layers: list[_Layer],
               base_valid: np.ndarray | None = None,
               base_depth: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Paint layers far-to-near, optionally over a partially valid base image.

    Returns (covered, color, corr). Paint order: decreasing depth, then
    increasing order key, so nearer layers and later ops end up on top. When
    the base carries per-pixel depth, each layer is z-tested against it.
    """
    h, w = reference.height, reference.width
    color = np.zeros_like(reference.data)
    corr = np.full((h, w, 2), np.nan, dtype=np.float32)
    covered = np.zeros((h, w), dtype=bool)
    zbuf = np.full((h, w), np.inf)

    if base_valid is not None:
        covered |= base_valid
        color[base_valid] = reference.data[base_valid]
        ident = CorrespondenceMap.identity(h, w).source
        corr[base_valid] = ident[base_valid]
        if base_depth is not None:
            zbuf[base_valid] = base_depth[base_valid]

    for layer in sorted(layers, key=lambda l: (-l.depth, l.order)):
        write = layer.covered & (layer.depth <= zbuf)
        covered |= write
        color[write] = layer.color[write]
        corr[write] = layer.corr[write]
        zbuf[write] = layer.depth
    return covered, color, corr


def piecewise_affine_edit(reference: RasterImage, flow: FlowField, segments: SegmentMap,
                          depth: DepthMap, mode: str = "affine",
                          beta: float = DEFAULT_BETA) -> EditPackage:
    """Per-segment affine (or similarity) warp, composited back to front.

    Each labeled segment moves under the transform fitted to the flow inside
    it; the unsegmented remainder is warped with the dense flow model. Layers
    stack by decreasing mean depth (lower label first on ties). Segments whose
    fit is degenerate or singular fall back to their mean-flow translation.
    """
    h, w = reference.height, reference.width
    if (flow.height, flow.width) != (h, w) or (segments.height, segments.width) != (h, w) \
            or (depth.height, depth.width) != (h, w):
        raise ValueError("piecewise_affine_edit dimension mismatch")
    if segments.num_segments == 0:
        raise ValueError("piecewise_affine_edit needs at least one labeled segment")

    layers: list[_Layer] = []
    transforms: dict[int, AffineTransform2D] = {}
    fallbacks: list[int] = []
    for k in range(1, segments.num_segments + 1):
        foot = segments.footprint(k)
        try:
            tf = fit_segment_transform(flow, foot, mode=mode, label=k)
            if not tf.is_invertible():
                raise DegenerateSegmentError(f"segment {k}: singular fitted transform", k)
        except DegenerateSegmentError:
            mean_flow = flow.data[foot].mean(axis=0) if foot.any() else (0.0, 0.0)
            tf = AffineTransform2D.translation(float(mean_flow[0]), float(mean_flow[1]))
            fallbacks.append(k)
        transforms[k] = tf
        covered, color, corr = _render_segment_layer(reference, foot, tf)
        layers.append(_Layer(covered, color, corr, float(depth.depth[foot].mean()), order=k))

    bg = segments.labels == 0
    if bg.any():
        src, covered_bg = splat_dominant_source(
            flow, -depth.depth.astype(np.float64), beta, src_valid=bg)
        color_bg = np.zeros_like(reference.data)
        sel = covered_bg
        color_bg[sel] = reference.data[src[..., 1][sel].astype(np.int64),
                                       src[..., 0][sel].astype(np.int64)]
        layers.append(_Layer(covered_bg, color_bg, src, float(depth.depth[bg].mean()), order=0))

    covered, color, corr = _composite(reference, layers)
    mask = BinaryMask(~covered)
    corr[~covered] = np.nan
    coarse = inpaint_holes(RasterImage(color), mask)
    meta = {"mode": mode,
            "transforms": {str(k): t.to_dict() for k, t in transforms.items()},
            "fallback_segments": fallbacks}
    return EditPackage(reference=reference, coarse=coarse, mask=mask,
                       correspondence=CorrespondenceMap(corr),
                       provenance=EditProvenance.PIECEWISE_AFFINE_MODEL, meta=meta)


@dataclass(frozen=True)
class UserOp:
    """One collage action on a segment label."""

    label: int
    kind: str  # transform | delete | duplicate
    transform: AffineTransform2D | None = None
    z_hint: int | None = None

    KINDS = ("transform", "delete", "duplicate")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")
        if self.kind in ("transform", "duplicate") and self.transform is None:
            raise ValueError(f"{self.kind} op needs a transform")

    @classmethod
    def from_dict(cls, d: dict) -> "UserOp":
        tf = AffineTransform2D.from_dict(d["transform"]) if d.get("transform") else None
        return cls(label=int(d["label"]), kind=str(d["kind"]), transform=tf,
                   z_hint=None if d.get("z_hint") is None else int(d["z_hint"]))

    def to_dict(self) -> dict:
        d = {"label": self.label, "kind": self.kind}
        if self.transform is not None:
            d["transform"] = self.transform.to_dict()
        if self.z_hint is not None:
            d["z_hint"] = self.z_hint
        return d


def apply_user_edit(reference: RasterImage, segments: SegmentMap, ops: list[UserOp],
                    depth: DepthMap | None = None) -> EditPackage:
    """Apply explicit collage ops and build the resulting EditPackage.

    Transformed and deleted segments vacate their source footprints;
    duplicates keep the original in place. Untouched content stays put as the
    base layer. With a depth map, new layers z-test against the base per
    pixel and stack among themselves by source mean depth; without one,
    edited segments always land above untouched content in op order.
    """
    h, w = reference.height, reference.width
    if (segments.height, segments.width) != (h, w):
        raise ValueError("apply_user_edit dimension mismatch")
    if depth is not None and (depth.height, depth.width) != (h, w):
        raise ValueError("apply_user_edit depth dimension mismatch")

    num = segments.num_segments
    for op in ops:
        if op.label < 1 or op.label > num:
            raise ValueError(f"unknown segment label {op.label}")
        if op.transform is not None and not op.transform.is_invertible():
            raise ValueError(f"op on segment {op.label} has a singular transform")

    vacated = np.zeros((h, w), dtype=bool)
    layers: list[_Layer] = []
    new_labels: list[int] = []
    next_label = num + 1
    for idx, op in enumerate(ops):
        foot = segments.footprint(op.label)
        if op.kind in ("transform", "delete"):
            vacated |= foot
        if op.kind == "delete":
            continue
        if op.kind == "duplicate":
            new_labels.append(next_label)
            next_label += 1
        covered, color, corr = _render_segment_layer(reference, foot, op.transform)
        layer_depth = float(depth.depth[foot].mean()) if depth is not None else 0.0
        order = float(op.z_hint) if op.z_hint is not None else float(idx)
        layers.append(_Layer(covered, color, corr, layer_depth, order))

    base_valid = ~vacated
    base_depth = depth.depth if depth is not None else None
    covered, color, corr = _composite(reference, layers, base_valid, base_depth)
    mask = BinaryMask(~covered)
    corr[~covered] = np.nan
    coarse = inpaint_holes(RasterImage(color), mask)
    meta = {"ops": [op.to_dict() for op in ops], "new_labels": new_labels}
    return EditPackage(reference=reference, coarse=coarse, mask=mask,
                       correspondence=CorrespondenceMap(corr),
                       provenance=EditProvenance.USER_COLLAGE, meta=meta)


# ---------------------------------------------------------------------------
# EditPackage directory serialization


def save_edit_package(pkg: EditPackage, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfio.save_png(pkg.reference, directory / "reference.png", bitdepth=16)
    cfio.save_png(pkg.coarse, directory / "coarse.png", bitdepth=16)
    cfio.save_png(RasterImage(pkg.mask.bits.astype(np.float32)), directory / "mask.png", bitdepth=8)
    cfio.save_tensor(pkg.correspondence.source, directory / "corr.mfxt")
    meta = {"provenance": pkg.provenance.value, **pkg.meta}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))


def load_edit_package(directory: str | Path) -> EditPackage:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    reference = cfio.load_png(directory / "reference.png")
    coarse = cfio.load_png(directory / "coarse.png")
    mask = BinaryMask(cfio.load_png(directory / "mask.png").data[..., 0] > 0.5)
    corr = CorrespondenceMap(cfio.load_tensor(directory / "corr.mfxt"))
    provenance = EditProvenance(meta.pop("provenance"))
    return EditPackage(reference=reference, coarse=coarse, mask=mask,
                       correspondence=corr, provenance=provenance, meta=meta)
