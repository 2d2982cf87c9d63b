"""Flow composition, warping, softmax splatting, and the pair-rejection filter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BinaryMask, FlowField, RasterImage, bilinear_sample_many

DEFAULT_BETA = 10.0
COVERAGE_EPS = 1e-4

REJECT_MAGNITUDE = 350.0  # pixels
REJECT_FRACTION = 0.10


@dataclass(frozen=True)
class SplatResult:
    """Forward-warp output: normalized image, accumulated splat mass, holes."""

    image: RasterImage
    weight: np.ndarray  # H x W accumulated bilinear mass, >= 0
    coverage: BinaryMask  # 1 where weight < COVERAGE_EPS


def _check_same_grid(a, b, what: str) -> None:
    if a.height != b.height or a.width != b.width:
        raise ValueError(f"{what}: {a.height}x{a.width} vs {b.height}x{b.width}")


def backward_warp(image: RasterImage, flow: FlowField) -> RasterImage:
    """Resample so that output(p) = image(p + flow(p)), clamping at borders."""
    _check_same_grid(image, flow, "backward_warp dimension mismatch")
    h, w = flow.height, flow.width
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    out = bilinear_sample_many(image.data, xs + flow.data[..., 0], ys + flow.data[..., 1])
    return RasterImage(out)


def compose_flows(flows: Sequence[FlowField]) -> FlowField:
    """Chain per-step displacement fields into one end-to-end field.

    flows[i] maps frame i to frame i+1; the accumulator follows
    F_{k+1}(p) = F_k(p) + flows[k](p + F_k(p)) with bilinear lookups.
    """
    if len(flows) == 0:
        raise ValueError("compose_flows needs at least one flow")
    first = flows[0]
    for f in flows[1:]:
        _check_same_grid(first, f, "compose_flows dimension mismatch")
    h, w = first.height, first.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    acc = first.data.astype(np.float64)
    for step in flows[1:]:
        sampled = bilinear_sample_many(step.data, xs + acc[..., 0], ys + acc[..., 1])
        acc = acc + sampled
    return FlowField(acc)


def _corner_contributions(flow: FlowField):
    """Yield (target_flat_index, source_flat_index, bilinear_weight) per corner.

    Contributions whose target corner falls outside the frame are dropped:
    content leaving the frame genuinely disoccludes.
    """
    h, w = flow.height, flow.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    px = (xs + flow.data[..., 0]).ravel()
    py = (ys + flow.data[..., 1]).ravel()
    src = np.arange(h * w)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    for cx, cy, b in ((x0, y0, (1 - fx) * (1 - fy)),
                      (x0 + 1, y0, fx * (1 - fy)),
                      (x0, y0 + 1, (1 - fx) * fy),
                      (x0 + 1, y0 + 1, fx * fy)):
        inb = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        yield (cy[inb] * w + cx[inb]), src[inb], b[inb]


def softmax_splat(image: RasterImage, flow: FlowField,
                  importance: np.ndarray | None = None,
                  beta: float = DEFAULT_BETA) -> SplatResult:
    """Forward warp with importance-softmax blending of colliding sources.

    Each source pixel q lands at q + flow(q) and spreads over the 4 nearest
    integer pixels with bilinear weights b; colliding contributions blend with
    weights b * exp(beta * importance(q)). The importance map is shifted by
    its global max before exponentiation, which makes the blend invariant to
    constant importance offsets and keeps the exponentials bounded. Coverage
    is decided by the plain bilinear mass, so the hole pattern depends on the
    flow alone.
    """
    _check_same_grid(image, flow, "softmax_splat dimension mismatch")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    h, w = flow.height, flow.width
    n = h * w
    if importance is None:
        z = np.zeros(n)
    else:
        importance = np.asarray(importance, dtype=np.float64)
        if importance.shape != (h, w):
            raise ValueError(f"importance shape {importance.shape} != {(h, w)}")
        if not np.all(np.isfinite(importance)):
            raise ValueError("importance contains NaN or Inf")
        z = importance.ravel()
    ez = np.exp(beta * (z - z.max()))

    values = image.data.reshape(n, image.channels).astype(np.float64)
    mass = np.zeros(n)
    den = np.zeros(n)
    num = np.zeros((n, image.channels))
    for tgt, src, b in _corner_contributions(flow):
        sw = b * ez[src]
        mass += np.bincount(tgt, weights=b, minlength=n)
        den += np.bincount(tgt, weights=sw, minlength=n)
        for c in range(image.channels):
            num[:, c] += np.bincount(tgt, weights=sw * values[src, c], minlength=n)

    covered = mass >= COVERAGE_EPS
    out = np.zeros((n, image.channels))
    np.divide(num, den[:, None], out=out, where=covered[:, None] & (den[:, None] > 0))
    return SplatResult(
        image=RasterImage(out.reshape(h, w, image.channels).astype(np.float32)),
        weight=mass.reshape(h, w),
        coverage=BinaryMask(~covered.reshape(h, w)),
    )


def splat_dominant_source(flow: FlowField, importance: np.ndarray | None = None,
                          beta: float = DEFAULT_BETA,
                          src_valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Resolve, per target pixel, the source pixel with the largest splat weight.

    Returns (source, covered): source is H x W x 2 float (sx, sy), NaN where
    nothing of substance lands; covered is the boolean complement of the hole
    pattern, identical to softmax_splat's coverage for the same flow. When
    `src_valid` is given, only those source pixels participate.
    """
    h, w = flow.height, flow.width
    n = h * w
    if importance is None:
        z = np.zeros(n)
    else:
        z = np.asarray(importance, dtype=np.float64).ravel()
        if z.size != n or not np.all(np.isfinite(z)):
            raise ValueError("bad importance map")
    ez = np.exp(beta * (z - z.max()))
    keep = None if src_valid is None else np.asarray(src_valid, dtype=bool).ravel()

    contributions = []
    for tgt, src, b in _corner_contributions(flow):
        if keep is not None:
            sel = keep[src]
            tgt, src, b = tgt[sel], src[sel], b[sel]
        contributions.append((tgt, src, b))
    mass = np.zeros(n)
    best = np.zeros(n)
    for tgt, src, b in contributions:
        mass += np.bincount(tgt, weights=b, minlength=n)
        np.maximum.at(best, tgt, b * ez[src])
    winner = np.full(n, -1, dtype=np.int64)
    for tgt, src, b in contributions:
        hit = (b * ez[src]) == best[tgt]
        winner[tgt[hit]] = src[hit]

    covered = (mass >= COVERAGE_EPS) & (winner >= 0)
    source = np.full((n, 2), np.nan, dtype=np.float32)
    source[covered, 0] = (winner[covered] % w).astype(np.float32)
    source[covered, 1] = (winner[covered] // w).astype(np.float32)
    return source.reshape(h, w, 2), covered.reshape(h, w)


def flow_reject(flow: FlowField, frac: float = REJECT_FRACTION,
                mag: float = REJECT_MAGNITUDE) -> bool:
    """True when the motion is too large to make a usable training pair.

    Rejects iff at least `frac` of the pixels move by at least `mag` pixels;
    both thresholds are inclusive.
    """
    big = int(np.count_nonzero(flow.magnitude() >= mag))
    return big / (flow.height * flow.width) >= frac


def endpoint_error(f1: FlowField, f2: FlowField,
                   valid: np.ndarray | BinaryMask | None = None) -> float:
    """Mean Euclidean endpoint difference in pixels over the valid region.

    `valid` may be a boolean array (True = count the pixel) or a BinaryMask,
    whose set bits mark holes and are excluded.
    """
    _check_same_grid(f1, f2, "endpoint_error dimension mismatch")
    diff = f1.data.astype(np.float64) - f2.data.astype(np.float64)
    err = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    if valid is None:
        keep = np.ones(err.shape, dtype=bool)
    elif isinstance(valid, BinaryMask):
        keep = ~valid.as_bool()
    else:
        keep = np.asarray(valid, dtype=bool)
    if keep.shape != err.shape:
        raise ValueError(f"valid mask shape {keep.shape} != {err.shape}")
    if not keep.any():
        raise ValueError("endpoint_error: no valid pixels")
    return float(err[keep].mean())
