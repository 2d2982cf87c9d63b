"""Shared value types and image math used across the pipeline.

Conventions:
  * images are float32 arrays of shape (H, W, C); editing-space images live
    in [0, 1], diffusion-space images in [-1, 1], conversions are explicit
  * image coordinates: x = column, y = row, origin at the top-left corner
  * flow fields store per-pixel displacement (dx, dy) in pixels, so the
    destination of a source pixel p is p + flow(p)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


class RasterImage:
    """H x W x C float image container (C in {1, 2, 3})."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {data.shape}")
        h, w, c = data.shape
        if h == 0 or w == 0:
            raise ValueError(f"image must be non-empty, got shape {data.shape}")
        if c not in (1, 2, 3):
            raise ValueError(f"channels must be 1, 2 or 3, got {c}")
        self.data = _freeze(data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def full(cls, height: int, width: int, value: float, channels: int = 3) -> "RasterImage":
        return cls(np.full((height, width, channels), value, dtype=np.float32))

    def same_size(self, other) -> bool:
        return self.height == other.height and self.width == other.width

    def __repr__(self):
        return f"RasterImage({self.height}x{self.width}x{self.channels})"


class FlowField:
    """H x W x 2 per-pixel displacement field in pixels, (dx, dy) last axis.

    Stored at double precision: the per-segment fitting contracts promise
    residuals at the 1e-9 level, which single precision cannot carry.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow contains NaN or Inf entries")
        self.data = _freeze(data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def zero(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @classmethod
    def uniform(cls, height: int, width: int, dx: float, dy: float) -> "FlowField":
        data = np.empty((height, width, 2), dtype=np.float64)
        data[..., 0] = dx
        data[..., 1] = dy
        return cls(data)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.data[..., 0] ** 2 + self.data[..., 1] ** 2)

    def __repr__(self):
        return f"FlowField({self.height}x{self.width})"


class BinaryMask:
    """H x W {0,1} mask; 1 marks a hole (missing content), 0 valid content."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be HxW, got shape {bits.shape}")
        if bits.dtype == bool:
            bits = bits.astype(np.uint8)
        else:
            uniq = np.unique(bits)
            if not np.all(np.isin(uniq, (0, 1))):
                raise ValueError("mask values must be 0 or 1")
            bits = bits.astype(np.uint8)
        self.bits = _freeze(bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    def as_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def hole_fraction(self) -> float:
        return float(self.bits.mean())

    def __repr__(self):
        return f"BinaryMask({self.height}x{self.width}, holes={int(self.bits.sum())})"


class SegmentMap:
    """H x W non-negative integer labels; 0 is unsegmented background.

    Positive labels must be gap-free: every label in 1..max(labels) occurs.
    """

    __slots__ = ("labels",)

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"segment map must be HxW, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("segment labels must be integers")
        if labels.min(initial=0) < 0:
            raise ValueError("segment labels must be non-negative")
        present = np.unique(labels)
        top = int(present.max(initial=0))
        positive = present[present > 0]
        if len(positive) != top:
            missing = sorted(set(range(1, top + 1)) - set(int(v) for v in positive))
            raise ValueError(f"segment labels must be contiguous, missing {missing}")
        self.labels = _freeze(labels.astype(np.int32))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_segments(self) -> int:
        return int(self.labels.max(initial=0))

    def footprint(self, label: int) -> np.ndarray:
        return self.labels == label

    def __repr__(self):
        return f"SegmentMap({self.height}x{self.width}, K={self.num_segments})"


class DepthMap:
    """H x W positive depth; larger values are farther from the camera."""

    __slots__ = ("depth",)

    def __init__(self, depth: np.ndarray):
        depth = np.asarray(depth, dtype=np.float32)
        if depth.ndim != 2:
            raise ValueError(f"depth map must be HxW, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
            raise ValueError("depth must be finite and strictly positive")
        self.depth = _freeze(depth)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def __repr__(self):
        return f"DepthMap({self.height}x{self.width})"


@dataclass(frozen=True)
class AffineTransform2D:
    """2D affine map p -> A @ p + t with p = (x, y) column vector."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform2D":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def similarity(cls, scale: float, angle: float, tx: float = 0.0, ty: float = 0.0,
                   mirror: bool = False) -> "AffineTransform2D":
        """Scale * rotation (optionally composed with an x-mirror) + translation."""
        c, s = np.cos(angle), np.sin(angle)
        mx = -1.0 if mirror else 1.0
        return cls(scale * c * mx, -scale * s, scale * s * mx, scale * c,
                   float(tx), float(ty))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]], dtype=np.float64)

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.tx, self.ty], dtype=np.float64)

    @property
    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def is_invertible(self, eps: float = 1e-9) -> bool:
        d = self.determinant
        return np.isfinite(d) and abs(d) > eps

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (..., 2) array of (x, y) points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + self.offset

    def inverse(self) -> "AffineTransform2D":
        d = self.determinant
        if not self.is_invertible():
            raise ValueError(f"transform is singular (det={d})")
        i11, i12 = self.a22 / d, -self.a12 / d
        i21, i22 = -self.a21 / d, self.a11 / d
        return AffineTransform2D(i11, i12, i21, i22,
                                 -(i11 * self.tx + i12 * self.ty),
                                 -(i21 * self.tx + i22 * self.ty))

    def compose(self, inner: "AffineTransform2D") -> "AffineTransform2D":
        """self after inner: (self o inner)(p) = self(inner(p))."""
        m = self.matrix @ inner.matrix
        t = self.matrix @ inner.offset + self.offset
        return AffineTransform2D(m[0, 0], m[0, 1], m[1, 0], m[1, 1], t[0], t[1])

    def about(self, cx: float, cy: float) -> "AffineTransform2D":
        """Re-anchor a linear map so it acts about (cx, cy) instead of the origin."""
        pre = AffineTransform2D.translation(-cx, -cy)
        post = AffineTransform2D.translation(cx, cy)
        return post.compose(self).compose(pre)

    def to_dict(self) -> dict:
        return {"a11": self.a11, "a12": self.a12, "a21": self.a21, "a22": self.a22,
                "tx": self.tx, "ty": self.ty}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform2D":
        return cls(float(d["a11"]), float(d["a12"]), float(d["a21"]), float(d["a22"]),
                   float(d["tx"]), float(d["ty"]))


class CorrespondenceMap:
    """Per output pixel, the (sx, sy) source coordinate in the reference.

    Pixels with no source (holes) store NaN in both components.
    """

    __slots__ = ("source",)

    def __init__(self, source: np.ndarray):
        source = np.asarray(source, dtype=np.float32)
        if source.ndim != 3 or source.shape[2] != 2:
            raise ValueError(f"correspondence must be HxWx2, got shape {source.shape}")
        # NONE entries must be NaN in both lanes, never in just one.
        nan = np.isnan(source)
        if np.any(nan[..., 0] != nan[..., 1]):
            raise ValueError("correspondence NONE entries must blank both coordinates")
        self.source = _freeze(source)

    @property
    def height(self) -> int:
        return self.source.shape[0]

    @property
    def width(self) -> int:
        return self.source.shape[1]

    @classmethod
    def identity(cls, height: int, width: int) -> "CorrespondenceMap":
        xs, ys = np.meshgrid(np.arange(width, dtype=np.float32),
                             np.arange(height, dtype=np.float32))
        return cls(np.stack([xs, ys], axis=-1))

    def none_mask(self) -> np.ndarray:
        return np.isnan(self.source[..., 0])

    def __repr__(self):
        return f"CorrespondenceMap({self.height}x{self.width})"


class EditProvenance(enum.Enum):
    USER_COLLAGE = "user-collage"
    FLOW_MODEL = "flow-model"
    PIECEWISE_AFFINE_MODEL = "piecewise-affine-model"


@dataclass(frozen=True)
class EditPackage:
    """A coarse edit plus the bookkeeping the model consumes.

    `coarse` is the inpainted edit; pixels with mask=0 are untouched by
    inpainting and must trace back to `reference` through `correspondence`.
    """

    reference: RasterImage
    coarse: RasterImage
    mask: BinaryMask
    correspondence: CorrespondenceMap
    provenance: EditProvenance
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {(self.reference.height, self.reference.width),
                  (self.coarse.height, self.coarse.width),
                  (self.mask.height, self.mask.width),
                  (self.correspondence.height, self.correspondence.width)}
        if len(shapes) != 1:
            raise ValueError(f"edit package dimensions disagree: {sorted(shapes)}")

    def traceback_error(self) -> float:
        """Max |coarse - resampled reference| over mask=0 pixels (pre-inpainting check)."""
        valid = ~self.mask.as_bool()
        if not valid.any():
            return 0.0
        sx = self.correspondence.source[..., 0][valid]
        sy = self.correspondence.source[..., 1][valid]
        resampled = bilinear_sample_many(self.reference.data, sx, sy)
        return float(np.abs(self.coarse.data[valid] - resampled).max())

    def validate(self, tol: float = 1e-4) -> None:
        holes = self.mask.as_bool()
        if np.any(self.correspondence.none_mask() != holes):
            raise ValueError("correspondence NONE entries must coincide with mask=1")
        err = self.traceback_error()
        if err > tol:
            raise ValueError(f"coarse does not trace back to reference: max err {err:.2e} > {tol}")


# ---------------------------------------------------------------------------
# image math


def bilinear_sample_many(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of an (H, W, C) array at float coordinates.

    Out-of-bounds coordinates clamp to the image border, so lookups are total.
    Returns an array shaped like xs plus a trailing channel axis.
    """
    h, w = data.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return (top * (1.0 - fy) + bot * fy).astype(data.dtype)


def bilinear_sample(image: RasterImage, x: float, y: float) -> np.ndarray:
    """Sample one point from an image; returns a length-C channel vector."""
    return bilinear_sample_many(image.data, np.float64(x), np.float64(y))


def to_diffusion_space(image: RasterImage) -> RasterImage:
    """Map [0,1] editing-space values to [-1,1] model space."""
    return RasterImage(image.data * 2.0 - 1.0)


def from_diffusion_space(image: RasterImage) -> RasterImage:
    """Map [-1,1] model space back to [0,1], clamping overshoot."""
    return RasterImage(np.clip((image.data + 1.0) * 0.5, 0.0, 1.0))
