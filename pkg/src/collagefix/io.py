"""File formats: PNG images, raw float tensors (MFXT), and .flo flow files.

MFXT layout: magic b"MFXT", u32 height, u32 width, u32 channels, then
height*width*channels little-endian f32 samples in row-major order.

Flow files use the common .flo layout: f32 magic 202021.25, i32 width,
i32 height, then interleaved f32 (dx, dy) row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

from .core import FlowField, RasterImage

MFXT_MAGIC = b"MFXT"
FLO_MAGIC = 202021.25


class FileFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PNG


def save_png(image: RasterImage, path: str | Path, bitdepth: int = 16) -> None:
    """Write a [0,1] image as an 8- or 16-bit PNG (1 or 3 channels)."""
    if image.channels not in (1, 3):
        raise FileFormatError(f"PNG supports 1 or 3 channels, got {image.channels}")
    if bitdepth == 8:
        quant = np.round(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif bitdepth == 16:
        quant = np.round(np.clip(image.data, 0.0, 1.0) * 65535.0).astype(np.uint16)
    else:
        raise FileFormatError(f"bitdepth must be 8 or 16, got {bitdepth}")
    if image.channels == 3:
        quant = cv2.cvtColor(quant, cv2.COLOR_RGB2BGR)
    else:
        quant = quant[:, :, 0]
    if not cv2.imwrite(str(path), quant):
        raise FileFormatError(f"failed to write PNG {path}")


def load_png(path: str | Path) -> RasterImage:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileFormatError(f"cannot decode PNG {path}")
    return _decode_png_array(raw, path)


def decode_png_bytes(blob: bytes) -> RasterImage:
    raw = cv2.imdecode(np.frombuffer(blob, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileFormatError("cannot decode PNG bytes")
    return _decode_png_array(raw, "<bytes>")


def encode_png_bytes(image: RasterImage, bitdepth: int = 8) -> bytes:
    if bitdepth == 8:
        quant = np.round(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        quant = np.round(np.clip(image.data, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if image.channels == 3:
        quant = cv2.cvtColor(quant, cv2.COLOR_RGB2BGR)
    else:
        quant = quant[:, :, 0]
    ok, buf = cv2.imencode(".png", quant)
    if not ok:
        raise FileFormatError("failed to encode PNG")
    return buf.tobytes()


def _decode_png_array(raw: np.ndarray, path) -> RasterImage:
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FileFormatError(f"unsupported PNG sample type {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2BGR)
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return RasterImage(raw.astype(np.float32) / scale)


# ---------------------------------------------------------------------------
# raw float tensors


def save_tensor(data: np.ndarray, path: str | Path) -> None:
    """Write an (H, W) or (H, W, C) float array as an MFXT file."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise FileFormatError(f"tensor must be HxW or HxWxC, got shape {data.shape}")
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(MFXT_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(data.astype("<f4").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    return decode_tensor_bytes(blob, path)


def decode_tensor_bytes(blob: bytes, path="<bytes>") -> np.ndarray:
    if blob[:4] != MFXT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise FileFormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + h * w * c * 4
    if len(blob) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, c)
    return data.astype(np.float32)


def encode_tensor_bytes(data: np.ndarray) -> bytes:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    return MFXT_MAGIC + struct.pack("<III", h, w, c) + data.astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# flow


def save_flo(flow: FlowField, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", flow.width, flow.height))
        f.write(flow.data.astype("<f4").tobytes())


def load_flo(path: str | Path) -> FlowField:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FileFormatError(f"{path}: truncated flow header")
    (magic,) = struct.unpack("<f", blob[:4])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise FileFormatError(f"{path}: bad flow magic {magic}")
    w, h = struct.unpack("<ii", blob[4:12])
    expected = 12 + h * w * 2 * 4
    if len(blob) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(data.astype(np.float32))
