"""Normalized boxes, binary masks, quantization and RLE codecs.

Shared numeric substrate for the data generator, the model heads and the
metric pipeline. Conventions fixed here:

* centers/sizes are fractions of the image (x = width axis, y = height axis);
* quantization rounds half away from zero, so examples are bit-stable;
* binary masks are 2D bool arrays indexed [row, col];
* RLE is column-major with a leading zero-run (COCO-style uncompressed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Center",
    "Size2D",
    "QuantConfig",
    "quantize_unit",
    "dequantize_unit",
    "quantize_coord",
    "dequantize_coord",
    "size_to_unit",
    "quantize_size",
    "quantize_size_array",
    "dequantize_size_array",
    "dequantize_size",
    "box_corners",
    "box_iou",
    "mask_iou",
    "mask_to_box",
    "rle_encode",
    "rle_decode",
    "validate_mask",
]


@dataclass(frozen=True)
class Center:
    """Object center as fractions of image width/height, both in [0, 1]."""

    x: float
    y: float

    def __post_init__(self):
        for v in (self.x, self.y):
            if not math.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValueError(f"center component out of [0,1]: {self!r}")


@dataclass(frozen=True)
class Size2D:
    """Object extent as fractions of image width/height, both in (0, 1]."""

    w: float
    h: float

    def __post_init__(self):
        for v in (self.w, self.h):
            if not math.isfinite(v) or not 0.0 < v <= 1.0:
                raise ValueError(f"size component out of (0,1]: {self!r}")


@dataclass(frozen=True)
class QuantConfig:
    """Per-axis bin count for coordinate/size discretization."""

    bins: int = 1024

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")


def _round_half_away(x):
    # np.round is banker's rounding; the contract is half-away-from-zero.
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def quantize_unit(values, bins: int) -> np.ndarray:
    """Map values in [0,1] to integer bins 0..bins-1 (vectorized core)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value in quantize input")
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ValueError("quantize input outside [0,1]")
    idx = _round_half_away(v * (bins - 1))
    return np.clip(idx, 0, bins - 1).astype(np.int64)


def dequantize_unit(idx, bins: int) -> np.ndarray:
    """Inverse of quantize_unit: bin b maps back to b/(bins-1)."""
    b = np.asarray(idx)
    if np.any(b < 0) or np.any(b >= bins):
        raise ValueError(f"bin index outside [0,{bins - 1}]")
    return b.astype(np.float64) / (bins - 1)


def quantize_coord(c: Center, q: QuantConfig) -> tuple[int, int]:
    """Discretize a center into (x_bin, y_bin)."""
    bx, by = quantize_unit([c.x, c.y], q.bins)
    return int(bx), int(by)


def dequantize_coord(bins_xy: tuple[int, int], q: QuantConfig) -> Center:
    x, y = dequantize_unit(list(bins_xy), q.bins)
    return Center(float(x), float(y))


def size_to_unit(s, bins: int) -> np.ndarray:
    """Log-scale size map: (0,1] -> [0,1], clamped below at 1/bins.

    s_tilde = (log2(max(s, 1/B)) - log2(1/B)) / (0 - log2(1/B))
    """
    v = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise ValueError("size must be finite and positive")
    lo = -math.log2(bins)  # log2(1/B)
    return (np.log2(np.maximum(v, 1.0 / bins)) - lo) / (0.0 - lo)


def quantize_size(s: Size2D, q: QuantConfig) -> tuple[int, int]:
    """Discretize a size on the log scale into (w_bin, h_bin)."""
    bw, bh = quantize_size_array([s.w, s.h], q.bins)
    return int(bw), int(bh)


def quantize_size_array(s, bins: int) -> np.ndarray:
    u = size_to_unit(s, bins)
    idx = _round_half_away(u * (bins - 1))
    return np.clip(idx, 0, bins - 1).astype(np.int64)


def dequantize_size_array(idx, bins: int) -> np.ndarray:
    u = dequantize_unit(idx, bins)
    return np.exp2(-math.log2(bins) * (1.0 - u))


def dequantize_size(bins_wh: tuple[int, int], q: QuantConfig) -> Size2D:
    w, h = dequantize_size_array(list(bins_wh), q.bins)
    return Size2D(float(w), float(h))


def box_corners(c: Center, s: Size2D) -> tuple[float, float, float, float]:
    """(x0, y0, x1, y1) of the center/size box, clipped to [0,1]."""
    x0 = max(0.0, c.x - s.w / 2.0)
    y0 = max(0.0, c.y - s.h / 2.0)
    x1 = min(1.0, c.x + s.w / 2.0)
    y1 = min(1.0, c.y + s.h / 2.0)
    return (x0, y0, x1, y1)


def box_iou(a: tuple[float, float, float, float],
            b: tuple[float, float, float, float]) -> float:
    """IoU of two corner boxes (x0, y0, x1, y1)."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return float(inter / union) if union > 0.0 else 0.0


def validate_mask(m: np.ndarray) -> np.ndarray:
    """Check a binary mask (2D, nonempty dims) and return it as bool."""
    arr = np.asarray(m)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask must be 2D with positive dims, got {arr.shape}")
    return arr.astype(bool)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two same-shape binary masks; two empty masks score 0."""
    a = validate_mask(a)
    b = validate_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return inter / union


def mask_to_box(m: np.ndarray) -> tuple[Center, Size2D]:
    """Tight bounding box of the nonzero pixels, as normalized center/size.

    Pixel (r, c) covers [c, c+1] x [r, r+1], so a single pixel at the origin
    of an 8x8 mask yields center (1/16, 1/16) and size (1/8, 1/8).
    """
    arr = validate_mask(m)
    rows, cols = np.nonzero(arr)
    if rows.size == 0:
        raise ValueError("cannot take bounding box of an empty mask")
    h, w = arr.shape
    x0, x1 = cols.min() / w, (cols.max() + 1) / w
    y0, y1 = rows.min() / h, (rows.max() + 1) / h
    return Center((x0 + x1) / 2, (y0 + y1) / 2), Size2D(x1 - x0, y1 - y0)


def rle_encode(m: np.ndarray) -> dict:
    """Uncompressed RLE: column-major scan, runs alternate starting with zeros.

    Returns {"size": [H, W], "counts": [...]} suitable for JSON.
    """
    arr = validate_mask(m)
    flat = arr.ravel(order="F").astype(np.int8)
    counts: list[int] = []
    boundaries = np.nonzero(np.diff(flat))[0]
    prev = -1
    for b in boundaries:
        counts.append(int(b - prev))
        prev = b
    counts.append(int(flat.size - 1 - prev))
    if flat[0] == 1:  # convention: first run counts zeros
        counts.insert(0, 0)
    return {"size": [int(arr.shape[0]), int(arr.shape[1])], "counts": counts}


def rle_decode(record: dict) -> np.ndarray:
    """Inverse of rle_encode; validates that counts fill the mask exactly."""
    try:
        h, w = (int(v) for v in record["size"])
        counts = [int(c) for c in record["counts"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"malformed RLE record: {e}") from e
    if h < 1 or w < 1:
        raise ValueError(f"bad RLE size {h}x{w}")
    if any(c < 0 for c in counts):
        raise ValueError("negative run length")
    if sum(counts) != h * w:
        raise ValueError(f"RLE counts sum {sum(counts)} != {h * w} pixels")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    return flat.reshape((h, w), order="F")
