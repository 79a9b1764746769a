"""Thermal preprocessing: smoothing, Otsu-based background removal, 8-bit remap.

The chain turns a raw 16-bit thermogram into a background-suppressed 8-bit
image: a box filter smooths the frame, Otsu's method on the smoothed
histogram picks a threshold, a signed compensation offset is added, every
pixel at or below the effective threshold is clamped to it, and the result is
remapped to 8 bits (so the clamped background lands exactly at 0), followed
by an optional crop.

All arithmetic is exact integer math with round-half-up, so results match
brute-force oracles bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

Rect = Tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive end)


@dataclass
class ThermalFrame:
    pixels: np.ndarray  # uint16, (H, W)
    subject_id: str = ""
    minute_index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint16)
        if self.pixels.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {self.pixels.shape}")


@dataclass
class Gray8Frame:
    pixels: np.ndarray  # uint8, (H, W)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {self.pixels.shape}")


@dataclass
class PreprocessConfig:
    smooth_kernel: Optional[int] = None  # None: scale the full-size 101 kernel by height
    compensation: int = 0
    crop: Optional[Rect] = None
    use_smoothed: bool = False  # remap the smoothed frame instead of the raw one

    def kernel_for(self, height: int) -> int:
        if self.smooth_kernel is not None:
            return self.smooth_kernel
        return default_smooth_kernel(height)


def default_smooth_kernel(height: int) -> int:
    """Nearest odd integer to 101 * height / 480, at least 1."""
    k = int(np.floor(101.0 * height / 480.0 + 0.5))
    if k % 2 == 0:
        # pick the nearer odd neighbor; exact .5 distance resolves upward
        k += 1 if (101.0 * height / 480.0) >= k else -1
    return max(k, 1)


def box_filter(pixels: np.ndarray, k: int) -> np.ndarray:
    """k x k mean filter with edge replication, rounded half-up, exact."""
    pixels = np.asarray(pixels, dtype=np.uint16)
    h, w = pixels.shape
    if k % 2 == 0 or k < 1:
        raise ValueError(f"box filter kernel must be odd and positive, got {k}")
    if k > min(h, w):
        raise ValueError(f"kernel {k} exceeds image extent {h}x{w}")
    if k == 1:
        return pixels.copy()
    r = k // 2
    padded = np.pad(pixels.astype(np.int64), r, mode="edge")
    integral = np.zeros((h + 2 * r + 1, w + 2 * r + 1), dtype=np.int64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=integral[1:, 1:])
    win = (integral[k:, k:] - integral[:-k, k:]
           - integral[k:, :-k] + integral[:-k, :-k])
    out = (2 * win + k * k) // (2 * k * k)
    return out.astype(np.uint16)


@dataclass
class OtsuResult:
    threshold: int
    degenerate: bool = False


def otsu_threshold(pixels: np.ndarray) -> OtsuResult:
    """Threshold maximizing between-class variance over the 16-bit histogram.

    Class 0 holds intensities <= t.  Ties resolve to the smallest t.  The
    criterion is compared as exact integer fractions, so the result agrees
    with exhaustive search bit for bit.  A constant image yields its own
    value with the degenerate flag set.
    """
    pixels = np.asarray(pixels, dtype=np.uint16)
    if pixels.size == 0:
        raise ValueError("empty frame")
    hist = np.bincount(pixels.ravel(), minlength=65536).astype(np.int64)
    values = np.nonzero(hist)[0]
    if values.size == 1:
        return OtsuResult(int(values[0]), degenerate=True)
    total = int(pixels.size)
    total_sum = int(np.dot(values, hist[values]))
    # between-class variance at t is proportional to
    # (S0*w1 - S1*w0)^2 / (w0*w1); compare fractions with integer cross products
    best_t, best_num, best_den = int(values[0]), -1, 1
    w0 = s0 = 0
    for v in values[:-1]:  # t == max puts everything in class 0
        v = int(v)
        w0 += int(hist[v])
        s0 += v * int(hist[v])
        w1 = total - w0
        s1 = total_sum - s0
        num = (s0 * w1 - s1 * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:  # strict: keeps the smallest t on ties
            best_t, best_num, best_den = v, num, den
    return OtsuResult(best_t, degenerate=False)


def remove_background(pixels: np.ndarray, t_effective: int) -> np.ndarray:
    """Clamp every pixel at or below the effective threshold up to it."""
    pixels = np.asarray(pixels, dtype=np.uint16)
    t = int(np.clip(t_effective, 0, 65535))
    return np.maximum(pixels, np.uint16(t))


def remap_to_8bit(pixels: np.ndarray) -> np.ndarray:
    """Full-range linear remap to [0, 255], round-half-up; constant maps to 0."""
    pixels = np.asarray(pixels, dtype=np.uint16)
    lo, hi = int(pixels.min()), int(pixels.max())
    if lo == hi:
        return np.zeros_like(pixels, dtype=np.uint8)
    span = hi - lo
    out = (2 * 255 * (pixels.astype(np.int64) - lo) + span) // (2 * span)
    return out.astype(np.uint8)


def crop(pixels: np.ndarray, rect: Rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    h, w = pixels.shape
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"crop rect {rect} outside or empty for {w}x{h} image")
    return pixels[y0:y1, x0:x1].copy()


@dataclass
class PreprocessResult:
    frame: Gray8Frame
    threshold: int       # Otsu threshold before compensation
    degenerate: bool


def preprocess_pipeline(pixels: np.ndarray, cfg: PreprocessConfig) -> PreprocessResult:
    """smooth -> Otsu -> +compensation -> clamp -> 8-bit remap -> optional crop.

    The smoothed frame only supplies the threshold; unless ``use_smoothed``
    is set, detail pixels come from the raw frame.
    """
    pixels = np.asarray(pixels, dtype=np.uint16)
    k = cfg.kernel_for(pixels.shape[0])
    smoothed = box_filter(pixels, k)
    otsu = otsu_threshold(smoothed)
    t_effective = otsu.threshold + cfg.compensation
    source = smoothed if cfg.use_smoothed else pixels
    cleaned = remove_background(source, t_effective)
    gray = remap_to_8bit(cleaned)
    if cfg.crop is not None:
        gray = crop(gray, cfg.crop)
    return PreprocessResult(Gray8Frame(gray), otsu.threshold, otsu.degenerate)
