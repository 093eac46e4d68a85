"""Image decoding, heuristic quality gates, and the DCT perceptual hash."""

from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image, ImageOps
from scipy.fft import dct

from .config import FilterConfig

REJECT_TOO_SMALL = "too_small"
REJECT_BAD_ASPECT = "bad_aspect"
REJECT_LOW_COLOR = "low_color"
REJECT_DECODE_FAILED = "decode_failed"

_FORMAT_NAMES = {"JPEG": "jpeg", "PNG": "png", "WEBP": "webp", "GIF": "gif_first_frame"}

# disarm PIL's decompression-bomb guard only up to a sane pipeline bound
Image.MAX_IMAGE_PIXELS = 64_000_000


@dataclass
class DecodedImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row-major RGB
    source_format: str

    def __post_init__(self):
        assert self.pixels.shape == (self.height, self.width, 3)


def decode_image(data: bytes, counters: Counter | None = None) -> Optional[DecodedImage]:
    """Decode image bytes to RGB8 with EXIF orientation applied.

    Animated GIFs contribute their first frame only. Undecodable input is a
    counted reject (decode_failed), not an error.
    """
    if counters is None:
        counters = Counter()
    try:
        img = Image.open(io.BytesIO(data))
        fmt = _FORMAT_NAMES.get(img.format or "", "other")
        img = ImageOps.exif_transpose(img)
        if img.mode != "RGB":
            img = img.convert("RGB")
        pixels = np.asarray(img, dtype=np.uint8)
    except Exception:
        counters[REJECT_DECODE_FAILED] += 1
        return None
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.size == 0:
        counters[REJECT_DECODE_FAILED] += 1
        return None
    return DecodedImage(
        width=pixels.shape[1],
        height=pixels.shape[0],
        pixels=pixels,
        source_format=fmt,
    )


def count_unique_colors(img: DecodedImage, cap: int) -> int:
    """Exact count of distinct RGB triples, saturating at cap.

    Scans in chunks and exits early once cap distinct colors are seen, so
    large photographic images never pay for a full unique pass.
    """
    flat = img.pixels.reshape(-1, 3).astype(np.uint32)
    packed = (flat[:, 0] << 16) | (flat[:, 1] << 8) | flat[:, 2]
    uniques: np.ndarray | None = None
    for start in range(0, len(packed), 65536):
        chunk = np.unique(packed[start : start + 65536])
        uniques = chunk if uniques is None else np.union1d(uniques, chunk)
        if len(uniques) >= cap:
            return cap
    return 0 if uniques is None else int(len(uniques))


def quality_gate(img: DecodedImage, cfg: FilterConfig) -> tuple[bool, Optional[str]]:
    """(accepted, reject_reason). Checks run small → aspect → color; the
    first failing check is the one reported. Aspect bounds are inclusive."""
    if img.width < cfg.min_dim or img.height < cfg.min_dim:
        return False, REJECT_TOO_SMALL
    aspect = img.width / img.height
    if aspect < cfg.aspect_min or aspect > cfg.aspect_max:
        return False, REJECT_BAD_ASPECT
    if count_unique_colors(img, cfg.min_unique_colors) < cfg.min_unique_colors:
        return False, REJECT_LOW_COLOR
    return True, None


def _luma_rec601(pixels: np.ndarray) -> np.ndarray:
    p = pixels.astype(np.float64)
    return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]


def _resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and clamped borders:
    source coordinate for output index i is (i + 0.5) * in/out - 0.5."""
    in_h, in_w = arr.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[y0][:, x0] * (1.0 - wx) + arr[y0][:, x1] * wx
    bot = arr[y1][:, x0] * (1.0 - wx) + arr[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def phash(img: DecodedImage) -> int:
    """64-bit perceptual hash from low-frequency DCT structure.

    Rec.601 luma, bilinear resize to 32x32, 2-D DCT-II; the 64 hash slots
    are the top-left 8x8 coefficient block minus the DC term, extended by
    the next coefficient in row-major reading order (row 7, column 8).
    Each slot is thresholded against the slot median and packed MSB-first.
    """
    luma = _luma_rec601(img.pixels)
    small = _resize_bilinear(luma, 32, 32)
    coeffs = dct(dct(small, axis=0, type=2), axis=1, type=2)
    block = coeffs[:8, :8].ravel()
    slots = np.concatenate([block[1:], coeffs[7:8, 8]])
    median = np.median(slots)
    value = 0
    for bit in slots > median:
        value = (value << 1) | int(bit)
    return value


def phash_hex(value: int) -> str:
    return f"{value:016x}"
