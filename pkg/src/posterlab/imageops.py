"""Pixel-level primitives: decoding, grayscale, sRGB to CIELAB, resizing and gradients.

Images are plain ``uint8`` numpy arrays, shape ``(H, W)`` or ``(H, W, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

CANONICAL_SIZE = (256, 384)  # (width, height), 2:3 poster aspect
GIST_SIZE = (256, 256)


class ImageDecodeError(ValueError):
    pass


def decode(path: Path | str) -> np.ndarray:
    """Load a PNG or JPEG as an 8-bit grayscale or RGB array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise ImageDecodeError(f"{path}: unsupported format {im.format}")
            im.load()
            if im.mode in ("L", "1", "I;16", "I"):
                im = im.convert("L")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            return np.array(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"{path}: unsupported or corrupt image") from exc
    except (OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: corrupt image ({exc})") from exc


def image_size(path: Path | str) -> tuple[int, int]:
    """(width, height) read from the file header without decoding pixels."""
    try:
        with Image.open(path) as im:
            return im.size
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"{path}: unsupported or corrupt image") from exc


def encode_png(image: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got shape {image.shape}")
    rgb = image.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


# sRGB primaries to XYZ, D65.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


def _srgb_linearize(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _xyz(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, ...]:
    # Elementwise on purpose: the white point goes through the same arithmetic,
    # so (255, 255, 255) lands on a = b = 0 exactly.
    m = _RGB_TO_XYZ
    return tuple(m[i, 0] * r + m[i, 1] * g + m[i, 2] * b for i in range(3))


_WHITE = tuple(float(v) for v in _xyz(np.float64(1.0), np.float64(1.0), np.float64(1.0)))


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB (8-bit) to CIELAB under D65; returns float array ``(H, W, 3)``."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("rgb_to_lab needs a 3-channel image")
    lin = _srgb_linearize(image.astype(np.float64) / 255.0)
    x, y, z = _xyz(lin[..., 0], lin[..., 1], lin[..., 2])
    fx = _lab_f(x / _WHITE[0])
    fy = _lab_f(y / _WHITE[1])
    fz = _lab_f(z / _WHITE[2])
    lab = np.empty(image.shape[:2] + (3,), dtype=np.float64)
    lab[..., 0] = 116.0 * fy - 16.0
    lab[..., 1] = 500.0 * (fx - fy)
    lab[..., 2] = 200.0 * (fy - fz)
    return lab


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Pixel-center alignment, sample positions clamped to the valid range.
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to ``width`` x ``height``; identity returns an equal copy."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image.copy()
    x0, x1, fx = _axis_weights(w, width)
    y0, y1, fy = _axis_weights(h, height)
    src = image.astype(np.float64)
    if src.ndim == 3:
        fx = fx[:, None]
        fy_col = fy[:, None, None]
    else:
        fy_col = fy[:, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy_col) + bot * fy_col
    if image.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


@dataclass(frozen=True)
class GradientField:
    magnitude: np.ndarray
    orientation: np.ndarray
    signed: bool

    @property
    def period(self) -> float:
        return 2 * np.pi if self.signed else np.pi


def gradients(gray: np.ndarray, mode: str = "unsigned") -> GradientField:
    """Central-difference gradients with replicated borders.

    ``gx = (I[x+1] - I[x-1]) / 2`` so a unit ramp has unit magnitude. Rows grow
    downward; orientation is ``atan2(gy, gx)`` folded into [0, pi) for
    ``unsigned`` or [0, 2 pi) for ``signed``.
    """
    if mode not in ("signed", "unsigned"):
        raise ValueError(f"mode must be 'signed' or 'unsigned', got {mode!r}")
    if gray.ndim != 2:
        raise ValueError("gradients need a single-channel image")
    if min(gray.shape) < 3:
        raise ValueError(f"image too small for gradients: {gray.shape}")
    img = np.pad(gray.astype(np.float64), 1, mode="edge")
    gx = (img[1:-1, 2:] - img[1:-1, :-2]) / 2.0
    gy = (img[2:, 1:-1] - img[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    period = 2 * np.pi if mode == "signed" else np.pi
    ori = np.mod(np.arctan2(gy, gx), period)
    # mod can round up to exactly period for tiny negative angles
    ori[ori >= period] = 0.0
    return GradientField(mag, ori, mode == "signed")
