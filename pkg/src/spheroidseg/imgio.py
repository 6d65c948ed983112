"""
Image and mask I/O, bit-depth/resolution preprocessing, overlays, augmentation.

Masks are plain 2-D boolean ``numpy`` arrays (``True`` = foreground).  Grayscale
frames travel as :class:`GrayImage`, which carries the bit depth and the
physical pixel size alongside the raster.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import cv2
import numpy as np

__all__ = [
    "DEFAULT_SCALE_UM_PER_PX",
    "GrayImage",
    "UnsupportedFormat",
    "DimensionMismatch",
    "load_image",
    "save_image",
    "to_8bit",
    "resize",
    "resize_to",
    "resize_mask",
    "save_mask",
    "load_mask",
    "render_overlay",
    "save_rgb",
    "augment",
    "TRANSFORMS",
]

PathLike = Union[str, os.PathLike]

DEFAULT_SCALE_UM_PER_PX = 2.04
TRANSFORMS = ("vflip", "hflip", "rot180")


class UnsupportedFormat(ValueError):
    """File is not a single-channel 8/16-bit raster we can handle."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """Single-channel raster with bit depth and physical scale.

    ``pixels`` has shape ``(height, width)`` and dtype ``uint8`` or ``uint16``
    matching ``bit_depth``.
    """

    pixels: np.ndarray
    bit_depth: int = 8
    scale_um_per_px: float = DEFAULT_SCALE_UM_PER_PX

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise UnsupportedFormat(f"expected 2-D raster, got shape {self.pixels.shape}")
        if self.bit_depth not in (8, 16):
            raise UnsupportedFormat(f"bit depth {self.bit_depth} not in {{8, 16}}")
        if self.scale_um_per_px <= 0:
            raise ValueError("scale_um_per_px must be positive")
        want = np.uint8 if self.bit_depth == 8 else np.uint16
        if self.pixels.dtype != want:
            raise UnsupportedFormat(
                f"dtype {self.pixels.dtype} does not match bit depth {self.bit_depth}"
            )

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


def _read_raw(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Cannot read image: {path}")
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise UnsupportedFormat(f"unreadable or unsupported image file: {path}")
    return arr


def load_image(path: PathLike, scale_um_per_px: float = DEFAULT_SCALE_UM_PER_PX) -> GrayImage:
    """Load a single-channel 8- or 16-bit PNG/TIFF.

    Multi-channel files are rejected rather than silently converted to gray.
    """
    arr = _read_raw(path)
    if arr.ndim != 2:
        raise UnsupportedFormat(
            f"{path}: expected a single-channel image, got {arr.shape[2]} channels"
        )
    if arr.dtype == np.uint8:
        depth = 8
    elif arr.dtype == np.uint16:
        depth = 16
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample type {arr.dtype}")
    return GrayImage(np.ascontiguousarray(arr), depth, scale_um_per_px)


def save_image(img: GrayImage, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img.pixels):
        raise OSError(f"failed to write {path}")


def to_8bit(img: GrayImage) -> GrayImage:
    """Min/max rescale to ``[0, 255]`` with round-half-up.

    A constant frame has no span and maps to all zeros.
    """
    v = img.pixels.astype(np.int64)
    lo, hi = int(v.min()), int(v.max())
    span = hi - lo
    if span == 0:
        out = np.zeros_like(v, dtype=np.uint8)
    else:
        # floor(255 * (v - lo) / span + 1/2) in exact integer arithmetic
        out = ((510 * (v - lo) + span) // (2 * span)).astype(np.uint8)
    return GrayImage(out, 8, img.scale_um_per_px)


def _as_fraction(factor) -> Fraction:
    if isinstance(factor, Fraction):
        return factor
    if isinstance(factor, float):
        return Fraction(factor).limit_denominator(10_000)
    return Fraction(factor)


def _bilinear_axis(n_in: int, n_out: int, step: float):
    # half-pixel-centre convention, edge samples clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * step - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def _bilinear(pixels: np.ndarray, out_h: int, out_w: int, step_y: float, step_x: float) -> np.ndarray:
    a = pixels.astype(np.float64)
    y0, y1, wy = _bilinear_axis(a.shape[0], out_h, step_y)
    x0, x1, wx = _bilinear_axis(a.shape[1], out_w, step_x)
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    out = top * (1 - wy)[:, None] + bot * wy[:, None]
    # 1e-9 guards values like 127.49999999 that are exact halves in real arithmetic
    return np.floor(out + 0.5 + 1e-9)


def resize(img: GrayImage, factor) -> GrayImage:
    """Bilinear downscale by ``factor`` in ``(0, 1]``.

    Output dims are ``floor(factor * dims)``; the physical pixel size grows by
    ``1 / factor`` so extents in µm are preserved.
    """
    f = _as_fraction(factor)
    if not 0 < f <= 1:
        raise ValueError(f"resize factor must be in (0, 1], got {factor}")
    out_w = int(f * img.width)
    out_h = int(f * img.height)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"degenerate target size {out_w}x{out_h}")
    if f == 1:
        return replace(img, pixels=img.pixels.copy())
    step = float(1 / f)
    out = _bilinear(img.pixels, out_h, out_w, step, step)
    return GrayImage(
        out.astype(img.pixels.dtype), img.bit_depth, img.scale_um_per_px / float(f)
    )


def resize_to(img: GrayImage, width: int, height: int) -> GrayImage:
    """Bilinear resize to an explicit size; the scale follows the x axis ratio."""
    if width < 1 or height < 1:
        raise ValueError(f"degenerate target size {width}x{height}")
    if (width, height) == (img.width, img.height):
        return replace(img, pixels=img.pixels.copy())
    sx = img.width / width
    sy = img.height / height
    out = _bilinear(img.pixels, height, width, sy, sx)
    return GrayImage(out.astype(img.pixels.dtype), img.bit_depth, img.scale_um_per_px * sx)


def resize_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resize so the result stays binary."""
    h, w = mask.shape
    ys = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return mask[ys][:, xs].astype(bool)


def save_mask(mask: np.ndarray, path: PathLike) -> None:
    """Write an 8-bit PNG with background 0 and foreground 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"failed to write {path}")


def load_mask(path: PathLike, shape: Tuple[int, int] | None = None) -> np.ndarray:
    """Read an 8-bit mask; any nonzero pixel is foreground.

    ``shape`` is an optional ``(height, width)`` the mask must match.
    """
    arr = _read_raw(path)
    if arr.ndim != 2:
        raise UnsupportedFormat(f"{path}: masks must be single-channel")
    if arr.dtype != np.uint8:
        raise UnsupportedFormat(f"{path}: masks must be 8-bit, got {arr.dtype}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise DimensionMismatch(f"{path}: mask shape {arr.shape} != expected {tuple(shape)}")
    return arr != 0


def _chain_pixels(vertices: np.ndarray) -> np.ndarray:
    from .geometry import polyline_pixels

    return polyline_pixels(vertices, closed=True)


def render_overlay(
    img: GrayImage,
    contours: Iterable[Tuple[Sequence, Tuple[int, int, int]]],
) -> np.ndarray:
    """Draw closed 1-px polylines over the gray frame.

    ``contours`` holds ``(chain, (r, g, b))`` pairs, where ``chain`` is a
    :class:`~spheroidseg.geometry.PolygonChain` or an ``(N, 2)`` array of
    ``(x, y)`` vertices.  Later contours are painted over earlier ones.
    Returns an ``(H, W, 3)`` uint8 RGB array.
    """
    base = img if img.bit_depth == 8 else to_8bit(img)
    rgb = np.repeat(base.pixels[:, :, None], 3, axis=2)
    for chain, color in contours:
        verts = np.asarray(getattr(chain, "vertices", chain), dtype=np.int64).reshape(-1, 2)
        if len(verts) == 0:
            continue
        if (
            verts[:, 0].min() < 0
            or verts[:, 1].min() < 0
            or verts[:, 0].max() >= img.width
            or verts[:, 1].max() >= img.height
        ):
            raise ValueError("contour vertex outside the image bounds")
        px = _chain_pixels(verts)
        rgb[px[:, 1], px[:, 0]] = color
    return rgb


def save_rgb(rgb: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def _flip(a: np.ndarray, transform: str) -> np.ndarray:
    if transform == "vflip":
        return np.ascontiguousarray(a[::-1, :])
    if transform == "hflip":
        return np.ascontiguousarray(a[:, ::-1])
    if transform == "rot180":
        return np.ascontiguousarray(a[::-1, ::-1])
    raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")


def augment(img: GrayImage, mask: np.ndarray, transform: str) -> Tuple[GrayImage, np.ndarray]:
    """Apply the same flip/rotation to an image and its mask."""
    if img.shape != mask.shape:
        raise DimensionMismatch(f"image {img.shape} and mask {mask.shape} differ")
    return replace(img, pixels=_flip(img.pixels, transform)), _flip(mask, transform)
