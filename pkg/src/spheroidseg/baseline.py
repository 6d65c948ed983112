"""Otsu thresholding baseline, optionally after grayscale erosion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import largest_component
from .imgio import GrayImage

__all__ = ["OtsuParams", "otsu_threshold", "between_class_variance", "erode", "otsu_segment"]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
MAX_EROSION_ITERATIONS = 32


@dataclass(frozen=True)
class OtsuParams:
    erosion_iterations: int = 0
    polarity: str = "dark_foreground"

    def __post_init__(self):
        if not 0 <= self.erosion_iterations <= MAX_EROSION_ITERATIONS:
            raise ValueError(
                f"erosion_iterations must be in [0, {MAX_EROSION_ITERATIONS}]"
            )
        if self.polarity not in ("dark_foreground", "bright_foreground"):
            raise ValueError(f"unknown polarity {self.polarity!r}")


def between_class_variance(hist, t: int):
    """Between-class variance of the split ``<= t`` / ``> t``, up to the
    constant factor ``1 / N**2``, as an exact ``(numerator, denominator)``
    integer pair.  Empty classes give ``(0, 1)``."""
    h = [int(c) for c in hist]
    n0 = sum(h[: t + 1])
    n1 = sum(h[t + 1 :])
    if n0 == 0 or n1 == 0:
        return 0, 1
    s0 = sum(i * c for i, c in enumerate(h[: t + 1]))
    s1 = sum(i * c for i, c in enumerate(h[t + 1 :], start=t + 1))
    # n0 * n1 * (s0/n0 - s1/n1)**2
    return (n1 * s0 - n0 * s1) ** 2, n0 * n1


def otsu_threshold(hist) -> int:
    """Level in 0..255 maximising between-class variance; ties go to the
    lowest level.  A histogram with a single occupied bin returns that bin."""
    h = np.asarray(hist, dtype=np.int64).ravel()
    if h.shape != (256,):
        raise ValueError("expected a 256-bin histogram")
    if (h < 0).any() or h.sum() == 0:
        raise ValueError("histogram is empty")
    occupied = np.flatnonzero(h)
    if len(occupied) == 1:
        return int(occupied[0])
    # cumulative counts/sums as Python ints so the comparison below is exact
    counts = h.tolist()
    total_n = sum(counts)
    total_s = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n1 * s0 - n0 * (total_s - s0)) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def erode(img: GrayImage, iterations: int) -> GrayImage:
    """Grayscale erosion with a 3x3 cross, edges replicated."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    px = img.pixels
    for _ in range(iterations):
        px = ndimage.grey_erosion(px, footprint=_CROSS, mode="nearest")
    return GrayImage(px.copy(), img.bit_depth, img.scale_um_per_px)


def otsu_segment(img: GrayImage, params: OtsuParams = OtsuParams()) -> np.ndarray:
    """Threshold an 8-bit frame with Otsu's level and keep the largest blob."""
    if img.bit_depth != 8:
        raise ValueError("otsu_segment expects an 8-bit image; apply to_8bit first")
    work = erode(img, params.erosion_iterations)
    hist = np.bincount(work.pixels.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        warnings.warn("single-valued histogram; Otsu split is undefined, returning empty mask")
        return np.zeros(img.shape, dtype=bool)
    level = otsu_threshold(hist)
    if params.polarity == "dark_foreground":
        fg = work.pixels <= level
    else:
        fg = work.pixels > level
    return largest_component(fg)
