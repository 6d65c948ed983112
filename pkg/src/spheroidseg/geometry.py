"""
Connected components, outer border following, polygon fill and shape measures.

Coordinates in chains are ``(x, y)`` with ``y`` pointing down; masks are
indexed ``mask[y, x]``.  Foreground uses 8-connectivity and background
4-connectivity throughout, which is the pairing under which an outer border
is well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Tuple

import numpy as np
from scipy import ndimage

__all__ = [
    "PolygonChain",
    "SpheroidMeasure",
    "label_components",
    "connected_components",
    "largest_component",
    "fill_holes",
    "trace_border",
    "chain_length",
    "perimeter",
    "polyline_pixels",
    "rasterize",
    "scale_chain",
    "equivalent_diameter",
    "sphere_volume",
    "circularity",
    "measure",
]

_EIGHT = np.ones((3, 3), dtype=bool)

# clockwise on screen (y down), starting east: (dx, dy)
_DIRS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


@dataclass(frozen=True)
class PolygonChain:
    """Ordered border pixels of one component, implicitly closed."""

    vertices: np.ndarray  # (N, 2) int64, columns x, y

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.int64).reshape(-1, 2)
        if len(v) == 0:
            raise ValueError("a chain needs at least one vertex")
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return len(self.vertices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolygonChain):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices)

    __hash__ = None

    def to_json(self) -> dict:
        return {"vertices": self.vertices.tolist(), "closed": True}

    @classmethod
    def from_json(cls, data: dict) -> "PolygonChain":
        return cls(np.asarray(data["vertices"], dtype=np.int64))


@dataclass(frozen=True)
class SpheroidMeasure:
    area_px: int
    perimeter_px: float
    diameter_um: float
    volume_um3: float
    circularity: float


# ---------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------
def label_components(mask: np.ndarray) -> Tuple[np.ndarray, List[int], List[int]]:
    """Label 8-connected foreground.

    Returns ``(labels, order, areas)`` where ``order`` lists label ids by
    descending area (ties keep raster-scan order of first appearance) and
    ``areas`` the matching pixel counts.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)
    if n == 0:
        return labels, [], []
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    ids = np.arange(1, n + 1)
    # stable sort on -area keeps label (= first-appearance) order for ties
    order = ids[np.argsort(-counts, kind="stable")]
    return labels, order.tolist(), counts[order - 1].tolist()


def connected_components(mask: np.ndarray) -> List[np.ndarray]:
    """Split a mask into its 8-connected components, largest first."""
    labels, order, _ = label_components(mask)
    return [labels == i for i in order]


def largest_component(mask: np.ndarray) -> np.ndarray:
    """The largest 8-connected component (all-False for an empty mask)."""
    labels, order, _ = label_components(mask)
    if not order:
        return np.zeros(np.shape(mask), dtype=bool)
    return labels == order[0]


def fill_holes(mask: np.ndarray) -> np.ndarray:
    # default 2-D structure is the 4-neighbour cross, i.e. 4-connected background
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


# ---------------------------------------------------------------------
# Border following
# ---------------------------------------------------------------------
def trace_border(component: np.ndarray) -> PolygonChain:
    """Follow the outer border of an 8-connected component.

    Starts at the first foreground pixel in raster order and walks clockwise
    (on screen) with the background on the left-hand side, stopping once the
    first move would be repeated.  Holes do not affect the result.
    If ``component`` has several components, the one holding the first
    foreground pixel in raster order is traced.
    """
    comp = np.asarray(component, dtype=bool)
    ys, xs = np.nonzero(comp)
    if len(ys) == 0:
        raise ValueError("cannot trace the border of an empty component")
    y_lo, y_hi, x_lo, x_hi = ys.min(), ys.max(), xs.min(), xs.max()
    # one-pixel background frame so neighbour lookups never leave the array
    pad = np.zeros((y_hi - y_lo + 3, x_hi - x_lo + 3), dtype=bool)
    pad[1:-1, 1:-1] = comp[y_lo : y_hi + 1, x_lo : x_hi + 1]
    grid = pad.tolist()

    first = int(np.argmax(pad.ravel()))
    sy, sx = divmod(first, pad.shape[1])
    start = (sx, sy)

    def step(x: int, y: int, search: int):
        for k in range(8):
            d = (search + k) & 7
            dx, dy = _DIRS[d]
            if grid[y + dy][x + dx]:
                return d
        return -1

    # raster-first pixel: west, north-west, north and north-east are background
    d = step(sx, sy, 0)
    if d < 0:
        return PolygonChain(np.array([[sx + x_lo - 1, sy + y_lo - 1]]))

    out = [start]
    x, y = sx, sy
    first_dir = d
    while True:
        dx, dy = _DIRS[d]
        x, y = x + dx, y + dy
        # resume the sweep just past the last background pixel examined
        d = step(x, y, (d + 7 - (d & 1)) & 7)
        if (x, y) == start and d == first_dir:
            break
        out.append((x, y))

    v = np.asarray(out, dtype=np.int64)
    v[:, 0] += x_lo - 1
    v[:, 1] += y_lo - 1
    return PolygonChain(v)


# ---------------------------------------------------------------------
# Lengths
# ---------------------------------------------------------------------
def _steps(v: np.ndarray) -> np.ndarray:
    return np.roll(v, -1, axis=0) - v


def chain_length(chain: PolygonChain) -> float:
    """Plain sum of vertex-to-vertex steps, closing edge included."""
    v = chain.vertices
    if len(v) == 1:
        return 1.0
    s = _steps(v).astype(np.float64)
    return math.fsum(np.hypot(s[:, 0], s[:, 1]).tolist())


def perimeter(chain: PolygonChain) -> float:
    """Border length used for circularity.

    Straight runs and right-angle (or sharper) corners count at full step
    length.  At a 45 degree turn the corner is cut through the midpoints of
    the two adjoining steps, which removes the staircase excess of digitised
    oblique edges.  A single-pixel chain has length 1.
    """
    v = chain.vertices
    if len(v) == 1:
        return 1.0
    s = _steps(v)
    t = np.roll(s, -1, axis=0)
    ls = np.hypot(s[:, 0], s[:, 1])
    lt = np.hypot(t[:, 0], t[:, 1])
    cross = s[:, 0] * t[:, 1] - s[:, 1] * t[:, 0]
    dot = (s * t).sum(axis=1)
    # unit/diagonal steps meeting at 45 degrees: |cross| == dot == 1
    half_turn = (np.abs(cross) == dot) & (dot > 0) & (np.maximum(ls, lt) < 1.5)
    cut = np.hypot(s[:, 0] + t[:, 0], s[:, 1] + t[:, 1])
    per_vertex = np.where(half_turn, cut, ls + lt) / 2.0
    return math.fsum(per_vertex.tolist())


# ---------------------------------------------------------------------
# Rasterisation
# ---------------------------------------------------------------------
def polyline_pixels(vertices: np.ndarray, closed: bool = True) -> np.ndarray:
    """Integer pixels ``(x, y)`` covered by straight segments between vertices."""
    v = np.asarray(vertices, dtype=np.int64).reshape(-1, 2)
    if len(v) == 1 or (not closed and len(v) < 2):
        return v.copy()
    a = v if closed else v[:-1]
    b = np.roll(v, -1, axis=0) if closed else v[1:]
    d = b - a
    n = np.abs(d).max(axis=1)
    counts = n + 1
    idx = np.repeat(np.arange(len(a)), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    t = np.arange(counts.sum()) - offsets
    nn = np.maximum(n[idx], 1)
    # round-half-up of t * d / n
    x = a[idx, 0] + (2 * t * d[idx, 0] + nn) // (2 * nn)
    y = a[idx, 1] + (2 * t * d[idx, 1] + nn) // (2 * nn)
    return np.stack([x, y], axis=1)


def rasterize(chain: PolygonChain, width: int, height: int) -> np.ndarray:
    """Fill a closed chain: the polyline itself plus every pixel centre with
    nonzero winding number."""
    v = chain.vertices
    if v[:, 0].min() < 0 or v[:, 1].min() < 0 or v[:, 0].max() >= width or v[:, 1].max() >= height:
        raise ValueError("chain vertex outside the raster bounds")
    out = np.zeros((height, width), dtype=bool)
    if len(v) > 2:
        a = v
        b = np.roll(v, -1, axis=0)
        dy = b[:, 1] - a[:, 1]
        keep = dy != 0
        a, b, dy = a[keep], b[keep], dy[keep]
        dx = b[:, 0] - a[:, 0]
        direction = np.sign(dy)
        y_start = np.minimum(a[:, 1], b[:, 1])
        counts = np.abs(dy)
        idx = np.repeat(np.arange(len(a)), counts)
        rows = y_start[idx] + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
        # crossing x = a.x + (row - a.y) * dx / dy, as an exact fraction num / den
        num = a[idx, 0] * dy[idx] + (rows - a[idx, 1]) * dx[idx]
        den = dy[idx]
        neg = den < 0
        num = np.where(neg, -num, num)
        den = np.abs(den)
        k = -((-num) // den)  # number of integer x strictly left of the crossing
        k = np.clip(k, 0, width)
        diff = np.zeros((height, width + 1), dtype=np.int64)
        np.add.at(diff, (rows, np.zeros_like(rows)), direction[idx])
        np.add.at(diff, (rows, k), -direction[idx])
        winding = np.cumsum(diff, axis=1)[:, :width]
        out |= winding != 0
    px = polyline_pixels(v, closed=True)
    out[px[:, 1], px[:, 0]] = True
    return out


def scale_chain(chain: PolygonChain, factor) -> PolygonChain:
    """Multiply vertex coordinates by ``factor`` (round half up) and drop
    consecutive duplicates, including a duplicate closing vertex."""
    f = Fraction(factor).limit_denominator(10_000) if isinstance(factor, float) else Fraction(factor)
    if f <= 0:
        raise ValueError("scale factor must be positive")
    p, q = f.numerator, f.denominator
    v = (2 * chain.vertices * p + q) // (2 * q)
    keep = np.ones(len(v), dtype=bool)
    keep[1:] = np.any(v[1:] != v[:-1], axis=1)
    v = v[keep]
    while len(v) > 1 and np.array_equal(v[-1], v[0]):
        v = v[:-1]
    return PolygonChain(v)


# ---------------------------------------------------------------------
# Shape measures
# ---------------------------------------------------------------------
def equivalent_diameter(area: float, scale: float = 1.0) -> float:
    """Diameter of the disk with the given area, ``2 * sqrt(area / pi)``."""
    return 2.0 * math.sqrt(area / math.pi) * scale


def sphere_volume(diameter: float) -> float:
    return math.pi * diameter**3 / 6.0


def circularity(area: float, length: float) -> float:
    return 4.0 * math.pi * area / length**2


def measure(mask: np.ndarray, scale_um_per_px: float) -> SpheroidMeasure:
    """Area, perimeter, equivalent diameter, spherical volume and circularity
    of the largest component (holes filled)."""
    comp = largest_component(mask)
    if not comp.any():
        raise ValueError("cannot measure an empty mask")
    comp = fill_holes(comp)
    area = int(comp.sum())
    length = perimeter(trace_border(comp))
    d = equivalent_diameter(area, scale_um_per_px)
    return SpheroidMeasure(
        area_px=area,
        perimeter_px=length,
        diameter_um=d,
        volume_um3=sphere_volume(d),
        circularity=circularity(area, length),
    )
