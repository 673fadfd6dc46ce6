"""Grid-map processing: extract candidate pile regions from a classified map.

The stages mirror the mapping pipeline: invert the classified map into an
obstacle image, apply morphological closing to fuse lidar speckle, trace one
outer contour per 8-connected component, take convex hulls, and keep closed
hulls at least as large as a cylinder's top-down projection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import point_in_convex_polygon, polygon_area, polygon_centroid
from .occupancy import FREE, OCCUPIED, UNKNOWN, TrinaryMap

KERNEL_RADIUS_DEFAULT = 3  # px; 0.15 m at the default 0.05 m resolution


@dataclass
class BinaryImage:
    bits: np.ndarray  # bool (height, width), true = obstacle
    unknown: np.ndarray  # bool, true where the source map was unknown
    resolution: float
    origin: np.ndarray

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass
class Contour:
    points: np.ndarray  # (n, 2) of (ix, iy), ordered boundary loop
    open: bool
    touches_unknown: bool


@dataclass
class RegionOfInterest:
    hull: np.ndarray  # (m, 2) grid coordinates, CCW
    centroid: np.ndarray  # meters, map frame
    area: float  # square meters
    touches_unknown: bool


def binarize(tri: TrinaryMap) -> BinaryImage:
    """Occupied cells become true pixels; free and unknown become false."""
    return BinaryImage(
        bits=tri.cells == OCCUPIED,
        unknown=tri.cells == UNKNOWN,
        resolution=tri.resolution,
        origin=tri.origin.copy(),
    )


def close(img: BinaryImage, kernel_radius: int = KERNEL_RADIUS_DEFAULT) -> BinaryImage:
    """Morphological closing with a square structuring element.

    Out-of-image pixels count as false; the array is padded by the kernel
    radius before dilating so the composite equals the true (infinite-plane)
    closing, which keeps the operation idempotent.
    """
    if kernel_radius < 1:
        raise ValueError("kernel_radius must be >= 1")
    r = kernel_radius
    se = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    padded = np.pad(img.bits, r, mode="constant", constant_values=False)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    return BinaryImage(closed[r:-r, r:-r], img.unknown, img.resolution, img.origin)


# 8-neighborhood ordered around the ring (consecutive entries are adjacent).
_MOORE = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]
_MOORE_INDEX = {off: i for i, off in enumerate(_MOORE)}


def _trace_boundary(mask: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Moore-neighbor boundary trace of the component containing start.

    start must be the first component pixel in raster order (lowest iy, then
    lowest ix) so the initial backtrack direction is guaranteed empty.
    """
    h, w = mask.shape

    def filled(ix: int, iy: int) -> bool:
        return 0 <= ix < w and 0 <= iy < h and mask[iy, ix]

    sx, sy = start
    contour = [(sx, sy)]
    back = 0  # _MOORE index of the raster predecessor (-1, 0), known empty
    cur = (sx, sy)
    first_next = None
    for _ in range(4 * int(mask.sum()) + 8):
        nxt = None
        found_k = 0
        for k in range(1, 9):
            idx = (back + k) % 8
            cand = (cur[0] + _MOORE[idx][0], cur[1] + _MOORE[idx][1])
            if filled(*cand):
                nxt, found_k = cand, k
                break
        if nxt is None:
            break  # isolated single pixel
        if cur == (sx, sy) and first_next is not None and nxt == first_next:
            break  # about to repeat the initial move: loop closed
        if first_next is None:
            first_next = nxt
        # The neighbor checked just before the hit is empty and 8-adjacent to
        # nxt; scanning resumes from it around the new pixel.
        prev_idx = (back + found_k - 1) % 8
        prev_empty = (cur[0] + _MOORE[prev_idx][0], cur[1] + _MOORE[prev_idx][1])
        contour.append(nxt)
        back = _MOORE_INDEX[(prev_empty[0] - nxt[0], prev_empty[1] - nxt[1])]
        cur = nxt
    if len(contour) > 1 and contour[-1] == (sx, sy):
        contour.pop()
    return np.array(contour, dtype=int)


def find_contours(img: BinaryImage) -> list[Contour]:
    """One outer contour per 8-connected true component.

    A contour is open when its component touches the image border, or when it
    is 8-adjacent to unknown space lying outside its own convex hull: such a
    component continues into unexplored territory, so the obstacle was only
    partially observed. Unknown pockets enclosed by the component (the
    unobservable interior of a solid object) do not open the contour.
    """
    labels, count = ndimage.label(img.bits, structure=np.ones((3, 3), dtype=int))
    h, w = img.bits.shape
    contours: list[Contour] = []
    for lbl in range(1, count + 1):
        iys, ixs = np.nonzero(labels == lbl)
        order = np.lexsort((ixs, iys))
        start = (int(ixs[order[0]]), int(iys[order[0]]))
        points = _trace_boundary(labels == lbl, start)

        touches_border = bool(
            (ixs == 0).any() or (iys == 0).any() or (ixs == w - 1).any() or (iys == h - 1).any()
        )
        hull = convex_hull(np.stack([ixs, iys], axis=1))
        touches_unknown = False
        exterior_unknown = False
        for px, py in zip(ixs, iys):
            for dx, dy in _MOORE:
                nx, ny = px + dx, py + dy
                if 0 <= nx < w and 0 <= ny < h and img.unknown[ny, nx]:
                    touches_unknown = True
                    if not point_in_convex_polygon(np.array([nx, ny], dtype=float),
                                                   hull.astype(float), tol=1e-9):
                        exterior_unknown = True
                        break
            if exterior_unknown:
                break
        contours.append(Contour(points, touches_border or exterior_unknown, touches_unknown))
    return contours


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, collinear points dropped.

    Degenerate inputs give a 1-vertex (single point) or 2-vertex (collinear)
    hull.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) == 0:
        raise ValueError("empty point set")
    if len(pts) == 1:
        return pts
    # np.unique sorts lexicographically, which is the order monotone chain needs.
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) == 0:  # all points collinear
        return np.array([pts[0], pts[-1]])
    return hull


def filter_regions(
    candidates: list[tuple[np.ndarray, bool, bool]],
    cyl_dims: tuple[float, float],
    resolution: float,
    origin,
) -> list[RegionOfInterest]:
    """Drop open hulls, keep those at least one cylinder projection in area.

    candidates are (hull, open, touches_unknown) triples in grid coordinates;
    the area threshold is length x diameter, the cylinder's top-down
    projection. Output is sorted by descending area.
    """
    length, diameter = cyl_dims
    min_area = length * diameter
    origin = np.asarray(origin, dtype=float)
    regions: list[RegionOfInterest] = []
    for hull, is_open, touches_unknown in candidates:
        if is_open:
            continue
        area = abs(polygon_area(np.asarray(hull, dtype=float))) * resolution ** 2
        if area < min_area:
            continue
        c = polygon_centroid(np.asarray(hull, dtype=float))
        centroid = origin + (c + 0.5) * resolution
        regions.append(RegionOfInterest(np.asarray(hull, dtype=float), centroid, area, touches_unknown))
    regions.sort(key=lambda r: -r.area)
    return regions


def extract_regions(
    tri: TrinaryMap,
    cyl_dims: tuple[float, float],
    kernel_radius: int = KERNEL_RADIUS_DEFAULT,
    debug_dir=None,
) -> list[RegionOfInterest]:
    """Full processing chain from classified map to candidate pile regions."""
    img = binarize(tri)
    closed = close(img, kernel_radius)
    contours = find_contours(closed)
    candidates = [(convex_hull(c.points), c.open, c.touches_unknown) for c in contours]
    regions = filter_regions(candidates, cyl_dims, tri.resolution, tri.origin)
    if debug_dir is not None:
        _dump_stages(debug_dir, img, closed, contours, regions)
    return regions


def _dump_stages(debug_dir, img: BinaryImage, closed: BinaryImage,
                 contours: list[Contour], regions: list[RegionOfInterest]) -> None:
    from pathlib import Path

    debug_dir = Path(debug_dir)
    debug_dir.mkdir(parents=True, exist_ok=True)

    def write(name: str, bits: np.ndarray) -> None:
        data = np.where(bits, 255, 0).astype(np.uint8)[::-1, :]
        header = f"P5\n{bits.shape[1]} {bits.shape[0]}\n255\n".encode("ascii")
        (debug_dir / name).write_bytes(header + data.tobytes())

    write("stage_a_binary.pgm", img.bits)
    write("stage_b_closed.pgm", closed.bits)
    contour_img = np.zeros_like(img.bits)
    for c in contours:
        contour_img[c.points[:, 1], c.points[:, 0]] = True
    write("stage_c_contours.pgm", contour_img)
    region_img = np.zeros_like(img.bits)
    for r in regions:
        iy, ix = np.nonzero(closed.bits)
        for px, py in zip(ix, iy):
            if point_in_convex_polygon(np.array([px, py], dtype=float), r.hull):
                region_img[py, px] = True
    write("stage_d_regions.pgm", region_img)
