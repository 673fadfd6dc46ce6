"""Log-odds occupancy grid, trinary classification, and frontier extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

# Trinary cell values.
FREE = 0
OCCUPIED = 1
UNKNOWN = 2

# PGM byte values, matching the common map_server convention.
PGM_OCCUPIED = 0
PGM_FREE = 254
PGM_UNKNOWN = 205

L_OCC_DEFAULT = 0.85
L_FREE_DEFAULT = -0.4
L_CLAMP_DEFAULT = 10.0
T_OCC_DEFAULT = 1.0
T_FREE_DEFAULT = -1.0


@dataclass
class OccupancyGrid:
    resolution: float
    origin: np.ndarray  # map coordinates of the (0, 0) cell corner
    width: int  # cells along x
    height: int  # cells along y
    logodds: np.ndarray = None  # (height, width), row iy / col ix
    l_min: float = -L_CLAMP_DEFAULT
    l_max: float = L_CLAMP_DEFAULT

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float)
        if self.logodds is None:
            self.logodds = np.zeros((self.height, self.width))

    @classmethod
    def for_field(cls, field_width: float, field_height: float, resolution: float = 0.05,
                  margin: float = 0.5) -> OccupancyGrid:
        """Grid covering the field plus a margin of unknown space around it."""
        origin = np.array([-margin, -margin])
        width = int(math.ceil((field_width + 2 * margin) / resolution))
        height = int(math.ceil((field_height + 2 * margin) / resolution))
        return cls(resolution, origin, width, height)

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((x - self.origin[0]) / self.resolution)),
            int(math.floor((y - self.origin[1]) / self.resolution)),
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height


@dataclass
class TrinaryMap:
    cells: np.ndarray  # int8 (height, width) of FREE / OCCUPIED / UNKNOWN
    resolution: float
    origin: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((x - self.origin[0]) / self.resolution)),
            int(math.floor((y - self.origin[1]) / self.resolution)),
        )

    def cell_center(self, ix, iy) -> np.ndarray:
        return self.origin + (np.array([ix, iy], dtype=float) + 0.5) * self.resolution

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def copy(self) -> TrinaryMap:
        return TrinaryMap(self.cells.copy(), self.resolution, self.origin.copy())


@dataclass
class Frontier:
    cells: np.ndarray  # (n, 2) of (ix, iy)
    centroid: np.ndarray  # meters, map frame
    size: int


def integrate_scan(
    grid: OccupancyGrid,
    pose,
    ranges: np.ndarray,
    angles: np.ndarray,
    max_range: float,
    l_occ: float = L_OCC_DEFAULT,
    l_free: float = L_FREE_DEFAULT,
) -> OccupancyGrid:
    """Fold one scan into the grid (in place) with the standard log-odds update.

    Cells the beam traverses before its endpoint are decremented by |l_free|;
    the endpoint cell is incremented by l_occ unless the beam returned
    max_range (a miss carries no evidence of an obstacle at the endpoint).
    `angles` are absolute beam headings in the map frame.
    """
    ox, oy = float(pose.x), float(pose.y)
    ix0, iy0 = grid.world_to_cell(ox, oy)
    if not grid.in_bounds(ix0, iy0):
        raise ValueError("pose outside grid bounds")

    n = len(ranges)
    ranges = np.asarray(ranges, dtype=float)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    res = grid.resolution

    # Amanatides-Woo traversal run in lockstep across all beams.
    cur_ix = np.full(n, ix0, dtype=np.int64)
    cur_iy = np.full(n, iy0, dtype=np.int64)
    step_x = np.where(dirs[:, 0] >= 0, 1, -1)
    step_y = np.where(dirs[:, 1] >= 0, 1, -1)
    fx = (ox - grid.origin[0]) / res - ix0  # position inside start cell, [0, 1)
    fy = (oy - grid.origin[1]) / res - iy0
    with np.errstate(divide="ignore"):
        tdelta_x = np.abs(res / dirs[:, 0])
        tdelta_y = np.abs(res / dirs[:, 1])
        tmax_x = np.where(step_x > 0, (1.0 - fx) * res / np.abs(dirs[:, 0]), fx * res / np.abs(dirs[:, 0]))
        tmax_y = np.where(step_y > 0, (1.0 - fy) * res / np.abs(dirs[:, 1]), fy * res / np.abs(dirs[:, 1]))
    tmax_x = np.where(np.abs(dirs[:, 0]) < 1e-12, np.inf, tmax_x)
    tmax_y = np.where(np.abs(dirs[:, 1]) < 1e-12, np.inf, tmax_y)

    active = np.ones(n, dtype=bool)
    free_ix: list[np.ndarray] = []
    free_iy: list[np.ndarray] = []
    max_steps = grid.width + grid.height + 2
    for _ in range(max_steps):
        if not active.any():
            break
        exit_t = np.minimum(tmax_x, tmax_y)
        # Beams whose endpoint lies inside the current cell stop here.
        active &= exit_t < ranges - 1e-12
        if not active.any():
            break
        free_ix.append(cur_ix[active].copy())
        free_iy.append(cur_iy[active].copy())
        take_x = active & (tmax_x <= tmax_y)
        take_y = active & ~ (tmax_x <= tmax_y)
        cur_ix[take_x] += step_x[take_x]
        tmax_x[take_x] += tdelta_x[take_x]
        cur_iy[take_y] += step_y[take_y]
        tmax_y[take_y] += tdelta_y[take_y]
        # Rays leaving the grid never write again.
        active &= (cur_ix >= 0) & (cur_ix < grid.width) & (cur_iy >= 0) & (cur_iy < grid.height)

    if free_ix:
        fxs = np.concatenate(free_ix)
        fys = np.concatenate(free_iy)
        np.add.at(grid.logodds, (fys, fxs), l_free)

    # Hit cells are taken a quarter cell past the measured range so that
    # surfaces lying exactly on grid lines mark the obstacle-side cell, where
    # no passing beam can erode them.
    hits = ranges < max_range - 1e-9
    if hits.any():
        end = np.stack([ox + dirs[:, 0] * (ranges + 0.25 * res),
                        oy + dirs[:, 1] * (ranges + 0.25 * res)], axis=1)
        exs = np.floor((end[:, 0] - grid.origin[0]) / res).astype(np.int64)
        eys = np.floor((end[:, 1] - grid.origin[1]) / res).astype(np.int64)
        ok = hits & (exs >= 0) & (exs < grid.width) & (eys >= 0) & (eys < grid.height)
        np.add.at(grid.logodds, (eys[ok], exs[ok]), l_occ)
    np.clip(grid.logodds, grid.l_min, grid.l_max, out=grid.logodds)
    return grid


def classify(grid: OccupancyGrid, t_occ: float = T_OCC_DEFAULT, t_free: float = T_FREE_DEFAULT) -> TrinaryMap:
    """Threshold log-odds into free / occupied / unknown."""
    if not t_free < 0.0 < t_occ:
        raise ValueError("thresholds must satisfy t_free < 0 < t_occ")
    cells = np.full(grid.logodds.shape, UNKNOWN, dtype=np.int8)
    cells[grid.logodds >= t_occ] = OCCUPIED
    cells[grid.logodds <= t_free] = FREE
    return TrinaryMap(cells, grid.resolution, grid.origin.copy())


def find_frontiers(tri: TrinaryMap, min_size: int = 5) -> list[Frontier]:
    """Connected components (8-connectivity) of free cells bordering unknown."""
    free = tri.cells == FREE
    unknown = tri.cells == UNKNOWN
    near_unknown = ndimage.binary_dilation(unknown, structure=np.ones((3, 3), dtype=bool))
    frontier = free & near_unknown
    labels, count = ndimage.label(frontier, structure=np.ones((3, 3), dtype=int))
    out: list[Frontier] = []
    for lbl in range(1, count + 1):
        iys, ixs = np.nonzero(labels == lbl)
        if len(ixs) < min_size:
            continue
        centers = tri.origin[None, :] + (np.stack([ixs, iys], axis=1) + 0.5) * tri.resolution
        out.append(Frontier(np.stack([ixs, iys], axis=1), centers.mean(axis=0), len(ixs)))
    out.sort(key=lambda f: -f.size)
    return out


def known_fraction(tri: TrinaryMap, x0: float, y0: float, x1: float, y1: float) -> float:
    """Fraction of cells inside the given map-frame rectangle that are not unknown."""
    ix0, iy0 = tri.world_to_cell(x0, y0)
    ix1, iy1 = tri.world_to_cell(x1 - 1e-9, y1 - 1e-9)
    patch = tri.cells[max(iy0, 0):iy1 + 1, max(ix0, 0):ix1 + 1]
    if patch.size == 0:
        return 0.0
    return float(np.count_nonzero(patch != UNKNOWN)) / patch.size


def to_pgm_bytes(tri: TrinaryMap) -> bytes:
    """Encode as a binary PGM (P5), top image row = highest map y."""
    img = np.full(tri.cells.shape, PGM_UNKNOWN, dtype=np.uint8)
    img[tri.cells == FREE] = PGM_FREE
    img[tri.cells == OCCUPIED] = PGM_OCCUPIED
    header = f"P5\n{tri.width} {tri.height}\n255\n".encode("ascii")
    return header + img[::-1, :].tobytes()


def save_pgm(tri: TrinaryMap, path) -> None:
    """Write <path> as PGM plus a <path stem>.meta sidecar with geo-referencing."""
    path = Path(path)
    path.write_bytes(to_pgm_bytes(tri))
    meta = f"resolution: {tri.resolution!r}\norigin: {tri.origin[0]!r} {tri.origin[1]!r}\n"
    path.with_suffix(".meta").write_text(meta)


def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated PGM header")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # skip the single whitespace after maxval


def load_pgm(path) -> TrinaryMap:
    """Read a PGM + .meta pair written by save_pgm."""
    path = Path(path)
    data = path.read_bytes()
    tokens, offset = _read_pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    raw = data[offset:offset + width * height]
    if len(raw) != width * height:
        raise ValueError("truncated PGM payload")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)[::-1, :]
    cells = np.full(img.shape, UNKNOWN, dtype=np.int8)
    cells[img == PGM_FREE] = FREE
    cells[img == PGM_OCCUPIED] = OCCUPIED

    meta_path = path.with_suffix(".meta")
    resolution = None
    origin = None
    for line in meta_path.read_text().splitlines():
        key, _, value = line.partition(":")
        if key.strip() == "resolution":
            resolution = float(value)
        elif key.strip() == "origin":
            parts = value.split()
            origin = np.array([float(parts[0]), float(parts[1])])
    if resolution is None or origin is None:
        raise ValueError(f"incomplete metadata in {meta_path}")
    return TrinaryMap(cells, resolution, origin)
