"""Planar geometry helpers shared by the simulator and the map pipeline."""
from __future__ import annotations

import math

import numpy as np


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle with the same (-pi, pi] convention."""
    wrapped = np.mod(np.asarray(theta) + math.pi, 2.0 * math.pi)
    wrapped = np.where(wrapped <= 0.0, wrapped + 2.0 * math.pi, wrapped)
    return wrapped - math.pi


def rot2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def ray_segments_hit(origin: np.ndarray, direction: np.ndarray, segments: np.ndarray) -> float:
    """Distance from origin along direction to the nearest segment, or inf.

    segments is (n, 4): x0, y0, x1, y1. Vectorized over all segments.
    """
    if segments.size == 0:
        return math.inf
    p = segments[:, 0:2]
    d = segments[:, 2:4] - p
    # Solve origin + t*dir = p + u*d for t >= 0, u in [0, 1].
    denom = direction[0] * d[:, 1] - direction[1] * d[:, 0]
    rel = p - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * d[:, 1] - rel[:, 1] * d[:, 0]) / denom
        u = (rel[:, 0] * direction[1] - rel[:, 1] * direction[0]) / denom
    valid = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    if not valid.any():
        return math.inf
    return float(t[valid].min())


def rays_segments_hit(origin: np.ndarray, directions: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Nearest-hit distance for many rays against many segments (inf when no hit).

    directions is (m, 2), segments is (n, 4); returns (m,).
    """
    m = directions.shape[0]
    if segments.size == 0:
        return np.full(m, np.inf)
    p = segments[:, 0:2]
    d = segments[:, 2:4] - p
    denom = directions[:, 0:1] * d[None, :, 1] - directions[:, 1:2] * d[None, :, 0]
    rel = p[None, :, :] - origin[None, None, :]
    rel = np.broadcast_to(rel, (m, segments.shape[0], 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, :, 0] * d[None, :, 1] - rel[:, :, 1] * d[None, :, 0]) / denom
        u = (rel[:, :, 0] * directions[:, 1:2] - rel[:, :, 1] * directions[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)


def segment_crosses_any(p0: np.ndarray, p1: np.ndarray, segments: np.ndarray) -> bool:
    """True when the open segment p0->p1 intersects any of the given segments."""
    direction = p1 - p0
    length = float(np.hypot(*direction))
    if length < 1e-12 or segments.size == 0:
        return False
    t = ray_segments_hit(p0, direction / length, segments)
    return t < length - 1e-9


def point_segments_distance(point: np.ndarray, segments: np.ndarray) -> float:
    """Minimum distance from a point to a set of segments (inf when empty)."""
    if segments.size == 0:
        return math.inf
    p = segments[:, 0:2]
    d = segments[:, 2:4] - p
    rel = point[None, :] - p
    dd = np.einsum("ij,ij->i", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.clip(np.einsum("ij,ij->i", rel, d) / dd, 0.0, 1.0)
    t = np.where(dd < 1e-18, 0.0, t)
    closest = p + t[:, None] * d
    return float(np.min(np.hypot(closest[:, 0] - point[0], closest[:, 1] - point[1])))


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertex order)."""
    if len(vertices) < 3:
        return 0.0
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_centroid(vertices: np.ndarray) -> np.ndarray:
    """Area-weighted polygon centroid; falls back to vertex mean when degenerate."""
    a = polygon_area(vertices)
    if abs(a) < 1e-12:
        return vertices.mean(axis=0)
    x = vertices[:, 0]
    y = vertices[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    cx = float(np.sum((x + np.roll(x, -1)) * cross)) / (6.0 * a)
    cy = float(np.sum((y + np.roll(y, -1)) * cross)) / (6.0 * a)
    return np.array([cx, cy])


def point_in_convex_polygon(point: np.ndarray, hull: np.ndarray, tol: float = 1e-9) -> bool:
    """Membership test for a counter-clockwise convex polygon (boundary counts)."""
    n = len(hull)
    if n == 1:
        return bool(np.hypot(*(point - hull[0])) <= tol)
    if n == 2:
        d = hull[1] - hull[0]
        rel = point - hull[0]
        cross = d[0] * rel[1] - d[1] * rel[0]
        if abs(cross) > tol * max(1.0, float(np.hypot(*d))):
            return False
        t = float(np.dot(rel, d)) / max(float(np.dot(d, d)), 1e-18)
        return -tol <= t <= 1.0 + tol
    for i in range(n):
        a = hull[i]
        b = hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (point[1] - a[1]) - (b[1] - a[1]) * (point[0] - a[0])
        if cross < -tol:
            return False
    return True
