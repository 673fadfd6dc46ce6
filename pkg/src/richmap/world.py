"""Ground-truth scene model and sensor emulation.

The world is strictly 2D for navigation purposes: walls and cylinder
footprints are line segments, the robot is a disc. Cylinders additionally
expose a vertical base disc (the ID-plate face) used by the camera emulator
and the point-cloud sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import (
    point_segments_distance,
    rays_segments_hit,
    segment_crosses_any,
    wrap_angle,
)


class ScenarioError(Exception):
    """Raised when a scenario precondition is violated (e.g. pose outside field)."""


@dataclass
class SimClock:
    """Simulated time; every controller tick advances it by one dt."""

    t: float = 0.0


@dataclass
class LidarSpec:
    beam_count: int = 360
    fov: float = 2.0 * math.pi
    max_range: float = 8.0
    range_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.beam_count < 3:
            raise ValueError("beam_count must be >= 3")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")


@dataclass
class CameraSpec:
    focal_length: float = 525.0
    image_width: int = 640
    image_height: int = 480
    hfov: float = 1.1030  # 2*atan((640/2)/525)
    max_detect_range: float = 3.0
    max_incidence: float = math.radians(60.0)
    depth_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.focal_length <= 0:
            raise ValueError("focal_length must be positive")
        if not 0.0 < self.hfov < math.pi:
            raise ValueError("hfov must be in (0, pi)")


@dataclass
class CameraExtrinsics:
    """Camera mount in the robot base frame (x forward, y left, z up)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.4
    yaw: float = 0.0


@dataclass
class CylinderTruth:
    center: np.ndarray  # (2,) map frame, meters
    yaw: float  # axis direction
    length: float = 1.2
    diameter: float = 0.3
    plate_face: str = "front_base"  # base carrying the ID plate
    tag_id: str = ""

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.length <= 0 or self.diameter <= 0:
            raise ValueError("cylinder dimensions must be positive")
        if self.plate_face not in ("front_base", "rear_base"):
            raise ValueError(f"unknown plate_face {self.plate_face!r}")

    @property
    def axis_dir(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    def footprint_corners(self) -> np.ndarray:
        """Corners of the length x diameter footprint rectangle, CCW."""
        u = self.axis_dir
        v = np.array([-u[1], u[0]])
        hl, hw = 0.5 * self.length, 0.5 * self.diameter
        return np.array([
            self.center + hl * u + hw * v,
            self.center - hl * u + hw * v,
            self.center - hl * u - hw * v,
            self.center + hl * u - hw * v,
        ])

    def footprint_segments(self) -> np.ndarray:
        c = self.footprint_corners()
        return np.hstack([c, np.roll(c, -1, axis=0)])

    def plate_center(self) -> np.ndarray:
        sign = 1.0 if self.plate_face == "front_base" else -1.0
        return self.center + sign * 0.5 * self.length * self.axis_dir

    def plate_center3d(self) -> np.ndarray:
        xy = self.plate_center()
        return np.array([xy[0], xy[1], 0.5 * self.diameter])

    def plate_normal(self) -> np.ndarray:
        """Outward normal of the plate-carrying base (2D, unit)."""
        sign = 1.0 if self.plate_face == "front_base" else -1.0
        return sign * self.axis_dir


@dataclass
class RobotState:
    x: float
    y: float
    theta: float
    v: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        self.theta = wrap_angle(self.theta)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass
class PlateDetection:
    pixel_x: float  # image coordinates, origin at top-left corner
    pixel_y: float
    depth: float
    tag_id: str


@dataclass
class WorldSpec:
    field_width: float = 6.0
    field_height: float = 10.0
    walls: list = field(default_factory=list)  # (x0, y0, x1, y1) segments
    cylinders: list = field(default_factory=list)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)

    def __post_init__(self):
        if self.field_width <= 0 or self.field_height <= 0:
            raise ValueError("field dimensions must be positive")
        for cyl in self.cylinders:
            for corner in cyl.footprint_corners():
                if not self.contains(corner):
                    raise ValueError(f"cylinder {cyl.tag_id!r} footprint outside field")

    def contains(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        return 0.0 <= x <= self.field_width and 0.0 <= y <= self.field_height

    @cached_property
    def boundary_segments(self) -> np.ndarray:
        w, h = self.field_width, self.field_height
        return np.array([
            [0.0, 0.0, w, 0.0],
            [w, 0.0, w, h],
            [w, h, 0.0, h],
            [0.0, h, 0.0, 0.0],
        ])

    @cached_property
    def solid_segments(self) -> np.ndarray:
        """Every segment lidar beams and the robot disc can collide with."""
        parts = [self.boundary_segments]
        if self.walls:
            parts.append(np.asarray(self.walls, dtype=float).reshape(-1, 4))
        for cyl in self.cylinders:
            parts.append(cyl.footprint_segments())
        return np.vstack(parts)

    def occlusion_segments(self, exclude: CylinderTruth | None = None) -> np.ndarray:
        parts = [self.boundary_segments]
        if self.walls:
            parts.append(np.asarray(self.walls, dtype=float).reshape(-1, 4))
        for cyl in self.cylinders:
            if cyl is exclude:
                continue
            parts.append(cyl.footprint_segments())
        return np.vstack(parts)


def beam_angles(lidar: LidarSpec) -> np.ndarray:
    """Beam directions relative to the robot heading, right to left."""
    if lidar.beam_count == 1:
        return np.zeros(1)
    return np.linspace(-0.5 * lidar.fov, 0.5 * lidar.fov, lidar.beam_count)


def raycast_lidar(world: WorldSpec, pose: RobotState, rng: np.random.Generator | None = None) -> np.ndarray:
    """Simulate one lidar scan from the given pose.

    Each beam returns the distance to the nearest wall or cylinder footprint
    edge, clamped to max_range; Gaussian range noise is applied afterwards.
    """
    if not world.contains((pose.x, pose.y)):
        raise ScenarioError(f"lidar pose ({pose.x:.2f}, {pose.y:.2f}) outside field")
    angles = pose.theta + beam_angles(world.lidar)
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ranges = rays_segments_hit(pose.position, directions, world.solid_segments)
    ranges = np.minimum(ranges, world.lidar.max_range)
    sigma = world.lidar.range_noise_sigma
    if sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(world.lidar.seed)
        ranges = ranges + rng.normal(0.0, sigma, size=ranges.shape)
    return np.clip(ranges, 0.0, world.lidar.max_range)


def _integrate_unicycle(x: float, y: float, theta: float, v: float, omega: float, dt: float):
    if abs(omega) < 1e-9:
        return x + v * dt * math.cos(theta), y + v * dt * math.sin(theta), theta
    nt = theta + omega * dt
    r = v / omega
    return x + r * (math.sin(nt) - math.sin(theta)), y + r * (math.cos(theta) - math.cos(nt)), nt


def step_robot(
    state: RobotState,
    cmd: tuple[float, float],
    dt: float,
    world: WorldSpec | None = None,
    radius: float = 0.3,
) -> RobotState:
    """Advance the unicycle model by dt with exact arc integration.

    With a world given, the robot is a disc of the given radius and the
    translation halts at first contact with any solid segment (the heading
    still integrates the full dt, so in-place rotation is always allowed).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, omega = cmd
    nx, ny, nth = _integrate_unicycle(state.x, state.y, state.theta, v, omega, dt)
    if world is not None and v != 0.0:
        segments = world.solid_segments
        if point_segments_distance(np.array([nx, ny]), segments) < radius:
            # Bisect the time fraction of first contact; heading keeps integrating.
            lo, hi = 0.0, 1.0
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                mx, my, _ = _integrate_unicycle(state.x, state.y, state.theta, v, omega, mid * dt)
                if point_segments_distance(np.array([mx, my]), segments) < radius:
                    hi = mid
                else:
                    lo = mid
            nx, ny, _ = _integrate_unicycle(state.x, state.y, state.theta, v, omega, lo * dt)
    return RobotState(nx, ny, wrap_angle(nth), v=v, omega=omega)


def camera_pose(pose: RobotState, extr: CameraExtrinsics) -> tuple[np.ndarray, float]:
    """Camera optical center (3D map frame) and optical-axis yaw."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    cx = pose.x + c * extr.x - s * extr.y
    cy = pose.y + s * extr.x + c * extr.y
    return np.array([cx, cy, extr.z]), wrap_angle(pose.theta + extr.yaw)


def map_to_camera(pt_map: np.ndarray, pose: RobotState, extr: CameraExtrinsics) -> np.ndarray:
    """Map-frame 3D point -> camera frame (+Z forward, +X right, +Y down)."""
    origin, yaw = camera_pose(pose, extr)
    rel = np.asarray(pt_map, dtype=float) - origin
    c, s = math.cos(yaw), math.sin(yaw)
    fwd = c * rel[0] + s * rel[1]
    left = -s * rel[0] + c * rel[1]
    return np.array([-left, -rel[2], fwd])


def _plate_in_view(world: WorldSpec, pose: RobotState, cyl: CylinderTruth) -> np.ndarray | None:
    """Visibility gate shared by the detector and the cloud sampler.

    Returns the plate center in the camera frame when the plate is in range,
    inside the FOV, facing the camera within max_incidence, and unoccluded;
    None otherwise.
    """
    cam = world.camera
    origin3, _ = camera_pose(pose, world.extrinsics)
    center3 = cyl.plate_center3d()
    pt_cam = map_to_camera(center3, pose, world.extrinsics)
    z = pt_cam[2]
    if z <= 1e-6:
        return None
    if math.hypot(center3[0] - origin3[0], center3[1] - origin3[1]) > cam.max_detect_range:
        return None
    if abs(math.atan2(pt_cam[0], z)) > 0.5 * cam.hfov:
        return None
    normal = cyl.plate_normal()
    to_cam = origin3[:2] - cyl.plate_center()
    dist2d = float(np.hypot(*to_cam))
    if dist2d < 1e-9:
        return None
    incidence = math.acos(max(-1.0, min(1.0, float(np.dot(normal, to_cam)) / dist2d)))
    if incidence > cam.max_incidence:
        return None
    sight_end = cyl.plate_center() + 0.01 * normal  # just off the base face
    if segment_crosses_any(origin3[:2], sight_end, world.occlusion_segments(exclude=cyl)):
        return None
    return pt_cam


def detect_plates(
    world: WorldSpec,
    pose: RobotState,
    rng: np.random.Generator | None = None,
    partial_view_bias: bool = False,
) -> list[PlateDetection]:
    """Geometric stand-in for the plate detector.

    Reports the perspective projection of every visible plate center (image
    coordinates) plus the measured depth. Optional partial-view bias shifts
    the reported pixel when the plate disc is clipped by the image edge,
    reproducing the radial localization offset of bounding-box detectors that
    fire on partial views.
    """
    cam = world.camera
    detections: list[PlateDetection] = []
    for cyl in world.cylinders:
        pt_cam = _plate_in_view(world, pose, cyl)
        if pt_cam is None:
            continue
        z = pt_cam[2]
        px_rel = cam.focal_length * pt_cam[0] / z
        py_rel = cam.focal_length * pt_cam[1] / z
        if partial_view_bias:
            # A plate clipped by the image edge yields a bounding box centered
            # on the visible part only; shift the reported bearing accordingly.
            bearing = math.atan2(pt_cam[0], z)
            ang_radius = math.atan(0.5 * cyl.diameter / z)
            overlap = 1.2 * ang_radius - (0.5 * cam.hfov - abs(bearing))
            if overlap > 0.0 and abs(bearing) > 1e-9:
                shift = -math.copysign(min(0.5 * overlap, 0.5 * ang_radius), bearing)
                px_rel = cam.focal_length * math.tan(bearing + shift)
        depth = z
        if cam.depth_noise_sigma > 0.0:
            if rng is None:
                rng = np.random.default_rng(world.lidar.seed + 1)
            depth = max(0.01, z + float(rng.normal(0.0, cam.depth_noise_sigma)))
        pixel_x = 0.5 * cam.image_width + px_rel
        pixel_y = 0.5 * cam.image_height + py_rel
        if not (0.0 <= pixel_x < cam.image_width and 0.0 <= pixel_y < cam.image_height):
            continue
        detections.append(PlateDetection(pixel_x, pixel_y, depth, cyl.tag_id))
    return detections


def plate_visible(world: WorldSpec, pose: RobotState, cyl: CylinderTruth) -> bool:
    return _plate_in_view(world, pose, cyl) is not None


def sample_plate_pointcloud(
    world: WorldSpec,
    pose: RobotState,
    plate_center_map: np.ndarray,
    half_edge: float = 0.25,
    n_points: int = 400,
    sigma: float = 0.0,
    outlier_fraction: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Synthesize the point-cloud patch cropped around an estimated plate center.

    Inlier points are sampled uniformly on the true base disc of the nearest
    visible plate and perturbed along the disc normal; outliers are uniform in
    the crop cube. Points outside the cube centered at plate_center_map are
    discarded. Returns an (n, 3) array in the camera frame.
    """
    if half_edge <= 0:
        raise ValueError("half_edge must be positive")
    plate_center_map = np.asarray(plate_center_map, dtype=float)
    if rng is None:
        rng = np.random.default_rng(world.lidar.seed + 2)

    target = None
    best = math.inf
    for cyl in world.cylinders:
        d = float(np.hypot(*(cyl.plate_center() - plate_center_map[:2])))
        if d < best and plate_visible(world, pose, cyl):
            best, target = d, cyl
    if target is None:
        return np.zeros((0, 3))

    n_out = int(round(n_points * outlier_fraction))
    n_in = n_points - n_out
    center3 = target.plate_center3d()
    normal2 = target.plate_normal()
    normal3 = np.array([normal2[0], normal2[1], 0.0])
    e1 = np.array([-normal2[1], normal2[0], 0.0])
    e2 = np.array([0.0, 0.0, 1.0])
    radius = 0.5 * target.diameter

    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n_in))
    phi = rng.uniform(0.0, 2.0 * math.pi, n_in)
    pts = center3[None, :] + np.outer(r * np.cos(phi), e1) + np.outer(r * np.sin(phi), e2)
    if sigma > 0.0:
        pts = pts + np.outer(rng.normal(0.0, sigma, n_in), normal3)
    if n_out > 0:
        cube = plate_center_map[None, :] + rng.uniform(-half_edge, half_edge, (n_out, 3))
        pts = np.vstack([pts, cube])
    inside = np.all(np.abs(pts - plate_center_map[None, :]) <= half_edge + 1e-12, axis=1)
    pts = pts[inside]
    return np.array([map_to_camera(p, pose, world.extrinsics) for p in pts]).reshape(-1, 3)
