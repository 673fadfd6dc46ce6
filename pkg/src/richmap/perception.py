"""Object localization and pose estimation.

Converts plate detections into map-frame cylinder observations: pinhole
back-projection using the measured depth, a rigid transform into the map
frame, a point-cloud patch cropped around the estimated plate center, RANSAC
for the vertical base plane, and the cylinder axis from the plane normal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import (
    CameraExtrinsics,
    CameraSpec,
    PlateDetection,
    RobotState,
    WorldSpec,
    camera_pose,
    detect_plates,
    sample_plate_pointcloud,
)


class InvalidDetectionError(Exception):
    pass


class PoseEstimationFailed(Exception):
    """No acceptable vertical plane was found in the point patch."""


@dataclass
class RansacParams:
    dist_thresh: float = 0.02
    max_iters: int = 200
    vertical_tol: float = math.radians(15.0)
    min_inlier_ratio: float = 0.3


@dataclass
class CloudParams:
    n_points: int = 400
    sigma: float = 0.005
    outlier_fraction: float = 0.05
    half_edge: float = 0.25


@dataclass
class CylinderObservation:
    position: np.ndarray  # (3,) map frame, plate/base center
    axis: np.ndarray | None  # (2,) unit, pointing from the plate into the body
    tag_id: str
    observer_pose: RobotState
    inlier_ratio: float


def localize_plate(det: PlateDetection, cam: CameraSpec) -> np.ndarray:
    """Invert the pinhole projection: depth is read, X and Y follow.

    Pixel coordinates here are relative to the principal point; detector
    output in image coordinates is shifted at the observe() boundary.
    """
    if det.depth <= 0:
        raise InvalidDetectionError(f"non-positive depth {det.depth}")
    z = det.depth
    return np.array([det.pixel_x * z / cam.focal_length,
                     det.pixel_y * z / cam.focal_length,
                     z])


def to_map_frame(pt_cam: np.ndarray, robot: RobotState, extr: CameraExtrinsics) -> np.ndarray:
    """Camera-frame point (+Z forward, +X right, +Y down) -> map frame."""
    x, y, z = float(pt_cam[0]), float(pt_cam[1]), float(pt_cam[2])
    # Camera axes into base axes (x forward, y left, z up).
    bx, by, bz = z, -x, -y
    cy, sy = math.cos(extr.yaw), math.sin(extr.yaw)
    bx, by = cy * bx - sy * by, sy * bx + cy * by
    bx, by, bz = bx + extr.x, by + extr.y, bz + extr.z
    ct, st = math.cos(robot.theta), math.sin(robot.theta)
    return np.array([robot.x + ct * bx - st * by,
                     robot.y + st * bx + ct * by,
                     bz])


def fit_vertical_plane_ransac(
    cloud: np.ndarray,
    params: RansacParams | None = None,
    rng: np.random.Generator | None = None,
    observer: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """RANSAC for a vertical plane in a z-up point cloud.

    Samples 3-point candidate planes, discards candidates whose normal is
    more than vertical_tol away from horizontal, keeps the consensus maximum,
    and refines it by least squares over the inliers. The returned normal has
    its vertical component zeroed, is unit length, and points toward the
    observer. Raises PoseEstimationFailed when the best consensus is below
    min_inlier_ratio.
    """
    params = params or RansacParams()
    if rng is None:
        rng = np.random.default_rng(0)
    cloud = np.asarray(cloud, dtype=float)
    n = len(cloud)
    if n < 3:
        raise PoseEstimationFailed(f"cloud has only {n} points")

    sin_tol = math.sin(params.vertical_tol)
    best_count = 0
    best_inliers: np.ndarray | None = None
    for _ in range(params.max_iters):
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = cloud[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        if abs(normal[2]) > sin_tol:
            continue  # not a vertical plane
        dist = np.abs((cloud - p0) @ normal)
        inliers = dist <= params.dist_thresh
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    ratio = best_count / n
    if best_inliers is None or ratio < params.min_inlier_ratio:
        raise PoseEstimationFailed(
            f"best inlier ratio {ratio:.2f} below {params.min_inlier_ratio:.2f}")

    pts = cloud[best_inliers]
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    normal = vt[-1]
    normal = np.array([normal[0], normal[1], 0.0])
    norm = np.linalg.norm(normal)
    if norm < 1e-9:
        raise PoseEstimationFailed("refined plane is horizontal")
    normal /= norm
    if observer is not None and float(np.dot(normal, np.asarray(observer) - centroid)) < 0.0:
        normal = -normal
    return normal, ratio


def axis_from_normal(normal: np.ndarray) -> np.ndarray:
    """Cylinder axial direction from the plate-plane normal.

    The normal points from the plate toward the observer, so the axis (into
    the cylinder body) is its planar opposite.
    """
    axis = -np.asarray(normal, dtype=float)[:2]
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("normal has no horizontal component")
    return axis / norm


def observe(
    world: WorldSpec,
    robot: RobotState,
    cloud_params: CloudParams | None = None,
    ransac_params: RansacParams | None = None,
    rng: np.random.Generator | None = None,
    partial_view_bias: bool = False,
) -> list[CylinderObservation]:
    """Detect, localize, and pose-estimate every visible plate.

    Pose-estimation failures degrade the single observation (axis None,
    inlier_ratio 0) and never abort the batch.
    """
    cloud_params = cloud_params or CloudParams()
    ransac_params = ransac_params or RansacParams()
    if rng is None:
        rng = np.random.default_rng(world.lidar.seed)
    cam = world.camera
    observer3, _ = camera_pose(robot, world.extrinsics)

    out: list[CylinderObservation] = []
    for det in detect_plates(world, robot, rng, partial_view_bias):
        rel = PlateDetection(det.pixel_x - 0.5 * cam.image_width,
                             det.pixel_y - 0.5 * cam.image_height,
                             det.depth, det.tag_id)
        pt_cam = localize_plate(rel, cam)
        center_map = to_map_frame(pt_cam, robot, world.extrinsics)
        cloud_cam = sample_plate_pointcloud(
            world, robot, center_map,
            half_edge=cloud_params.half_edge,
            n_points=cloud_params.n_points,
            sigma=cloud_params.sigma,
            outlier_fraction=cloud_params.outlier_fraction,
            rng=rng,
        )
        axis = None
        ratio = 0.0
        if len(cloud_cam) >= 3:
            cloud_map = np.array([to_map_frame(p, robot, world.extrinsics) for p in cloud_cam])
            try:
                normal, ratio = fit_vertical_plane_ransac(cloud_map, ransac_params, rng,
                                                          observer=observer3)
                axis = axis_from_normal(normal)
            except PoseEstimationFailed:
                axis, ratio = None, 0.0
        out.append(CylinderObservation(center_map, axis, det.tag_id,
                                       RobotState(robot.x, robot.y, robot.theta), ratio))
    return out
