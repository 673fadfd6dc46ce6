"""Scenario files: a YAML document describing the world, robot, and all
module parameters for one run. Unknown keys are rejected so typos surface
immediately; every section falls back to the documented defaults."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .encircle import EncircleParams
from .nav import ExploreParams, NavParams
from .occupancy import L_CLAMP_DEFAULT, OccupancyGrid
from .perception import CloudParams, RansacParams
from .world import CameraExtrinsics, CameraSpec, CylinderTruth, LidarSpec, RobotState, WorldSpec


class ScenarioFileError(Exception):
    pass


@dataclass
class GridParams:
    resolution: float = 0.05
    margin: float = 0.5  # unknown border around the field, meters
    clamp: float = L_CLAMP_DEFAULT


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    field_width: float = 6.0
    field_height: float = 10.0
    robot_start: tuple = (0.6, 0.6, 1.5707963267948966)
    walls: list = field(default_factory=list)
    cylinders: list = field(default_factory=list)
    nominal_length: float = 1.2
    nominal_diameter: float = 0.3
    lidar: LidarSpec = field(default_factory=LidarSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    grid: GridParams = field(default_factory=GridParams)
    explore: ExploreParams = field(default_factory=ExploreParams)
    nav: NavParams = field(default_factory=NavParams)
    encircle: EncircleParams = field(default_factory=EncircleParams)
    cloud: CloudParams = field(default_factory=CloudParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    alpha: float = 0.3
    kernel_radius: int = 3
    partial_view_bias: bool = False
    min_expected_cylinders: int = 0
    recheck_standoff: float = 1.0

    @property
    def nominal_dims(self) -> tuple[float, float]:
        return (self.nominal_length, self.nominal_diameter)


def _construct(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioFileError(f"unknown keys {sorted(unknown)} in {where}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ScenarioFileError(f"bad values in {where}: {exc}") from exc


def _parse_cylinder(raw: dict, idx: int) -> CylinderTruth:
    known = {"center", "yaw", "length", "diameter", "plate_face", "tag_id"}
    unknown = set(raw) - known
    if unknown:
        raise ScenarioFileError(f"unknown keys {sorted(unknown)} in cylinders[{idx}]")
    try:
        return CylinderTruth(
            center=np.asarray(raw["center"], dtype=float),
            yaw=float(raw.get("yaw", 0.0)),
            length=float(raw.get("length", 1.2)),
            diameter=float(raw.get("diameter", 0.3)),
            plate_face=raw.get("plate_face", "front_base"),
            tag_id=str(raw.get("tag_id", f"cyl{idx}")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFileError(f"bad cylinder at index {idx}: {exc}") from exc


_TOP_KEYS = {
    "name", "seed", "field", "robot", "walls", "cylinders", "nominal_cylinder",
    "lidar", "camera", "extrinsics", "grid", "explore", "nav", "encircle",
    "cloud", "ransac", "alpha", "kernel_radius", "partial_view_bias",
    "min_expected_cylinders", "recheck_standoff",
}


def parse_scenario(raw: dict, name_hint: str = "scenario") -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioFileError("scenario document must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ScenarioFileError(f"unknown top-level keys {sorted(unknown)}")

    sc = Scenario(name=str(raw.get("name", name_hint)), seed=int(raw.get("seed", 0)))
    fld = raw.get("field", {})
    sc.field_width = float(fld.get("width", sc.field_width))
    sc.field_height = float(fld.get("height", sc.field_height))
    robot = raw.get("robot", {})
    start = robot.get("start", list(sc.robot_start))
    if len(start) != 3:
        raise ScenarioFileError("robot.start must be [x, y, theta]")
    sc.robot_start = tuple(float(v) for v in start)
    sc.walls = [tuple(float(v) for v in w) for w in raw.get("walls", [])]
    sc.cylinders = [_parse_cylinder(c, i) for i, c in enumerate(raw.get("cylinders", []))]
    nominal = raw.get("nominal_cylinder", {})
    sc.nominal_length = float(nominal.get("length", sc.nominal_length))
    sc.nominal_diameter = float(nominal.get("diameter", sc.nominal_diameter))

    sc.lidar = _construct(LidarSpec, raw.get("lidar", {}), "lidar")
    sc.camera = _construct(CameraSpec, raw.get("camera", {}), "camera")
    sc.extrinsics = _construct(CameraExtrinsics, raw.get("extrinsics", {}), "extrinsics")
    sc.grid = _construct(GridParams, raw.get("grid", {}), "grid")
    sc.explore = _construct(ExploreParams, raw.get("explore", {}), "explore")
    sc.nav = _construct(NavParams, raw.get("nav", {}), "nav")
    sc.encircle = _construct(EncircleParams, raw.get("encircle", {}), "encircle")
    sc.cloud = _construct(CloudParams, raw.get("cloud", {}), "cloud")
    sc.ransac = _construct(RansacParams, raw.get("ransac", {}), "ransac")
    sc.alpha = float(raw.get("alpha", sc.alpha))
    sc.kernel_radius = int(raw.get("kernel_radius", sc.kernel_radius))
    sc.partial_view_bias = bool(raw.get("partial_view_bias", sc.partial_view_bias))
    sc.min_expected_cylinders = int(raw.get("min_expected_cylinders", 0))
    sc.recheck_standoff = float(raw.get("recheck_standoff", sc.recheck_standoff))
    return sc


def apply_overrides(raw: dict, overrides: dict[str, str]) -> dict:
    """Apply dotted-path overrides (values parsed as YAML scalars)."""
    for dotted, text in overrides.items():
        value = yaml.safe_load(text) if isinstance(text, str) else text
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ScenarioFileError(f"cannot override through scalar at {part!r} in {dotted!r}")
        node[parts[-1]] = value
    return raw


def load_scenario(path, overrides: dict[str, str] | None = None) -> Scenario:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ScenarioFileError(f"scenario file not found: {path}")
    except yaml.YAMLError as exc:
        raise ScenarioFileError(f"invalid YAML in {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_scenario(raw, name_hint=path.stem)


def build_world(sc: Scenario) -> WorldSpec:
    try:
        return WorldSpec(
            field_width=sc.field_width,
            field_height=sc.field_height,
            walls=list(sc.walls),
            cylinders=list(sc.cylinders),
            lidar=sc.lidar,
            camera=sc.camera,
            extrinsics=sc.extrinsics,
        )
    except ValueError as exc:
        raise ScenarioFileError(str(exc)) from exc


def build_grid(sc: Scenario) -> OccupancyGrid:
    grid = OccupancyGrid.for_field(sc.field_width, sc.field_height,
                                   sc.grid.resolution, sc.grid.margin)
    grid.l_min, grid.l_max = -sc.grid.clamp, sc.grid.clamp
    return grid


def start_state(sc: Scenario) -> RobotState:
    x, y, theta = sc.robot_start
    return RobotState(x, y, theta)
