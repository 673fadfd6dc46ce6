"""The rich information map: occupancy grid plus the cylinder database.

Covers duplicate-gated registration, persistence of the map bundle, the
update-mode recheck that verifies stored records in the live world, and the
inspector-facing render.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .encircle import EncircleParams, RegionUnreachable, run_encirclement
from .geometry import wrap_angle
from .nav import NavParams, StuckError, follow_path, plan_path, rotate_to
from .occupancy import (
    PGM_FREE,
    PGM_OCCUPIED,
    PGM_UNKNOWN,
    FREE,
    OCCUPIED,
    TrinaryMap,
    load_pgm,
    save_pgm,
)
from .perception import CylinderObservation
from .world import RobotState, WorldSpec

SCHEMA_VERSION = 1

CONFIRMED = "confirmed"
MISSING = "missing"
NEW = "new"

RECORD_FIELDS = ("id", "x", "y", "z", "axis_yaw", "length", "diameter",
                 "tag_id", "status", "first_seen", "last_seen")


class MapLoadError(Exception):
    """The bundle on disk could not be loaded; no partial state is returned."""


@dataclass
class CylinderRecord:
    id: int
    position: np.ndarray  # (3,) map frame: plate/base center
    axis_yaw: float | None  # signed; compared mod pi, sign kept for rendering
    length: float
    diameter: float
    tag_id: str
    status: str = NEW
    first_seen: float = 0.0
    last_seen: float = 0.0
    n_obs: int = 1  # session-local, not persisted

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)

    def axis_dir(self) -> np.ndarray | None:
        if self.axis_yaw is None:
            return None
        return np.array([math.cos(self.axis_yaw), math.sin(self.axis_yaw)])


@dataclass
class RichMap:
    grid: TrinaryMap | None = None
    records: list = field(default_factory=list)
    regions: list = field(default_factory=list)
    params_snapshot: dict = field(default_factory=dict)
    alpha: float = 0.3
    next_id: int = 1

    def record_by_id(self, rid: int) -> CylinderRecord:
        for rec in self.records:
            if rec.id == rid:
                return rec
        raise KeyError(rid)

    def active_records(self) -> list:
        return [r for r in self.records if r.status != MISSING]


@dataclass
class UpdateReport:
    verified: list = field(default_factory=list)
    deleted: list = field(default_factory=list)
    added: list = field(default_factory=list)
    skipped_piles: list = field(default_factory=list)  # record-id groups
    notes: list = field(default_factory=list)


def assert_alpha_invariant(m: RichMap) -> None:
    active = m.active_records()
    for i, a in enumerate(active):
        for b in active[i + 1:]:
            d = float(np.linalg.norm(a.position - b.position))
            if d <= m.alpha:
                raise RuntimeError(
                    f"records {a.id} and {b.id} are {d:.3f} m apart (alpha {m.alpha})")


def _average_axis(yaw_old: float, n_old: int, yaw_new: float) -> float:
    """Running mean of axis directions mod pi, keeping the old sign branch."""
    v = np.array([math.cos(2 * yaw_old), math.sin(2 * yaw_old)]) * n_old
    v = v + np.array([math.cos(2 * yaw_new), math.sin(2 * yaw_new)])
    mean = 0.5 * math.atan2(v[1], v[0])
    # Pick the representative closest to the previous signed yaw.
    cands = (mean, wrap_angle(mean + math.pi))
    return min(cands, key=lambda c: abs(wrap_angle(c - yaw_old)))


def register(m: RichMap, obs: CylinderObservation, alpha: float | None = None,
             t: float = 0.0,
             default_dims: tuple[float, float] = (1.2, 0.3)) -> tuple[str, int]:
    """Insert the observation or fold it into the nearest existing record.

    An observation within alpha of an active record is a duplicate of the
    nearest one; the record is refined by running average (skipped when the
    refined position would break the pairwise-alpha invariant). Otherwise a
    fresh record is inserted. Returns ("inserted" | "duplicate", record id).
    """
    alpha = m.alpha if alpha is None else alpha
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    candidates = m.active_records()
    nearest = None
    nearest_d = math.inf
    for rec in candidates:
        d = float(np.linalg.norm(rec.position - obs.position))
        if d < nearest_d:
            nearest, nearest_d = rec, d

    if nearest is not None and nearest_d <= alpha:
        refined = (nearest.position * nearest.n_obs + obs.position) / (nearest.n_obs + 1)
        ok = all(
            float(np.linalg.norm(refined - other.position)) > alpha
            for other in candidates if other is not nearest
        )
        if ok:
            nearest.position = refined
        if obs.axis is not None:
            obs_yaw = math.atan2(obs.axis[1], obs.axis[0])
            if nearest.axis_yaw is None:
                nearest.axis_yaw = obs_yaw
            else:
                nearest.axis_yaw = _average_axis(nearest.axis_yaw, nearest.n_obs, obs_yaw)
        nearest.n_obs += 1
        nearest.last_seen = t
        assert_alpha_invariant(m)
        return ("duplicate", nearest.id)

    axis_yaw = None if obs.axis is None else math.atan2(obs.axis[1], obs.axis[0])
    rec = CylinderRecord(
        id=m.next_id,
        position=obs.position.copy(),
        axis_yaw=axis_yaw,
        length=default_dims[0],
        diameter=default_dims[1],
        tag_id=obs.tag_id,
        status=NEW,
        first_seen=t,
        last_seen=t,
    )
    m.records.append(rec)
    m.next_id += 1
    assert_alpha_invariant(m)
    return ("inserted", rec.id)


def count(m: RichMap) -> int:
    """Number of records not marked missing."""
    return len(m.active_records())


def records_to_json_obj(m: RichMap) -> dict:
    records = []
    for rec in m.records:
        records.append({
            "id": rec.id,
            "x": float(rec.position[0]),
            "y": float(rec.position[1]),
            "z": float(rec.position[2]),
            "axis_yaw": None if rec.axis_yaw is None else float(rec.axis_yaw),
            "length": float(rec.length),
            "diameter": float(rec.diameter),
            "tag_id": rec.tag_id,
            "status": rec.status,
            "first_seen": float(rec.first_seen),
            "last_seen": float(rec.last_seen),
        })
    return {"schema_version": SCHEMA_VERSION, "alpha": float(m.alpha), "records": records}


def save(m: RichMap, stem) -> dict:
    """Write the map bundle: <stem>.pgm/.meta/.records.json/.ppm.

    Returns the paths written.
    """
    if m.grid is None:
        raise ValueError("map bundle needs a grid")
    stem = str(stem)
    paths = {
        "pgm": FsPath(stem + ".pgm"),
        "meta": FsPath(stem + ".meta"),
        "records": FsPath(stem + ".records.json"),
        "render": FsPath(stem + ".ppm"),
    }
    save_pgm(m.grid, paths["pgm"])
    paths["records"].write_text(json.dumps(records_to_json_obj(m), indent=2) + "\n")
    render(m, paths["render"])
    return paths


def load(stem) -> RichMap:
    """Load a bundle written by save(); raises MapLoadError on any defect."""
    stem = str(stem)
    records_path = FsPath(stem + ".records.json")
    try:
        obj = json.loads(records_path.read_text())
    except FileNotFoundError as exc:
        raise MapLoadError(f"missing records file {records_path}") from exc
    except json.JSONDecodeError as exc:
        raise MapLoadError(f"malformed records file {records_path}: {exc}") from exc
    if not isinstance(obj, dict) or "schema_version" not in obj:
        raise MapLoadError(f"records file {records_path} lacks schema_version")
    version = obj["schema_version"]
    if version != SCHEMA_VERSION:
        raise MapLoadError(f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})")

    try:
        grid = load_pgm(FsPath(stem + ".pgm"))
    except (FileNotFoundError, ValueError) as exc:
        raise MapLoadError(f"bad grid in bundle {stem}: {exc}") from exc

    records = []
    try:
        alpha = float(obj["alpha"])
        for raw in obj["records"]:
            missing_fields = [k for k in RECORD_FIELDS if k not in raw]
            if missing_fields:
                raise MapLoadError(f"record lacks fields {missing_fields}")
            records.append(CylinderRecord(
                id=int(raw["id"]),
                position=np.array([raw["x"], raw["y"], raw["z"]], dtype=float),
                axis_yaw=None if raw["axis_yaw"] is None else float(raw["axis_yaw"]),
                length=float(raw["length"]),
                diameter=float(raw["diameter"]),
                tag_id=str(raw["tag_id"]),
                status=str(raw["status"]),
                first_seen=float(raw["first_seen"]),
                last_seen=float(raw["last_seen"]),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MapLoadError):
            raise
        raise MapLoadError(f"malformed record data in {records_path}: {exc}") from exc

    next_id = max((r.id for r in records), default=0) + 1
    return RichMap(grid=grid, records=records, alpha=alpha, next_id=next_id)


def render(m: RichMap, path) -> FsPath:
    """Render the grid plus record footprints as a PPM (P6) image.

    Records are drawn as oriented length x diameter rectangles: green for
    confirmed or new records, red for missing ones.
    """
    if m.grid is None:
        raise ValueError("nothing to render without a grid")
    tri = m.grid
    gray = np.full(tri.cells.shape, PGM_UNKNOWN, dtype=np.uint8)
    gray[tri.cells == FREE] = PGM_FREE
    gray[tri.cells == OCCUPIED] = PGM_OCCUPIED
    rgb = np.stack([gray] * 3, axis=2)

    xs = tri.origin[0] + (np.arange(tri.width) + 0.5) * tri.resolution
    ys = tri.origin[1] + (np.arange(tri.height) + 0.5) * tri.resolution
    xx, yy = np.meshgrid(xs, ys)
    for rec in m.records:
        axis = rec.axis_dir()
        if axis is None:
            axis = np.array([1.0, 0.0])
            center = rec.position[:2]
        else:
            center = rec.position[:2] + 0.5 * rec.length * axis
        u = (xx - center[0]) * axis[0] + (yy - center[1]) * axis[1]
        v = -(xx - center[0]) * axis[1] + (yy - center[1]) * axis[0]
        inside = (np.abs(u) <= 0.5 * rec.length) & (np.abs(v) <= 0.5 * rec.diameter)
        color = (255, 0, 0) if rec.status == MISSING else (0, 255, 0)
        rgb[inside] = color

    path = FsPath(path)
    header = f"P6\n{tri.width} {tri.height}\n255\n".encode("ascii")
    path.write_bytes(header + rgb[::-1, :, :].tobytes())
    return path


def cluster_piles(m: RichMap, link: float | None = None) -> list[list[CylinderRecord]]:
    """Single-linkage clusters over record positions (default link = 2 alpha)."""
    link = 2.0 * m.alpha if link is None else link
    records = sorted(m.records, key=lambda r: r.id)
    piles: list[list[CylinderRecord]] = []
    assigned: set[int] = set()
    for rec in records:
        if rec.id in assigned:
            continue
        pile = [rec]
        assigned.add(rec.id)
        frontier = [rec]
        while frontier:
            cur = frontier.pop()
            for other in records:
                if other.id in assigned:
                    continue
                if float(np.linalg.norm(cur.position - other.position)) <= link:
                    pile.append(other)
                    assigned.add(other.id)
                    frontier.append(other)
        pile.sort(key=lambda r: r.id)
        piles.append(pile)
    return piles


def recheck(
    m: RichMap,
    world: WorldSpec,
    robot: RobotState,
    observe_cb,
    nav_params: NavParams,
    encircle_params: EncircleParams,
    clock,
    rng: np.random.Generator | None = None,
    log=None,
    standoff: float = 1.0,
) -> tuple[RobotState, UpdateReport]:
    """Update-mode pass over every stored pile.

    Per pile: visit each record's plate from a standoff viewpoint derived
    from the stored pose and verify it against a fresh observation within
    alpha; unverified records are marked missing. Afterwards the pile is
    encircled once more so added cylinders get registered. Piles whose
    viewpoints are all unreachable are skipped and flagged.
    """
    if m.grid is None:
        raise ValueError("recheck needs the loaded grid")
    if rng is None:
        rng = np.random.default_rng(world.lidar.seed)
    tri = m.grid
    report = UpdateReport()

    def emit(event: str, **kw) -> None:
        if log is not None:
            log(event, **kw)

    def drive_to(target, heading) -> bool:
        nonlocal robot
        path = plan_path(tri, (robot.x, robot.y), target, nav_params.inflate_radius,
                         allow_unknown=False, goal_relax=0.8)
        if path is None:
            return False

        def on_tick(_):
            clock.t += nav_params.dt

        try:
            robot = follow_path(world, robot, path, nav_params, on_tick=on_tick)
        except StuckError:
            return False
        robot = rotate_to(world, robot, heading, nav_params, on_tick=on_tick)
        return True

    for pile in cluster_piles(m):
        pile_ids = [r.id for r in pile]
        centroid = np.mean([r.position[:2] for r in pile], axis=0)
        verified: set[int] = set()
        reached_any = False
        for rec in pile:
            if rec.id in verified:
                continue
            axis = rec.axis_dir()
            if axis is not None:
                dirs = [-axis, axis]  # plate faces away from the body first
            else:
                away = rec.position[:2] - centroid
                norm = float(np.linalg.norm(away))
                away = away / norm if norm > 1e-9 else np.array([1.0, 0.0])
                dirs = [away, -away]
            for d in dirs:
                vp = rec.position[:2] + standoff * d
                if not world.contains(vp):
                    continue
                if not drive_to(vp, math.atan2(-d[1], -d[0])):
                    continue
                reached_any = True
                observations = observe_cb(robot)
                for obs in observations:
                    for other in pile:
                        if other.id in verified:
                            continue
                        if float(np.linalg.norm(obs.position - other.position)) <= m.alpha:
                            verified.add(other.id)
                            other.last_seen = clock.t
                emit("recheck_stop", record=rec.id, observations=len(observations),
                     verified=sorted(verified))
                break

        if not reached_any:
            report.skipped_piles.append(pile_ids)
            report.notes.append(f"pile {pile_ids} unreachable; left untouched")
            emit("pile_skipped", records=pile_ids)
            continue

        for rec in pile:
            if rec.id in verified:
                rec.status = CONFIRMED
                report.verified.append(rec.id)
            else:
                rec.status = MISSING
                report.deleted.append(rec.id)
                emit("record_deleted", record=rec.id)

        # Encircle the pile once more to pick up added cylinders.
        before = {r.id for r in m.records}

        def register_cb(obs) -> bool:
            outcome, _ = register(m, obs, t=clock.t)
            return outcome == "inserted"

        try:
            robot, _, _ = run_encirclement(
                world, robot, tri, centroid, encircle_params, nav_params,
                observe_cb, register_cb, clock, rng, log)
        except RegionUnreachable as exc:
            report.notes.append(f"pile {pile_ids}: encirclement skipped ({exc})")
        report.added.extend(sorted(r.id for r in m.records if r.id not in before))

    report.verified.sort()
    report.deleted.sort()
    report.added.sort()
    return robot, report
