"""End-to-end runs: map generation, update mode, and batch trials."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import database
from .database import RichMap, UpdateReport, register
from .encircle import RegionUnreachable, run_encirclement
from .geometry import wrap_angle
from .gridproc import extract_regions
from .nav import explore
from .perception import observe
from .scenario import Scenario, build_grid, build_world, load_scenario, start_state
from .world import SimClock, WorldSpec


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class RunConfig:
    scenario_path: str
    mode: str = "generate"  # or "update"
    seed: int | None = None  # overrides the scenario seed
    output_dir: str = "out"
    map_stem: str | None = None  # existing bundle, required for update mode
    overrides: dict = field(default_factory=dict)
    debug_dumps: bool = False

    def __post_init__(self):
        if self.mode not in ("generate", "update"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "update" and not self.map_stem:
            raise ValueError("update mode requires an existing map bundle path")


@dataclass
class RunSummary:
    name: str
    seed: int
    cylinders_found: int = 0
    cylinders_localized_within_tol: int = 0
    poses_within_tol: int = 0
    sim_time: float = 0.0
    wall_time: float = 0.0
    event_counts: dict = field(default_factory=dict)
    regions: int = 0
    ok: bool = True
    error: str = ""

    def row(self) -> list:
        return [self.name, self.seed, self.cylinders_found,
                self.cylinders_localized_within_tol, self.poses_within_tol,
                round(self.sim_time, 2), round(self.wall_time, 2)]


class EventLog:
    """Line-delimited JSON event records tied to the simulation clock."""

    def __init__(self, path: Path, clock: SimClock):
        self.path = path
        self.clock = clock
        self.counts: dict[str, int] = {}
        self._lines: list[str] = []

    def __call__(self, event: str, **kw) -> None:
        self.counts[event] = self.counts.get(event, 0) + 1
        record = {"t": round(self.clock.t, 3), "event": event}
        record.update(kw)
        self._lines.append(json.dumps(record, default=_jsonable))

    def flush(self) -> None:
        self.path.write_text("\n".join(self._lines) + ("\n" if self._lines else ""))


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON encodable: {type(value)}")


def evaluate_against_truth(m: RichMap, world: WorldSpec, alpha: float,
                           axis_tol: float = math.radians(5.0)) -> tuple[int, int, int]:
    """Score the database against ground truth.

    found is the database count; localized counts records within alpha/2 of a
    distinct true plate center; poses counts matched records whose axis is
    within axis_tol of the true cylinder axis mod pi.
    """
    records = m.active_records()
    found = len(records)
    truth = [(cyl.plate_center3d(), cyl.yaw) for cyl in world.cylinders]
    pairs = []
    for i, rec in enumerate(records):
        for j, (pos, _) in enumerate(truth):
            pairs.append((float(np.linalg.norm(rec.position - pos)), i, j))
    pairs.sort()
    used_rec: set[int] = set()
    used_truth: set[int] = set()
    localized = 0
    poses = 0
    for d, i, j in pairs:
        if i in used_rec or j in used_truth:
            continue
        used_rec.add(i)
        used_truth.add(j)
        if d <= 0.5 * alpha:
            localized += 1
        rec = records[i]
        if rec.axis_yaw is not None:
            err = abs(wrap_angle(rec.axis_yaw - truth[j][1]))
            err = min(err, math.pi - err)  # axis has no preferred end
            if err <= axis_tol:
                poses += 1
    return found, localized, poses


def _prepare(cfg: RunConfig):
    sc = load_scenario(cfg.scenario_path, cfg.overrides)
    if cfg.seed is not None:
        sc.seed = cfg.seed
        sc.lidar.seed = cfg.seed
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return sc, out


def run_generate(cfg: RunConfig) -> tuple[RunSummary, RichMap, dict]:
    """Explore, extract regions, encircle each one, and save the bundle."""
    t0 = time.perf_counter()
    sc, out = _prepare(cfg)
    summary = RunSummary(name=sc.name, seed=sc.seed)
    clock = SimClock()
    log = EventLog(out / "events.jsonl", clock)
    rng = np.random.default_rng(sc.seed)
    paths: dict = {}

    try:
        world = build_world(sc)
        grid = build_grid(sc)
        robot = start_state(sc)
    except Exception as exc:
        raise StageError("setup", str(exc)) from exc

    try:
        log("explore_start")
        result = explore(world, grid, robot, sc.explore, sc.nav, rng, log)
        clock.t += result.ticks * sc.nav.dt
        robot = result.robot
        tri = result.tri
        log("explore_done", complete=result.complete, scans=result.scans)
        if not result.complete:
            log("explore_incomplete")
    except Exception as exc:
        raise StageError("explore", str(exc)) from exc

    try:
        debug_dir = out / "gridproc" if cfg.debug_dumps else None
        regions = extract_regions(tri, sc.nominal_dims, sc.kernel_radius, debug_dir)
        summary.regions = len(regions)
        log("regions_found", count=len(regions),
            areas=[round(r.area, 3) for r in regions])
    except Exception as exc:
        raise StageError("gridproc", str(exc)) from exc

    m = RichMap(grid=tri, regions=regions, alpha=sc.alpha,
                params_snapshot={"scenario": sc.name, "seed": sc.seed})

    def observe_cb(r):
        return observe(world, r, sc.cloud, sc.ransac, rng, sc.partial_view_bias)

    def register_cb(obs) -> bool:
        outcome, rid = register(m, obs, t=clock.t, default_dims=sc.nominal_dims)
        if outcome == "inserted":
            log("registered", record=rid, tag=obs.tag_id,
                position=[round(float(v), 3) for v in obs.position])
        return outcome == "inserted"

    try:
        for region in regions:
            log("encircle_region", centroid=[round(float(v), 3) for v in region.centroid])
            try:
                robot, state, stats = run_encirclement(
                    world, robot, tri, region.centroid, sc.encircle, sc.nav,
                    observe_cb, register_cb, clock, rng, log)
                log("region_done", corner_turns=stats.corner_turns,
                    inspect_stops=stats.inspect_stops, laps=round(state.laps_completed, 2),
                    aborted=stats.aborted)
            except RegionUnreachable as exc:
                log("region_skipped", reason=str(exc))
    except Exception as exc:
        raise StageError("encircle", str(exc)) from exc

    try:
        paths = database.save(m, out / sc.name)
    except Exception as exc:
        raise StageError("save", str(exc)) from exc

    found, localized, poses = evaluate_against_truth(m, world, sc.alpha)
    summary.cylinders_found = found
    summary.cylinders_localized_within_tol = localized
    summary.poses_within_tol = poses
    summary.sim_time = clock.t
    summary.wall_time = time.perf_counter() - t0
    summary.ok = found >= sc.min_expected_cylinders
    if not summary.ok:
        summary.error = f"found {found} < min_expected {sc.min_expected_cylinders}"
    summary.event_counts = dict(sorted(log.counts.items()))
    log("summary", found=found, localized=localized, poses=poses)
    log.flush()
    _write_summary(out, [summary])
    return summary, m, paths


def run_update(cfg: RunConfig) -> tuple[RunSummary, UpdateReport, RichMap, dict]:
    """Load a bundle, recheck every pile in the live world, save the update."""
    t0 = time.perf_counter()
    sc, out = _prepare(cfg)
    summary = RunSummary(name=sc.name, seed=sc.seed)
    clock = SimClock()
    log = EventLog(out / "events.jsonl", clock)
    rng = np.random.default_rng(sc.seed)

    try:
        m = database.load(cfg.map_stem)
    except database.MapLoadError as exc:
        raise StageError("load", str(exc)) from exc

    try:
        world = build_world(sc)
        robot = start_state(sc)
    except Exception as exc:
        raise StageError("setup", str(exc)) from exc

    def observe_cb(r):
        return observe(world, r, sc.cloud, sc.ransac, rng, sc.partial_view_bias)

    try:
        robot, report = database.recheck(
            m, world, robot, observe_cb, sc.nav, sc.encircle, clock, rng, log,
            standoff=sc.recheck_standoff)
    except Exception as exc:
        raise StageError("recheck", str(exc)) from exc

    try:
        paths = database.save(m, out / sc.name)
        report_obj = {
            "verified": report.verified,
            "deleted": report.deleted,
            "added": report.added,
            "skipped_piles": report.skipped_piles,
            "notes": report.notes,
            "count": database.count(m),
        }
        (out / "update_report.json").write_text(json.dumps(report_obj, indent=2) + "\n")
    except Exception as exc:
        raise StageError("save", str(exc)) from exc

    found, localized, poses = evaluate_against_truth(m, world, sc.alpha)
    summary.cylinders_found = found
    summary.cylinders_localized_within_tol = localized
    summary.poses_within_tol = poses
    summary.sim_time = clock.t
    summary.wall_time = time.perf_counter() - t0
    summary.ok = not report.skipped_piles
    if report.skipped_piles:
        summary.error = f"skipped piles: {report.skipped_piles}"
    summary.event_counts = dict(sorted(log.counts.items()))
    log("summary", found=found, verified=report.verified, deleted=report.deleted,
        added=report.added)
    log.flush()
    _write_summary(out, [summary])
    return summary, report, m, paths


def run_batch(cfg: RunConfig, trials: int) -> list[RunSummary]:
    """Repeat generate runs with consecutive seeds; one table row per trial."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sc = load_scenario(cfg.scenario_path, cfg.overrides)
    base_seed = cfg.seed if cfg.seed is not None else sc.seed
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries: list[RunSummary] = []
    for k in range(trials):
        seed = base_seed + k
        sub = RunConfig(
            scenario_path=cfg.scenario_path,
            mode="generate",
            seed=seed,
            output_dir=str(out / f"trial_{seed}"),
            overrides=dict(cfg.overrides),
            debug_dumps=cfg.debug_dumps,
        )
        try:
            summary, _, _ = run_generate(sub)
        except StageError as exc:
            summary = RunSummary(name=sc.name, seed=seed, ok=False, error=str(exc))
        summaries.append(summary)
    _write_summary(out, summaries)
    return summaries


_SUMMARY_HEADER = ["scenario", "seed", "cylinders_found", "cylinders_localized",
                   "pose_estimated", "sim_time_s", "wall_time_s"]


def _write_summary(out: Path, summaries: list[RunSummary]) -> None:
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SUMMARY_HEADER)
        for s in summaries:
            writer.writerow(s.row())
    (out / "summary.txt").write_text(format_table(summaries) + "\n")


def format_table(summaries: list[RunSummary]) -> str:
    rows = [_SUMMARY_HEADER] + [[str(v) for v in s.row()] for s in summaries]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines)
