"""Four-phase pile encirclement with PD side-distance control.

Phase 1 drives to the candidate region until the forward clearance drops
below beta; phase 2 assigns the pile to the closer of the left/right beam
quarters (the assignment is write-once); phase 3 wall-follows the pile at
distance gamma with a PD controller; phase 4 handles the 90-degree corner
turns when the side distance jumps. Inspection stops interleave with phase 3
and the run quits after quit_after_turns consecutive stops without a new
cylinder registration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle, wrap_angles
from .nav import NavParams, StuckError, follow_path, plan_path
from .occupancy import TrinaryMap
from .world import RobotState, WorldSpec, beam_angles, raycast_lidar, step_robot

APPROACH = "approach"
ASSIGN_SIDE = "assign_side"
FOLLOW = "follow"
CORNER_TURN = "corner_turn"
INSPECT = "inspect"
DONE = "done"

LEFT = "left"
RIGHT = "right"
UNASSIGNED = "unassigned"


class RegionUnreachable(Exception):
    """The candidate region could not be approached; skip and report it."""


@dataclass
class EncircleParams:
    beta: float = 1.5  # approach trigger distance
    gamma: float = 0.8  # side-follow distance
    kp: float = 2.0
    kd: float = 0.5
    v_follow: float = 0.3
    inspect_period: float = 1.0  # simulated seconds between inspection stops
    quit_after_turns: int = 8
    corner_jump: float = 0.7  # side-distance jump that signals a corner
    corner_advance: float = 0.75  # clearance driven past the corner before turning
    safety_stop: float = 0.45
    omega_max: float = 1.5
    # Narrow abeam sector: reads the perpendicular side distance and loses the
    # object all at once at a corner, which is what the corner trigger needs.
    side_sector_half: float = math.radians(10.0)
    forward_sector_half: float = math.radians(30.0)
    dt: float = 0.05
    time_budget: float = 900.0  # simulated seconds per region

    def __post_init__(self):
        if not self.beta > self.gamma > 0:
            raise ValueError("need beta > gamma > 0")


@dataclass
class EncircleState:
    phase: str = APPROACH
    side: str = UNASSIGNED
    turns_without_new: int = 0
    laps_completed: float = 0.0
    e_prev: float | None = None
    corner_armed: bool = False  # set once the side is tracked at close range

    def assign(self, side: str) -> None:
        if self.side != UNASSIGNED and side != self.side:
            raise ValueError("side is write-once per region")
        self.side = side


@dataclass
class EncircleStats:
    corner_turns: int = 0
    inspect_stops: int = 0
    registrations: int = 0
    heading_change: float = 0.0
    observations: int = 0
    aborted: bool = False


def _sector_min(scan: np.ndarray, rel_angles: np.ndarray, center: float, half: float,
                max_range: float) -> float:
    mask = np.abs(wrap_angles(rel_angles - center)) <= half
    if not mask.any():
        return max_range
    return float(scan[mask].min())


def forward_min(scan: np.ndarray, rel_angles: np.ndarray, params: EncircleParams,
                max_range: float) -> float:
    return _sector_min(scan, rel_angles, 0.0, params.forward_sector_half, max_range)


def side_min(scan: np.ndarray, rel_angles: np.ndarray, side: str, params: EncircleParams,
             max_range: float) -> float:
    center = 0.5 * math.pi if side == LEFT else -0.5 * math.pi
    return _sector_min(scan, rel_angles, center, params.side_sector_half, max_range)


def assign_side(scan: np.ndarray, rel_angles: np.ndarray, max_range: float) -> str | None:
    """Phase 2: compare the left and right forward quarters; closer side wins.

    The object sits ahead when the approach stops, so the quarters are the
    two 90-degree sectors flanking the heading. Returns None when both read
    max_range (the object was lost). Exact ties go right.
    """
    rel = wrap_angles(rel_angles)
    left = np.asarray(scan, dtype=float)[(rel > 0.0) & (rel <= 0.5 * math.pi)]
    right = np.asarray(scan, dtype=float)[(rel < 0.0) & (rel >= -0.5 * math.pi)]
    if left.size == 0 or right.size == 0:
        return None
    if (right >= max_range - 1e-9).all() and (left >= max_range - 1e-9).all():
        return None
    return LEFT if left.mean() < right.mean() else RIGHT


def follow_step(
    scan: np.ndarray,
    rel_angles: np.ndarray,
    params: EncircleParams,
    state: EncircleState,
    max_range: float,
) -> tuple[float, float, bool]:
    """Phase 3 PD command; returns (v, omega, corner_detected).

    The controller holds the side-sector minimum range at gamma; positive
    omega is counter-clockwise, so the sign flips with the assigned side.
    """
    if state.side == UNASSIGNED:
        raise ValueError("follow_step requires an assigned side")
    d_side = side_min(scan, rel_angles, state.side, params, max_range)
    # A corner is a sudden increase of the tracked side distance, so the
    # trigger arms only while the side is held at close range. Until the side
    # is (re)acquired — right after a corner turn, for instance — the robot
    # drives straight instead of chasing the huge distance error.
    corner = False
    if d_side <= params.gamma + params.corner_jump:
        state.corner_armed = True
    elif state.corner_armed:
        state.corner_armed = False
        state.e_prev = None
        return params.v_follow, 0.0, True
    else:
        state.e_prev = None
        v = params.v_follow
        if forward_min(scan, rel_angles, params, max_range) < params.safety_stop:
            v = 0.0
        return v, 0.0, False

    e = params.gamma - d_side
    de = 0.0 if state.e_prev is None else (e - state.e_prev) / params.dt
    state.e_prev = e
    sign = -1.0 if state.side == LEFT else 1.0
    omega = sign * (params.kp * e + params.kd * de)
    omega = max(-params.omega_max, min(params.omega_max, omega))
    v = params.v_follow
    if forward_min(scan, rel_angles, params, max_range) < params.safety_stop:
        v = 0.0
    return v, omega, corner


def check_termination(state: EncircleState, params: EncircleParams) -> bool:
    return state.turns_without_new >= params.quit_after_turns


def run_encirclement(
    world: WorldSpec,
    robot: RobotState,
    tri: TrinaryMap,
    centroid,
    params: EncircleParams,
    nav_params: NavParams,
    observe_cb,
    register_cb,
    clock,
    rng: np.random.Generator | None = None,
    log=None,
) -> tuple[RobotState, EncircleState, EncircleStats]:
    """Run the full encirclement of one region.

    observe_cb(robot) returns the perception observations at a stop;
    register_cb(observation) returns True when the observation registered a
    new cylinder. clock.t advances by params.dt per simulation tick.
    """
    if rng is None:
        rng = np.random.default_rng(world.lidar.seed)
    rel_angles = beam_angles(world.lidar)
    max_range = world.lidar.max_range
    state = EncircleState()
    stats = EncircleStats()
    deadline = clock.t + params.time_budget

    def emit(event: str, **kw) -> None:
        if log is not None:
            log(event, phase=state.phase, **kw)

    def tick(r_new: RobotState, r_old: RobotState) -> RobotState:
        clock.t += params.dt
        stats.heading_change += abs(wrap_angle(r_new.theta - r_old.theta))
        return r_new

    def scan_now(r: RobotState) -> np.ndarray:
        return raycast_lidar(world, r, rng)

    def rotate(r: RobotState, target: float) -> RobotState:
        while abs(wrap_angle(target - r.theta)) > 0.01:
            if clock.t > deadline:
                return r
            err = wrap_angle(target - r.theta)
            omega = max(-params.omega_max, min(params.omega_max, 3.0 * err))
            r = tick(step_robot(r, (0.0, omega), params.dt, world, nav_params.robot_radius), r)
        return RobotState(r.x, r.y, target)

    # Phase 1: approach the region centroid until the pile is close ahead.
    emit("phase", to=APPROACH)
    path = plan_path(tri, (robot.x, robot.y), centroid, nav_params.inflate_radius,
                     allow_unknown=False, goal_relax=4.0)
    if path is None:
        raise RegionUnreachable(f"no path toward region at {centroid}")

    def near_pile(r: RobotState) -> bool:
        return forward_min(scan_now(r), rel_angles, params, max_range) < params.beta

    def approach_tick(r: RobotState) -> None:
        clock.t += params.dt

    try:
        robot = follow_path(world, robot, path, nav_params, on_tick=approach_tick,
                            stop_when=near_pile)
    except StuckError as exc:
        raise RegionUnreachable(str(exc)) from exc
    if not near_pile(robot):
        # Arrived without the trigger: face the centroid, then give up if the
        # pile still is not ahead.
        robot = rotate(robot, math.atan2(centroid[1] - robot.y, centroid[0] - robot.x))
        if not near_pile(robot):
            raise RegionUnreachable("approach finished with no obstacle within beta")

    # Phase 2: pick a side, close in on the object, then swing it abeam so
    # the follow controller starts with a solid lock at roughly gamma.
    state.phase = ASSIGN_SIDE
    emit("phase", to=ASSIGN_SIDE)
    scan = scan_now(robot)
    side = assign_side(scan, rel_angles, max_range)
    if side is None:
        raise RegionUnreachable("object lost during side assignment")
    state.assign(side)
    emit("side_assigned", side=side)
    sign = 1.0 if side == LEFT else -1.0

    ahead = np.abs(wrap_angles(rel_angles)) <= math.radians(75.0)
    masked = np.where(ahead, scan, np.inf)
    robot = rotate(robot, robot.theta + float(rel_angles[int(np.argmin(masked))]))
    while clock.t <= deadline:
        d = forward_min(scan_now(robot), rel_angles, params, max_range)
        if d <= params.gamma or d < params.safety_stop:
            break
        robot = tick(step_robot(robot, (params.v_follow, 0.0), params.dt, world,
                                nav_params.robot_radius), robot)
    robot = rotate(robot, robot.theta - sign * 0.5 * math.pi)

    state.phase = FOLLOW
    emit("phase", to=FOLLOW)
    state.e_prev = None
    follow_timer = 0.0
    blocked_time = 0.0

    while clock.t <= deadline:
        scan = scan_now(robot)
        v, omega, corner = follow_step(scan, rel_angles, params, state, max_range)

        if corner:
            state.phase = CORNER_TURN
            emit("corner_turn", laps=state.laps_completed)
            robot, ok = _corner_turn(world, robot, params, nav_params, sign, tick, scan_now,
                                     rel_angles, max_range)
            stats.corner_turns += 1
            state.laps_completed += 0.25
            if not ok:
                stats.aborted = True
                emit("aborted", reason="corner collision")
                break
            state.phase = FOLLOW
            state.e_prev = None
            continue

        if follow_timer >= params.inspect_period:
            follow_timer = 0.0
            state.phase = INSPECT
            stats.inspect_stops += 1
            heading_before = robot.theta
            robot = rotate(robot, robot.theta + sign * 0.5 * math.pi)
            observations = observe_cb(robot)
            stats.observations += len(observations)
            new = 0
            for obs in observations:
                if register_cb(obs):
                    new += 1
            stats.registrations += new
            if new > 0:
                state.turns_without_new = 0
            else:
                state.turns_without_new += 1
            emit("inspect_stop", observations=len(observations), new=new,
                 turns_without_new=state.turns_without_new)
            if check_termination(state, params):
                state.phase = DONE
                emit("phase", to=DONE)
                return robot, state, stats
            robot = rotate(robot, heading_before)
            state.phase = FOLLOW
            state.e_prev = None
            continue

        moved = step_robot(robot, (v, omega), params.dt, world, nav_params.robot_radius)
        if math.hypot(moved.x - robot.x, moved.y - robot.y) < 0.2 * params.v_follow * params.dt:
            blocked_time += params.dt
            if blocked_time > 1.5:
                # Contact or safety deadlock: peel away from the pile briefly.
                robot = rotate(moved, moved.theta - sign * math.radians(30.0))
                blocked_time = 0.0
                state.e_prev = None
                continue
        else:
            blocked_time = 0.0
        robot = tick(moved, robot)
        follow_timer += params.dt

    if state.phase != DONE:
        stats.aborted = True
        emit("aborted", reason="time budget exhausted")
    return robot, state, stats


def _corner_turn(world, robot, params, nav_params, sign, tick, scan_now, rel_angles,
                 max_range) -> tuple[RobotState, bool]:
    """Phase 4: drive a fixed clearance past the corner, then turn 90 degrees
    toward the pile. An obstacle ahead just starts the turn early; actual
    contact backs off and retries once, then aborts the region."""
    for attempt in range(2):
        advanced = 0.0
        contact = False
        while advanced < params.corner_advance:
            if forward_min(scan_now(robot), rel_angles, params, max_range) < params.safety_stop:
                break  # wall ahead: turn from here
            moved = step_robot(robot, (params.v_follow, 0.0), params.dt, world,
                               nav_params.robot_radius)
            step = math.hypot(moved.x - robot.x, moved.y - robot.y)
            robot = tick(moved, robot)
            advanced += step
            if step < 0.2 * params.v_follow * params.dt:
                contact = True
                break
        if not contact:
            break
        if attempt == 0:
            # Back off and retry once.
            for _ in range(int(0.2 / (params.v_follow * params.dt))):
                robot = tick(step_robot(robot, (-params.v_follow, 0.0), params.dt, world,
                                        nav_params.robot_radius), robot)
        else:
            return robot, False

    target = wrap_angle(robot.theta + sign * 0.5 * math.pi)
    while abs(wrap_angle(target - robot.theta)) > 0.01:
        err = wrap_angle(target - robot.theta)
        omega = max(-params.omega_max, min(params.omega_max, 3.0 * err))
        robot = tick(step_robot(robot, (0.0, omega), params.dt, world,
                                nav_params.robot_radius), robot)
    return RobotState(robot.x, robot.y, target), True
