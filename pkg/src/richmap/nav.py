"""Grid path planning and the frontier-driven exploration loop."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import occupancy
from .geometry import wrap_angle
from .occupancy import FREE, OCCUPIED, UNKNOWN, OccupancyGrid, TrinaryMap, classify, find_frontiers, integrate_scan
from .world import RobotState, WorldSpec, beam_angles, raycast_lidar, step_robot

SQRT2 = math.sqrt(2.0)


class StuckError(Exception):
    """Path following made no progress; the caller should replan."""


@dataclass
class NavParams:
    robot_radius: float = 0.3
    inflate_margin: float = 0.1
    v_max: float = 0.5
    omega_max: float = 1.8
    lookahead: float = 0.4
    goal_tolerance: float = 0.15
    stuck_time: float = 4.0
    dt: float = 0.05

    @property
    def inflate_radius(self) -> float:
        return self.robot_radius + self.inflate_margin


@dataclass
class Path:
    waypoints: list  # (x, y) meters
    cost: float  # meters, measured on the grid path before smoothing


def _disc_structure(radius_cells: float) -> np.ndarray:
    r = int(math.ceil(radius_cells))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx ** 2 + yy ** 2) <= radius_cells ** 2 + 1e-9


def traversable_mask(tri: TrinaryMap, inflate_radius: float, allow_unknown: bool = False) -> np.ndarray:
    """Cells the robot center may occupy: free (or unknown in exploration
    mode) and farther than inflate_radius from any occupied cell."""
    occ = tri.cells == OCCUPIED
    if inflate_radius > 0:
        blocked = ndimage.binary_dilation(occ, structure=_disc_structure(inflate_radius / tri.resolution))
    else:
        blocked = occ
    ok = tri.cells == FREE
    if allow_unknown:
        ok = ok | (tri.cells == UNKNOWN)
    return ok & ~blocked


def _free_start(mask: np.ndarray, tri: TrinaryMap, start_cell: tuple[int, int],
                clear_radius: float) -> np.ndarray:
    """Allow departure when the start sits inside the inflation band only."""
    ix, iy = start_cell
    if mask[iy, ix]:
        return mask
    if tri.cells[iy, ix] == OCCUPIED:
        return mask
    mask = mask.copy()
    r = int(math.ceil(clear_radius / tri.resolution))
    disc = _disc_structure(clear_radius / tri.resolution)
    x0, x1 = max(0, ix - r), min(tri.width, ix + r + 1)
    y0, y1 = max(0, iy - r), min(tri.height, iy + r + 1)
    sub = disc[r - (iy - y0):r + (y1 - iy), r - (ix - x0):r + (x1 - ix)]
    region = mask[y0:y1, x0:x1]
    region |= sub & (tri.cells[y0:y1, x0:x1] != OCCUPIED)
    return mask


def _neighbors(mask: np.ndarray, ix: int, iy: int):
    h, w = mask.shape
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nx, ny = ix + dx, iy + dy
        if 0 <= nx < w and 0 <= ny < h and mask[ny, nx]:
            yield nx, ny, 1.0
    for dx, dy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        nx, ny = ix + dx, iy + dy
        if not (0 <= nx < w and 0 <= ny < h and mask[ny, nx]):
            continue
        # No corner cutting: both orthogonal steps must also be clear.
        if mask[iy, ix + dx] and mask[iy + dy, ix]:
            yield nx, ny, SQRT2


def _octile(ax: int, ay: int, bx: int, by: int) -> float:
    dx, dy = abs(ax - bx), abs(ay - by)
    return max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)


def _nearest_traversable(mask: np.ndarray, cell: tuple[int, int], max_radius_cells: int):
    """BFS outward from cell for the closest traversable cell."""
    from collections import deque

    h, w = mask.shape
    ix, iy = cell
    seen = {cell}
    queue = deque([(ix, iy, 0)])
    while queue:
        x, y, d = queue.popleft()
        if 0 <= x < w and 0 <= y < h and mask[y, x]:
            return (x, y)
        if d >= max_radius_cells:
            continue
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nxt = (x + dx, y + dy)
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append((x + dx, y + dy, d + 1))
    return None


def plan_path(
    tri: TrinaryMap,
    start,
    goal,
    inflate_radius: float = 0.4,
    allow_unknown: bool = False,
    goal_relax: float = 0.0,
    smooth: bool = True,
) -> Path | None:
    """A* over the inflated grid; returns None when the goal is unreachable.

    goal_relax > 0 retargets a blocked goal to the nearest traversable cell
    within that distance (used when the goal is a region centroid inside an
    obstacle). Starts inside the inflation band are allowed to leave it.
    """
    start_cell = tri.world_to_cell(start[0], start[1])
    goal_cell = tri.world_to_cell(goal[0], goal[1])
    if not (tri.in_bounds(*start_cell) and tri.in_bounds(*goal_cell)):
        return None
    mask = traversable_mask(tri, inflate_radius, allow_unknown)
    mask = _free_start(mask, tri, start_cell, inflate_radius + tri.resolution)
    if not mask[start_cell[1], start_cell[0]]:
        return None

    cells = None
    total = 0.0
    if mask[goal_cell[1], goal_cell[0]]:
        found = _astar(mask, start_cell, goal_cell)
        if found is not None:
            cells, total = found
    if cells is None:
        if goal_relax <= 0:
            return None
        # Blocked or disconnected goal: retarget to the nearest cell that is
        # actually reachable from the start.
        cost, parent = dijkstra_field(mask, start_cell)
        radius = goal_relax / tri.resolution
        ys, xs = np.nonzero(np.isfinite(cost))
        if len(xs) == 0:
            return None
        d2 = (xs - goal_cell[0]) ** 2 + (ys - goal_cell[1]) ** 2
        best = int(np.argmin(d2))
        if d2[best] > radius ** 2:
            return None
        goal_cell = (int(xs[best]), int(ys[best]))
        cells = _backtrack(parent, start_cell, goal_cell)
        if not cells:
            return None
        total = float(cost[goal_cell[1], goal_cell[0]])

    waypoints = [tuple(tri.cell_center(ix, iy)) for ix, iy in cells]
    cost_m = total * tri.resolution
    if smooth and len(cells) > 2:
        waypoints = _smooth(waypoints, mask, tri)
    return Path(waypoints, cost_m)


def _astar(mask: np.ndarray, start_cell: tuple[int, int], goal_cell: tuple[int, int]):
    g = {start_cell: 0.0}
    came: dict[tuple[int, int], tuple[int, int]] = {}
    open_heap = [(_octile(*start_cell, *goal_cell), start_cell)]
    closed: set[tuple[int, int]] = set()
    while open_heap:
        _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal_cell:
            break
        closed.add(cur)
        for nx, ny, step in _neighbors(mask, cur[0], cur[1]):
            cand = g[cur] + step
            if cand < g.get((nx, ny), math.inf):
                g[(nx, ny)] = cand
                came[(nx, ny)] = cur
                heapq.heappush(open_heap, (cand + _octile(nx, ny, *goal_cell), (nx, ny)))
    if goal_cell not in g:
        return None
    cells = [goal_cell]
    while cells[-1] != start_cell:
        cells.append(came[cells[-1]])
    cells.reverse()
    return cells, g[goal_cell]


def _line_clear(a, b, mask: np.ndarray, tri: TrinaryMap) -> bool:
    dist = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(2, int(dist / (tri.resolution / 3.0)))
    for t in np.linspace(0.0, 1.0, n):
        x = a[0] + t * (b[0] - a[0])
        y = a[1] + t * (b[1] - a[1])
        ix, iy = tri.world_to_cell(x, y)
        if not (tri.in_bounds(ix, iy) and mask[iy, ix]):
            return False
    return True


def _smooth(waypoints, mask, tri) -> list:
    out = [waypoints[0]]
    i = 0
    while i < len(waypoints) - 1:
        j = len(waypoints) - 1
        while j > i + 1 and not _line_clear(waypoints[i], waypoints[j], mask, tri):
            j -= 1
        out.append(waypoints[j])
        i = j
    return out


def dijkstra_field(mask: np.ndarray, start_cell: tuple[int, int]):
    """Cost-to-reach (in cells) and parents for every traversable cell."""
    h, w = mask.shape
    cost = np.full((h, w), np.inf)
    parent = np.full((h, w, 2), -1, dtype=np.int32)
    if not mask[start_cell[1], start_cell[0]]:
        return cost, parent
    cost[start_cell[1], start_cell[0]] = 0.0
    heap = [(0.0, start_cell)]
    while heap:
        d, (ix, iy) = heapq.heappop(heap)
        if d > cost[iy, ix] + 1e-12:
            continue
        for nx, ny, step in _neighbors(mask, ix, iy):
            nd = d + step
            if nd < cost[ny, nx] - 1e-12:
                cost[ny, nx] = nd
                parent[ny, nx] = (ix, iy)
                heapq.heappush(heap, (nd, (nx, ny)))
    return cost, parent


def _backtrack(parent: np.ndarray, start_cell, goal_cell) -> list:
    cells = [goal_cell]
    while cells[-1] != start_cell:
        px, py = parent[cells[-1][1], cells[-1][0]]
        if px < 0:
            return []
        cells.append((int(px), int(py)))
    cells.reverse()
    return cells


def rotate_to(world: WorldSpec, robot: RobotState, target_heading: float,
              params: NavParams, on_tick=None) -> RobotState:
    """Rotate in place to the target heading (snaps exactly when close)."""
    for _ in range(int(2.0 * math.pi / (params.omega_max * params.dt)) + 20):
        err = wrap_angle(target_heading - robot.theta)
        if abs(err) < 0.01:
            break
        omega = max(-params.omega_max, min(params.omega_max, 3.0 * err))
        robot = step_robot(robot, (0.0, omega), params.dt, world, params.robot_radius)
        if on_tick is not None:
            on_tick(robot)
    return RobotState(robot.x, robot.y, target_heading)


def follow_path(world: WorldSpec, robot: RobotState, path: Path,
                params: NavParams, on_tick=None, stop_when=None) -> RobotState:
    """Pure-pursuit waypoint tracking with bounded commands.

    on_tick(robot) runs every simulation step; stop_when(robot) may end the
    pursuit early (used for the encirclement approach trigger). Raises
    StuckError when the distance to the goal stops improving for stuck_time
    seconds of simulated time.
    """
    if not path.waypoints:
        raise ValueError("empty path")
    goal = path.waypoints[-1]
    if math.hypot(goal[0] - robot.x, goal[1] - robot.y) <= params.goal_tolerance:
        return robot

    idx = 0
    best = math.inf
    since_progress = 0.0
    budget = (path.cost / max(params.v_max, 1e-6)) * 5.0 + 30.0
    ticks = int(budget / params.dt)
    for _ in range(ticks):
        dist_goal = math.hypot(goal[0] - robot.x, goal[1] - robot.y)
        if dist_goal <= params.goal_tolerance:
            return robot
        if stop_when is not None and stop_when(robot):
            return robot
        if dist_goal < best - 0.01:
            best = dist_goal
            since_progress = 0.0
        else:
            since_progress += params.dt
            if since_progress > params.stuck_time:
                raise StuckError("no progress toward waypoint goal")
        # Advance the carrot to the first waypoint beyond the lookahead.
        while idx < len(path.waypoints) - 1 and math.hypot(
                path.waypoints[idx][0] - robot.x, path.waypoints[idx][1] - robot.y) < params.lookahead:
            idx += 1
        tx, ty = path.waypoints[idx]
        err = wrap_angle(math.atan2(ty - robot.y, tx - robot.x) - robot.theta)
        omega = max(-params.omega_max, min(params.omega_max, 2.5 * err))
        if abs(err) > 0.5 * math.pi:
            v = 0.0
        else:
            v = params.v_max * max(0.0, math.cos(err))
            v = min(v, 0.4 + 1.5 * dist_goal)
        robot = step_robot(robot, (v, omega), params.dt, world, params.robot_radius)
        if on_tick is not None:
            on_tick(robot)
    raise StuckError("path following timed out")


@dataclass
class ExploreParams:
    min_frontier_size: int = 5
    integrate_every: int = 4  # ticks between scan integrations while moving
    max_iterations: int = 400
    tick_budget: int = 400_000
    l_occ: float = occupancy.L_OCC_DEFAULT
    l_free: float = occupancy.L_FREE_DEFAULT
    t_occ: float = occupancy.T_OCC_DEFAULT
    t_free: float = occupancy.T_FREE_DEFAULT
    odom_noise_sigma: float = 0.0  # perturbs the pose used for mapping only


@dataclass
class ExploreResult:
    tri: TrinaryMap
    robot: RobotState
    complete: bool
    scans: int = 0
    iterations: int = 0
    ticks: int = 0


def explore(world: WorldSpec, grid: OccupancyGrid, robot: RobotState,
            params: ExploreParams | None = None, nav: NavParams | None = None,
            rng: np.random.Generator | None = None, log=None) -> ExploreResult:
    """Frontier-based exploration until the map has no sizable frontier left.

    Each iteration classifies the grid, picks the cheapest reachable frontier
    by path cost (ties to the larger frontier), and drives there while folding
    scans into the grid. Unreachable frontiers are blacklisted. Returns the
    final classified map, flagged incomplete when the tick budget ran out.
    """
    params = params or ExploreParams()
    nav = nav or NavParams()
    if rng is None:
        rng = np.random.default_rng(world.lidar.seed)
    rel_angles = beam_angles(world.lidar)
    state = {"ticks": 0, "scans": 0, "tick_in_cycle": 0}
    blacklist: set[tuple[int, int]] = set()

    def mapping_pose(r: RobotState) -> RobotState:
        if params.odom_noise_sigma <= 0:
            return r
        dx, dy = rng.normal(0.0, params.odom_noise_sigma, 2)
        return RobotState(r.x + dx, r.y + dy, r.theta)

    def take_scan(r: RobotState) -> None:
        scan = raycast_lidar(world, r, rng)
        pose = mapping_pose(r)
        integrate_scan(grid, pose, scan, pose.theta + rel_angles, world.lidar.max_range,
                       params.l_occ, params.l_free)
        state["scans"] += 1

    def on_tick(r: RobotState) -> None:
        state["ticks"] += 1
        state["tick_in_cycle"] += 1
        if state["tick_in_cycle"] >= params.integrate_every:
            state["tick_in_cycle"] = 0
            take_scan(r)

    take_scan(robot)
    complete = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        if state["ticks"] >= params.tick_budget:
            break
        tri = classify(grid, params.t_occ, params.t_free)
        frontiers = [f for f in find_frontiers(tri, params.min_frontier_size)
                     if tri.world_to_cell(*f.centroid) not in blacklist]
        if not frontiers:
            complete = True
            break

        mask = traversable_mask(tri, nav.inflate_radius, allow_unknown=True)
        start_cell = tri.world_to_cell(robot.x, robot.y)
        mask = _free_start(mask, tri, start_cell, nav.inflate_radius + tri.resolution)
        cost, parent = dijkstra_field(mask, start_cell)

        # Frontier cells often sit inside the inflation band of the obstacle
        # that bounds them, so the navigation goal is the nearest reachable
        # cell: line of sight from there clears the frontier.
        reach_cells = int(math.ceil(0.9 / tri.resolution))
        best_choice = None  # (cost, -size, goal_cell, frontier)
        for f in frontiers:
            centroid_cell = np.array(tri.world_to_cell(*f.centroid))
            order = np.argsort(np.abs(f.cells - centroid_cell).max(axis=1))
            goal_cell = None
            goal_cost = math.inf
            for k in order[:16]:
                cx, cy = int(f.cells[k][0]), int(f.cells[k][1])
                if np.isfinite(cost[cy, cx]) and cost[cy, cx] < goal_cost:
                    goal_cost = cost[cy, cx]
                    goal_cell = (cx, cy)
            if goal_cell is None:
                near = _nearest_traversable(mask, tuple(int(v) for v in centroid_cell), reach_cells)
                if near is not None and np.isfinite(cost[near[1], near[0]]):
                    goal_cell = near
                    goal_cost = float(cost[near[1], near[0]])
            if goal_cell is None:
                blacklist.add(tri.world_to_cell(*f.centroid))
                continue
            choice = (goal_cost, -f.size, goal_cell, f)
            if best_choice is None or choice[:2] < best_choice[:2]:
                best_choice = choice
        if best_choice is None:
            continue

        goal_cost, _, goal_cell, frontier = best_choice
        cells = _backtrack(parent, start_cell, goal_cell)
        if not cells:
            blacklist.add(tri.world_to_cell(*frontier.centroid))
            continue
        waypoints = _smooth([tuple(tri.cell_center(ix, iy)) for ix, iy in cells], mask, tri)
        path = Path(waypoints, goal_cost * tri.resolution)
        if log is not None:
            log("explore_goal", target=list(map(float, frontier.centroid)),
                cost=float(path.cost), frontier_size=frontier.size)
        try:
            robot = follow_path(world, robot, path, nav, on_tick=on_tick)
        except StuckError:
            pass
        # One pursuit per frontier: if the visit cleared it the blacklist
        # entry is moot, and persistent unclearable slivers cannot livelock.
        blacklist.add(tri.world_to_cell(*frontier.centroid))
        take_scan(robot)

    return ExploreResult(classify(grid, params.t_occ, params.t_free), robot,
                         complete, state["scans"], iterations, state["ticks"])
