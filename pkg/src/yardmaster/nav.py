"""Crawler-dump navigation stack: geodetic conversion, EKF localization,
grid path planning, dynamic-window velocity selection, and the subtask
servers that drive the machine through the command/telemetry boundary.

The global planner builds a Dijkstra potential from the goal over an
8-connected costmap and extracts the path by steepest descent. Costs are
kept in integer micro-resolution units (straight 10^6, diagonal 1414214) so
optimality comparisons against any other exact Dijkstra are integer-exact.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .comms import (
    ActionState,
    GnssTelemetry,
    OdomTelemetry,
    SubtaskServer,
    VelocityCmd,
    VesselCmd,
    action_transition,
)
from .geometry import ang_diff, quat_to_yaw, wrap_angle

EARTH_RADIUS = 6378137.0
STRAIGHT_COST = 1_000_000
DIAG_COST = 1_414_214  # round(sqrt(2) * 1e6)
LETHAL = 254


class NavError(Exception):
    pass


class OutOfValidity(NavError):
    pass


class NoPath(NavError):
    pass


class StartOccupied(NavError):
    pass


class GoalOccupied(NavError):
    pass


class NoAdmissibleCommand(NavError):
    pass


# --- geodetic <-> site plane --------------------------------------------------

@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if abs(self.lat) > 90.0 or abs(self.lon) > 180.0:
            raise ValueError(f"bad geodetic point {self.lat}, {self.lon}")


def geo_to_plane(p: GeoPoint, origin: GeoPoint) -> tuple[float, float, float]:
    """Local tangent-plane east/north/up around the site origin."""
    dlat = p.lat - origin.lat
    dlon = p.lon - origin.lon
    if abs(dlat) >= 0.1 or abs(dlon) >= 0.1:
        raise OutOfValidity(f"offset ({dlat}, {dlon}) deg too large for the "
                            "tangent-plane approximation")
    x = math.radians(dlon) * EARTH_RADIUS * math.cos(math.radians(origin.lat))
    y = math.radians(dlat) * EARTH_RADIUS
    return (x, y, p.alt - origin.alt)


def plane_to_geo(x: float, y: float, z: float, origin: GeoPoint) -> GeoPoint:
    lat = origin.lat + math.degrees(y / EARTH_RADIUS)
    lon = origin.lon + math.degrees(
        x / (EARTH_RADIUS * math.cos(math.radians(origin.lat))))
    return GeoPoint(lat, lon, origin.alt + z)


# --- EKF -----------------------------------------------------------------------

@dataclass
class EkfState:
    mean: np.ndarray  # (x, y, yaw)
    cov: np.ndarray   # 3x3

    @classmethod
    def at(cls, x: float, y: float, yaw: float, var: float = 1e-6) -> "EkfState":
        return cls(np.array([x, y, yaw], dtype=float), np.eye(3) * var)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def ekf_predict(s: EkfState, v: float, w: float, dt: float,
                q_xy: float, q_yaw: float) -> EkfState:
    """Unicycle prediction with the standard motion Jacobian."""
    x, y, yaw = s.mean
    mean = np.array([x + v * math.cos(yaw) * dt,
                     y + v * math.sin(yaw) * dt,
                     wrap_angle(yaw + w * dt)])
    F = np.array([[1.0, 0.0, -v * math.sin(yaw) * dt],
                  [0.0, 1.0, v * math.cos(yaw) * dt],
                  [0.0, 0.0, 1.0]])
    Q = np.diag([q_xy, q_xy, q_yaw])
    cov = _symmetrize(F @ s.cov @ F.T + Q)
    return EkfState(mean, cov)


def ekf_update_gnss(s: EkfState, zx: float, zy: float, meas_var: float,
                    gate: float = 9.21) -> tuple[EkfState, bool]:
    """Position update with Mahalanobis gating; rejected fixes leave s as-is."""
    H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    R = np.eye(2) * meas_var
    innov = np.array([zx, zy]) - s.mean[:2]
    S = H @ s.cov @ H.T + R
    m2 = float(innov @ np.linalg.solve(S, innov))
    if m2 > gate:
        return s, False
    K = s.cov @ H.T @ np.linalg.inv(S)
    mean = s.mean + K @ innov
    mean[2] = wrap_angle(mean[2])
    IKH = np.eye(3) - K @ H
    cov = _symmetrize(IKH @ s.cov @ IKH.T + K @ R @ K.T)  # Joseph form
    return EkfState(mean, cov), True


class NavPipeline:
    """Onboard localization: odometry predicts, GNSS fixes correct."""

    def __init__(self, cfg, start_pose, geo_origin: GeoPoint):
        self.cfg = cfg
        self.geo_origin = geo_origin
        self.state = EkfState.at(*start_pose)
        self.velocity = (0.0, 0.0)  # latest measured (v, w)
        self.rejected_fixes = 0

    def consume(self, telemetry: list, dt: float) -> None:
        for msg in telemetry:
            if isinstance(msg, OdomTelemetry):
                self.velocity = (msg.v, msg.w)
                # odometry at the noise floor means a parked machine:
                # injecting full process noise would let unobservable yaw
                # random-walk through the position cross-covariances
                moving = (abs(msg.v) > 4.0 * self.cfg.odom_sigma_v or
                          abs(msg.w) > 4.0 * self.cfg.odom_sigma_w)
                scale = 1.0 if moving else 1e-4
                self.state = ekf_predict(self.state, msg.v, msg.w, dt,
                                         self.cfg.ekf_q_xy * scale,
                                         self.cfg.ekf_q_yaw * scale)
            elif isinstance(msg, GnssTelemetry):
                x, y, _ = geo_to_plane(GeoPoint(msg.lat, msg.lon,
                                                self.geo_origin.alt),
                                       self.geo_origin)
                self.state, ok = ekf_update_gnss(self.state, x, y,
                                                 self.cfg.ekf_gnss_var,
                                                 self.cfg.ekf_gate)
                if not ok:
                    self.rejected_fixes += 1

    @property
    def pose(self) -> tuple[float, float, float]:
        return tuple(self.state.mean)


# --- costmap and global planner -------------------------------------------------

@dataclass
class CostGrid:
    costs: np.ndarray       # uint8, [rows=y, cols=x]
    resolution: float
    origin: tuple           # (x0, y0) of cell (0, 0) corner
    clearance: np.ndarray = field(default=None, repr=False)  # metres to lethal

    @classmethod
    def from_arrays(cls, costs, resolution, origin) -> "CostGrid":
        grid = cls(np.asarray(costs, dtype=np.uint8), resolution, tuple(origin))
        grid._build_clearance()
        return grid

    @classmethod
    def from_terrain(cls, terrain, lethal_height: float,
                     inflate_radius: float) -> "CostGrid":
        lethal = terrain.heights > lethal_height
        if inflate_radius > 0:
            cells = int(math.ceil(inflate_radius / terrain.resolution))
            y, x = np.ogrid[-cells:cells + 1, -cells:cells + 1]
            disk = (x * x + y * y) * terrain.resolution ** 2 <= inflate_radius ** 2
            lethal = ndimage.binary_dilation(lethal, structure=disk)
        costs = np.where(lethal, LETHAL, 0).astype(np.uint8)
        return cls.from_arrays(costs, terrain.resolution, terrain.origin)

    def _build_clearance(self) -> None:
        free = self.costs < LETHAL
        if free.all():
            self.clearance = np.full(self.costs.shape, 1e6)
        else:
            self.clearance = ndimage.distance_transform_edt(
                free, sampling=self.resolution)

    @property
    def shape(self):
        return self.costs.shape

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        col = int(math.floor((x - self.origin[0]) / self.resolution))
        row = int(math.floor((y - self.origin[1]) / self.resolution))
        return row, col

    def cell_to_world(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + (col + 0.5) * self.resolution,
                self.origin[1] + (row + 0.5) * self.resolution)

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.costs.shape[0] and 0 <= col < self.costs.shape[1]

    def is_free(self, row: int, col: int) -> bool:
        return self.in_bounds(row, col) and self.costs[row, col] < LETHAL


_MOVES = [(-1, -1, DIAG_COST), (-1, 0, STRAIGHT_COST), (-1, 1, DIAG_COST),
          (0, -1, STRAIGHT_COST), (0, 1, STRAIGHT_COST),
          (1, -1, DIAG_COST), (1, 0, STRAIGHT_COST), (1, 1, DIAG_COST)]


def dijkstra_potential(grid: CostGrid, goal_cell) -> np.ndarray:
    """Integer distance-to-goal over free cells; unreachable stays at -1."""
    rows, cols = grid.shape
    pot = np.full((rows, cols), -1, dtype=np.int64)
    gr, gc = goal_cell
    pot[gr, gc] = 0
    heap = [(0, gr, gc)]
    while heap:
        d, r, c = heapq.heappop(heap)
        if d > pot[r, c]:
            continue
        for dr, dc, step in _MOVES:
            nr, nc = r + dr, c + dc
            if not grid.is_free(nr, nc):
                continue
            nd = d + step
            if pot[nr, nc] < 0 or nd < pot[nr, nc]:
                pot[nr, nc] = nd
                heapq.heappush(heap, (nd, nr, nc))
    return pot


def plan_global(grid: CostGrid, start_xy, goal_xy):
    """Path from start to goal as world points, plus its cost in metres.

    The returned path follows non-increasing potential and touches no lethal
    cell; its integer cost equals the exact Dijkstra distance.
    """
    start = grid.world_to_cell(*start_xy)
    goal = grid.world_to_cell(*goal_xy)
    if not grid.is_free(*start):
        raise StartOccupied(f"start cell {start} blocked")
    if not grid.is_free(*goal):
        raise GoalOccupied(f"goal cell {goal} blocked")
    pot = dijkstra_potential(grid, goal)
    if pot[start] < 0:
        raise NoPath(f"goal {goal} unreachable from {start}")

    cells = [start]
    r, c = start
    while (r, c) != goal:
        best = None
        for dr, dc, step in _MOVES:
            nr, nc = r + dr, c + dc
            if not grid.in_bounds(nr, nc) or pot[nr, nc] < 0:
                continue
            cand = pot[nr, nc] + step
            if best is None or cand < best[0]:
                best = (cand, nr, nc)
        # Dijkstra property: the best neighbour continues an optimal path
        r, c = best[1], best[2]
        cells.append((r, c))
    path = [grid.cell_to_world(r, c) for r, c in cells]
    cost_int = int(pot[start])
    return path, cost_int * grid.resolution / 1e6, cost_int


def brute_force_dijkstra_cost(grid: CostGrid, start_xy, goal_xy) -> int:
    """Independent forward Dijkstra, integer cost units (test oracle)."""
    start = grid.world_to_cell(*start_xy)
    goal = grid.world_to_cell(*goal_xy)
    dist = {start: 0}
    heap = [(0, start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == goal:
            return d
        if d > dist[cell]:
            continue
        r, c = cell
        for dr, dc, step in _MOVES:
            nxt = (r + dr, c + dc)
            if not grid.is_free(*nxt):
                continue
            nd = d + step
            if nxt not in dist or nd < dist[nxt]:
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return -1


# --- dynamic-window local planner ----------------------------------------------

def rollout_poses(pose, v, w, horizon: float, dt: float) -> np.ndarray:
    """Forward-simulated (x, y, yaw) samples, excluding the start pose."""
    steps = int(round(horizon / dt))
    x, y, yaw = pose
    out = np.empty((steps, 3))
    for i in range(steps):
        x += v * math.cos(yaw) * dt
        y += v * math.sin(yaw) * dt
        yaw = wrap_angle(yaw + w * dt)
        out[i] = (x, y, yaw)
    return out


def plan_local(pose, vel, path, grid: CostGrid, cfg, direction: int = 0,
               goal_xy=None, v_limit: Optional[float] = None):
    """Sample the accel-bounded velocity window and score 1.5 s rollouts.

    Scoring blends distance to the global path, distance to the goal pose
    (position plus heading alignment toward it), obstacle clearance and
    speed; the cheapest admissible pair wins. direction > 0 restricts to
    forward motion, < 0 to reverse.
    """
    if not path:
        raise NoPath("empty path")
    v0, w0 = vel
    dt = cfg.dt
    v_lo = max(-cfg.dump_v_max, v0 - cfg.dump_accel_v * dt)
    v_hi = min(cfg.dump_v_max, v0 + cfg.dump_accel_v * dt)
    if direction > 0:
        v_lo = max(v_lo, 0.0)
    elif direction < 0:
        v_hi = min(v_hi, 0.0)
    if v_limit is not None:
        # braking authority still bounds how fast the window can shrink
        reachable = abs(v0) - cfg.dump_accel_v * dt
        cap = max(v_limit, reachable)
        v_lo = max(v_lo, -cap)
        v_hi = min(v_hi, cap)
    w_lo = max(-cfg.dump_w_max, w0 - cfg.dump_accel_w * dt)
    w_hi = min(cfg.dump_w_max, w0 + cfg.dump_accel_w * dt)

    vs = np.linspace(v_lo, v_hi, cfg.local_plan_samples_v)
    ws = np.linspace(w_lo, w_hi, cfg.local_plan_samples_w)
    horizon = cfg.local_plan_horizon
    steps = int(round(horizon / dt))

    vv, ww = np.meshgrid(vs, ws, indexing="ij")
    vv = vv.ravel()
    ww = ww.ravel()
    n = vv.size
    x = np.full(n, pose[0])
    y = np.full(n, pose[1])
    yaw = np.full(n, pose[2])
    alive = np.ones(n, dtype=bool)
    min_clear = np.full(n, np.inf)
    for _ in range(steps):
        x = x + vv * np.cos(yaw) * dt
        y = y + vv * np.sin(yaw) * dt
        yaw = yaw + ww * dt
        cols = np.floor((x - grid.origin[0]) / grid.resolution).astype(int)
        rows = np.floor((y - grid.origin[1]) / grid.resolution).astype(int)
        inside = ((rows >= 0) & (rows < grid.shape[0]) &
                  (cols >= 0) & (cols < grid.shape[1]))
        alive &= inside
        rr = np.clip(rows, 0, grid.shape[0] - 1)
        cc = np.clip(cols, 0, grid.shape[1] - 1)
        alive &= grid.costs[rr, cc] < LETHAL
        min_clear = np.minimum(min_clear, np.where(alive,
                                                   grid.clearance[rr, cc], 0.0))
    if not alive.any():
        raise NoAdmissibleCommand("every sampled rollout collides")

    path_arr = np.asarray(path)
    end = np.stack([x, y], axis=1)
    d_path = np.sqrt(((end[:, None, :] - path_arr[None, :, :]) ** 2)
                     .sum(axis=2)).min(axis=1)
    gx, gy = goal_xy if goal_xy is not None else tuple(path_arr[-1])
    d_goal = np.hypot(x - gx, y - gy)
    # heading share of the goal critic: the motion direction (flipped when
    # reversing) should point at the goal, fading out on top of it
    motion_yaw = yaw + (math.pi if direction < 0 else 0.0)
    bearing = np.arctan2(gy - y, gx - x)
    head_err = np.abs(np.arctan2(np.sin(bearing - motion_yaw),
                                 np.cos(bearing - motion_yaw)))
    head_gain = np.minimum(1.0, d_goal / 0.5)
    w1, w2, w3, w4 = cfg.critic_weights
    score = (w1 * d_path + w2 * (d_goal + 2.0 * head_gain * head_err)
             + w3 / (min_clear + 0.1)
             + w4 * (cfg.dump_v_max - np.abs(vv)))
    score[~alive] = np.inf
    best = int(np.argmin(score))
    return float(vv[best]), float(ww[best])


# --- subtask servers -------------------------------------------------------------

@dataclass
class _Waypoint:
    x: float
    y: float
    yaw: Optional[float]


def _waypoints_from_payload(payload: dict, final_only_yaw: bool) -> list[_Waypoint]:
    """Accept either a waypoint list or a single pose record."""
    if "waypoints" in payload:
        raw = payload["waypoints"]
    else:
        raw = [payload]
    out = []
    for i, wp in enumerate(raw):
        yaw = None
        if "yaw" in wp:
            yaw = float(wp["yaw"])
        elif all(k in wp for k in ("qx", "qy", "qz", "qw")):
            yaw = quat_to_yaw(wp["qx"], wp["qy"], wp["qz"], wp["qw"])
        if final_only_yaw and i < len(raw) - 1:
            yaw = None
        out.append(_Waypoint(float(wp["x"]), float(wp["y"]), yaw))
    # a trailing pose record may carry the quaternion at the top level
    if "waypoints" in payload and out and out[-1].yaw is None and \
            all(k in payload for k in ("qx", "qy", "qz", "qw")):
        out[-1] = _Waypoint(out[-1].x, out[-1].y,
                            quat_to_yaw(payload["qx"], payload["qy"],
                                        payload["qz"], payload["qw"]))
    return out


class _DriveExec:
    """Per-goal waypoint follower.

    Each segment runs align -> drive -> (final yaw align). Alignment and
    steering both target a carrot point a couple of metres ahead on the
    planned path; the segment is driven in reverse when that carrot starts
    out behind the vehicle, which is how rear-first approaches happen.
    """

    ALIGN_EXIT = 0.15
    ALIGN_W_EXIT = 0.25
    REALIGN = 1.2
    LOOKAHEAD = 2.5  # metres of path ahead of the vehicle

    def __init__(self, waypoints, cfg):
        self.waypoints = waypoints
        self.cfg = cfg
        self.idx = 0
        self.phase = "align"
        self.direction = 1
        self.path = None
        self._off_path = 0.0

    def current(self) -> _Waypoint:
        return self.waypoints[self.idx]

    def remaining_distance(self, pose) -> float:
        pts = [(pose[0], pose[1])] + [(w.x, w.y) for w in self.waypoints[self.idx:]]
        return sum(math.hypot(b[0] - a[0], b[1] - a[1])
                   for a, b in zip(pts, pts[1:]))

    def _carrot(self, pose) -> tuple[float, float]:
        px = np.asarray(self.path)
        d = np.hypot(px[:, 0] - pose[0], px[:, 1] - pose[1])
        i = int(np.argmin(d))
        self._off_path = float(d[i])
        spacing = max(np.hypot(*(px[1] - px[0])), 1e-6) if len(px) > 1 else 1.0
        ahead = int(round(self.LOOKAHEAD / spacing))
        return tuple(px[min(i + ahead, len(px) - 1)])

    def _heading_error(self, pose, target_xy) -> float:
        bearing = math.atan2(target_xy[1] - pose[1], target_xy[0] - pose[0])
        desired = bearing if self.direction > 0 else wrap_angle(bearing + math.pi)
        return ang_diff(desired, pose[2])

    def step(self, pose, vel, grid) -> tuple[VelocityCmd, bool]:
        """Returns (command, finished)."""
        cfg = self.cfg
        wp = self.current()
        dist = math.hypot(wp.x - pose[0], wp.y - pose[1])

        if self.path is None and dist > cfg.arrive_pos_tol:
            self.path = self._plan(pose, wp, grid)
            carrot = self._carrot(pose)
            bearing = math.atan2(carrot[1] - pose[1], carrot[0] - pose[0])
            self.direction = 1 if abs(ang_diff(bearing, pose[2])) <= math.pi / 2 \
                else -1

        if self.phase == "align":
            if dist <= cfg.arrive_pos_tol:
                self.phase = "drive"
            else:
                err = self._heading_error(pose, self._carrot(pose))
                if abs(err) <= self.ALIGN_EXIT and abs(vel[1]) <= self.ALIGN_W_EXIT:
                    self.phase = "drive"
                else:
                    return VelocityCmd(0.0, _turn_rate(err, vel[1], cfg)), False

        if self.phase == "drive":
            if dist <= cfg.arrive_pos_tol:
                self.phase = "final_align" if wp.yaw is not None else "advance"
            else:
                carrot = self._carrot(pose)
                if self._off_path > 1.5:
                    self.path = self._plan(pose, wp, grid)
                    carrot = self._carrot(pose)
                err = self._heading_error(pose, carrot)
                if abs(err) > self.REALIGN and dist > 0.8:
                    self.phase = "align"
                    return VelocityCmd(0.0, _turn_rate(err, vel[1], cfg)), False
                v_limit = max(0.15, min(cfg.dump_v_max, 0.7 * dist))
                v, w = plan_local(pose, vel, self.path, grid, cfg,
                                  direction=self.direction,
                                  goal_xy=carrot, v_limit=v_limit)
                return VelocityCmd(v, w), False

        if self.phase == "final_align":
            err = ang_diff(wp.yaw, pose[2])
            if abs(err) > cfg.arrive_yaw_tol:
                return VelocityCmd(0.0, _turn_rate(err, vel[1], cfg)), False
            self.phase = "advance"

        # advance
        self.idx += 1
        if self.idx >= len(self.waypoints):
            return VelocityCmd(0.0, 0.0), True
        self.phase = "align"
        self.path = None
        return VelocityCmd(0.0, 0.0), False

    def _plan(self, pose, wp, grid):
        try:
            path, _, _ = plan_global(grid, (pose[0], pose[1]), (wp.x, wp.y))
        except StartOccupied:
            free = _nearest_free(grid, (pose[0], pose[1]))
            path, _, _ = plan_global(grid, free, (wp.x, wp.y))
        # the grid path ends on a cell centre; finish on the exact goal
        return path + [(wp.x, wp.y)]


def _turn_rate(err: float, w0: float, cfg) -> float:
    target = max(-cfg.dump_w_max, min(cfg.dump_w_max, 1.8 * err))
    lo = w0 - cfg.dump_accel_w * cfg.dt
    hi = w0 + cfg.dump_accel_w * cfg.dt
    return max(lo, min(hi, target))


def _nearest_free(grid: CostGrid, xy, radius: float = 2.0):
    r0, c0 = grid.world_to_cell(*xy)
    cells = int(math.ceil(radius / grid.resolution))
    best = None
    for dr in range(-cells, cells + 1):
        for dc in range(-cells, cells + 1):
            r, c = r0 + dr, c0 + dc
            if grid.is_free(r, c):
                d = dr * dr + dc * dc
                if best is None or d < best[0]:
                    best = (d, r, c)
    if best is None:
        raise StartOccupied(f"no free cell within {radius} m of {xy}")
    return grid.cell_to_world(best[1], best[2])


class _Ic120ServerBase(SubtaskServer):
    final_only_yaw = False

    def __init__(self, world):
        self.world = world
        self._execs: dict[int, _DriveExec] = {}
        self._published_paths: dict[int, object] = {}

    def active_path(self) -> Optional[list]:
        for exec_ in self._execs.values():
            if exec_.path is not None:
                return [[round(x, 3), round(y, 3)] for x, y in exec_.path]
        return None

    def _payload(self, goal, ctx):
        rec = ctx.store.query_parameter(goal.model_name, goal.record_name)
        return None if rec is None else rec.payload

    def tick(self, goal, ctx):
        if goal.state is ActionState.ACCEPTED:
            payload = self._payload(goal, ctx)
            if payload is None:
                goal.error = "parameter record absent"
                action_transition(goal, "start")
                action_transition(goal, "abort")
                return
            try:
                waypoints = _waypoints_from_payload(payload, self.final_only_yaw)
            except (KeyError, TypeError, ValueError) as exc:
                goal.error = f"bad waypoint payload: {exc}"
                action_transition(goal, "start")
                action_transition(goal, "abort")
                return
            self._execs[goal.goal_id] = _DriveExec(waypoints, self.world.cfg)
            action_transition(goal, "start")

        exec_ = self._execs[goal.goal_id]
        nav = self.world.nav_pipeline(goal.model_name)
        pose = nav.pose
        vel = nav.velocity
        grid = self.world.costmap()
        try:
            cmd, finished = exec_.step(pose, vel, grid)
        except (NoPath, GoalOccupied, StartOccupied, NoAdmissibleCommand) as exc:
            self.world.bus(goal.model_name).send_command(VelocityCmd(0.0, 0.0))
            goal.error = str(exc)
            action_transition(goal, "abort")
            self._execs.pop(goal.goal_id, None)
            return
        self.world.bus(goal.model_name).send_command(cmd)
        goal.feedback = exec_.remaining_distance(pose)
        if exec_.path is not None and \
                self._published_paths.get(goal.goal_id) is not exec_.path:
            self._published_paths[goal.goal_id] = exec_.path
            self.world.event_sink({"type": "nav_path", "goal_id": goal.goal_id,
                                   "server": self.name,
                                   "points": [[round(x, 3), round(y, 3)]
                                              for x, y in exec_.path]})
        if finished:
            action_transition(goal, "succeed")
            self._execs.pop(goal.goal_id, None)
            self._published_paths.pop(goal.goal_id, None)
            self.world.event_sink({"type": "nav_path", "goal_id": goal.goal_id,
                                   "server": self.name, "points": []})

    def on_cancel(self, goal, ctx):
        self.world.bus(goal.model_name).send_command(VelocityCmd(0.0, 0.0))
        self._execs.pop(goal.goal_id, None)
        self._published_paths.pop(goal.goal_id, None)


class Ic120FollowWaypoints(_Ic120ServerBase):
    """Drive through every waypoint pose, holding yaw at each of them."""

    name = "subtask_ic120_follow_waypoints"
    final_only_yaw = False


class Ic120NavigateThroughPoses(_Ic120ServerBase):
    """Drive through the waypoints, aligning yaw only at the last one."""

    name = "subtask_ic120_navigate_through_poses"
    final_only_yaw = True


class Ic120Anyware(_Ic120ServerBase):
    """Drive to a single pose."""

    name = "subtask_ic120_anyware"
    final_only_yaw = False


class Ic120ReleaseSoil(SubtaskServer):
    """Tilt the vessel to the recorded angle, dwell, close it again."""

    name = "subtask_ic120_release_soil"
    ANGLE_TOL = 0.02

    def __init__(self, world, dwell_steps: int = 10):
        self.world = world
        self.dwell_steps = dwell_steps
        self._state: dict[int, dict] = {}

    def tick(self, goal, ctx):
        if goal.state is ActionState.ACCEPTED:
            rec = ctx.store.query_parameter(goal.model_name, goal.record_name)
            if rec is None or "target_angle" not in rec.payload:
                goal.error = "parameter record absent or missing target_angle"
                action_transition(goal, "start")
                action_transition(goal, "abort")
                return
            self._state[goal.goal_id] = {"target": float(rec.payload["target_angle"]),
                                         "phase": "open", "dwell": 0}
            action_transition(goal, "start")

        st = self._state[goal.goal_id]
        bus = self.world.bus(goal.model_name)
        angle = self.world.vessel_angle(goal.model_name)
        if st["phase"] == "open":
            bus.send_command(VesselCmd(st["target"]))
            if abs(angle - st["target"]) <= self.ANGLE_TOL:
                st["phase"] = "dwell"
        elif st["phase"] == "dwell":
            st["dwell"] += 1
            if st["dwell"] >= self.dwell_steps:
                st["phase"] = "close"
        elif st["phase"] == "close":
            bus.send_command(VesselCmd(0.0))
            if abs(angle) <= self.ANGLE_TOL:
                action_transition(goal, "succeed")
                self._state.pop(goal.goal_id, None)
                return
        goal.feedback = abs(angle - (st["target"] if st["phase"] == "open" else 0.0))

    def on_cancel(self, goal, ctx):
        bus = self.world.bus(goal.model_name)
        bus.send_command(VelocityCmd(0.0, 0.0))
        bus.send_command(VesselCmd(0.0))
        self._state.pop(goal.goal_id, None)


def register_ic120_servers(registry, world) -> None:
    registry.register(Ic120FollowWaypoints(world))
    registry.register(Ic120NavigateThroughPoses(world))
    registry.register(Ic120Anyware(world))
    registry.register(Ic120ReleaseSoil(world))
