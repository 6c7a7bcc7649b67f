"""Fixed-step site simulation: terrain, crawler-dump and excavator plants,
soil accounting, external sensing, and telemetry synthesis.

The world advances only through step(); every queue is drained at step
boundaries so no component ever observes a half-stepped site. All soil moves
through explicit transactions (dig, bucket release, vessel dump), which keeps
the sum of mound, bucket, vessel and piles constant to float precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .comms import (
    EStop,
    GnssAltTelemetry,
    GnssTelemetry,
    JointTelemetry,
    JointVelCmd,
    MachineBus,
    OdomTelemetry,
    VelocityCmd,
    VesselCmd,
)
from .config import SiteConfig
from .geometry import wrap_angle
from .nav import CostGrid, GeoPoint, NavPipeline, plane_to_geo

DUMP = "ic120"
EXCAVATOR = "zx200"


class SiteError(Exception):
    pass


class OutOfBounds(SiteError):
    pass


class VesselClosed(SiteError):
    pass


# --- terrain ----------------------------------------------------------------------

class Terrain:
    """Height grid in metres; rows follow +y, columns follow +x."""

    def __init__(self, heights: np.ndarray, resolution: float, origin=(0.0, 0.0)):
        self.heights = np.asarray(heights, dtype=float)
        self.resolution = float(resolution)
        self.origin = tuple(origin)
        self.version = 0
        self._centers = None

    @classmethod
    def flat(cls, size_xy, resolution, origin=(0.0, 0.0)) -> "Terrain":
        cols = int(round(size_xy[0] / resolution))
        rows = int(round(size_xy[1] / resolution))
        return cls(np.zeros((rows, cols)), resolution, origin)

    @classmethod
    def with_cone_mound(cls, cfg: SiteConfig) -> "Terrain":
        t = cls.flat(cfg.terrain_size, cfg.terrain_resolution, cfg.terrain_origin)
        xs, ys = t.cell_centers()
        r = np.hypot(xs - cfg.mound_center[0], ys - cfg.mound_center[1])
        t.heights += np.maximum(0.0, cfg.mound_height * (1.0 - r / cfg.mound_radius))
        return t

    def cell_centers(self):
        if self._centers is None:
            rows, cols = self.heights.shape
            xs = self.origin[0] + (np.arange(cols) + 0.5) * self.resolution
            ys = self.origin[1] + (np.arange(rows) + 0.5) * self.resolution
            self._centers = np.meshgrid(xs, ys, indexing="xy")
        return self._centers

    @property
    def cell_area(self) -> float:
        return self.resolution * self.resolution

    def volume(self) -> float:
        return float(self.heights.sum()) * self.cell_area

    def in_bounds(self, x: float, y: float) -> bool:
        rows, cols = self.heights.shape
        cx = (x - self.origin[0]) / self.resolution
        cy = (y - self.origin[1]) / self.resolution
        return 0.0 <= cx < cols and 0.0 <= cy < rows

    def _disk(self, center, radius) -> np.ndarray:
        xs, ys = self.cell_centers()
        return np.hypot(xs - center[0], ys - center[1]) <= radius

    def region_volume(self, center, radius) -> float:
        return float(self.heights[self._disk(center, radius)].sum()) * self.cell_area

    def excavate(self, tip_xy, scoop: float, radius: float) -> float:
        """Remove up to `scoop` m^3 around the tip by a uniform height drop.

        Cells shallower than the drop bottom out at zero; the returned volume
        is the realized terrain change measured on the full grid.
        """
        if not self.in_bounds(*tip_xy):
            raise OutOfBounds(f"tip {tip_xy} outside the terrain")
        if scoop <= 0.0:
            return 0.0
        mask = self._disk(tip_xy, radius)
        h = self.heights[mask]
        if h.size == 0:
            return 0.0
        area = self.cell_area
        available = float(h.sum()) * area
        target = min(scoop, available)
        if target <= 0.0:
            return 0.0
        drop = _water_fill_drop(np.sort(h), target / area)
        before = self.volume()
        self.heights[mask] = np.maximum(0.0, h - drop)
        self.version += 1
        return before - self.volume()

    def deposit(self, center_xy, volume: float, radius: float) -> float:
        """Raise cells around the centre uniformly by volume/area."""
        if volume <= 0.0:
            return 0.0
        if not self.in_bounds(*center_xy):
            raise OutOfBounds(f"deposit centre {center_xy} outside the terrain")
        mask = self._disk(center_xy, radius)
        n = int(mask.sum())
        if n == 0:
            return 0.0
        before = self.volume()
        self.heights[mask] += volume / (n * self.cell_area)
        self.version += 1
        return self.volume() - before


def _water_fill_drop(sorted_heights: np.ndarray, target_column: float) -> float:
    """Uniform drop d with sum(min(h, d)) == target_column, h sorted ascending."""
    n = sorted_heights.size
    prefix = 0.0
    for k, hk in enumerate(sorted_heights):
        # assume cells 0..k-1 fully drained, the rest drop by d >= h_{k-1}
        d = (target_column - prefix) / (n - k)
        if d <= hk:
            return d
        prefix += hk
    return float(sorted_heights[-1])


# --- machine states and plants ---------------------------------------------------------

@dataclass
class DumpState:
    x: float
    y: float
    yaw: float
    v: float = 0.0
    w: float = 0.0
    vessel_angle: float = 0.0
    vessel_load: float = 0.0
    capacity: float = 5.5


@dataclass
class ExcavatorState:
    base: tuple
    joints: tuple = (0.0, 0.0, 0.0, 0.0)
    joint_vel: tuple = (0.0, 0.0, 0.0, 0.0)
    bucket_load: float = 0.0
    bucket_capacity: float = 0.8


def step_dump(state: DumpState, v_cmd: float, w_cmd: float, dt: float,
              v_max: float, w_max: float) -> DumpState:
    """Unicycle integration with command clamping."""
    v = max(-v_max, min(v_max, v_cmd))
    w = max(-w_max, min(w_max, w_cmd))
    return replace(state,
                   x=state.x + v * math.cos(state.yaw) * dt,
                   y=state.y + v * math.sin(state.yaw) * dt,
                   yaw=wrap_angle(state.yaw + w * dt),
                   v=v, w=w)


def step_excavator(state: ExcavatorState, vel_cmd, dt: float,
                   limits, v_max) -> ExcavatorState:
    """Velocity integration with per-joint position and speed limits."""
    joints = []
    vels = []
    for angle, v, (lo, hi), vm in zip(state.joints, vel_cmd, limits, v_max):
        v = max(-vm, min(vm, v))
        angle = max(lo, min(hi, angle + v * dt))
        joints.append(angle)
        vels.append(v)
    return replace(state, joints=tuple(joints), joint_vel=tuple(vels))


def transfer_to_vessel(state: DumpState, volume: float,
                       quadrants: Optional[np.ndarray] = None,
                       quadrant: int = 0) -> tuple[DumpState, float]:
    """Pour soil into the vessel; overflow is reported as spilled."""
    if volume < 0.0:
        raise ValueError("volume must be non-negative")
    accepted = min(volume, state.capacity - state.vessel_load)
    spilled = volume - accepted
    if quadrants is not None and accepted > 0.0:
        quadrants[quadrant] += accepted
    return replace(state, vessel_load=state.vessel_load + accepted), spilled


def dump_vessel(state: DumpState, terrain: Terrain, cfg: SiteConfig,
                quadrants: Optional[np.ndarray] = None) -> tuple[DumpState, float]:
    """Tip the whole load onto the ground behind the dump."""
    if state.vessel_angle < cfg.vessel_release_threshold:
        raise VesselClosed(f"vessel at {state.vessel_angle:.2f} rad, release "
                           f"threshold {cfg.vessel_release_threshold}")
    if state.vessel_load <= 0.0:
        return state, 0.0
    behind = (state.x - cfg.vessel_rear_offset * math.cos(state.yaw),
              state.y - cfg.vessel_rear_offset * math.sin(state.yaw))
    deposited = terrain.deposit(behind, state.vessel_load,
                                cfg.vessel_deposit_radius)
    if quadrants is not None:
        quadrants[:] = 0.0
    return replace(state, vessel_load=0.0), deposited


class DumpPlant:
    """Command setpoints in, pose/vessel state out, one step at a time."""

    def __init__(self, cfg: SiteConfig):
        self.cfg = cfg
        x, y, yaw = cfg.dump_start
        self.state = DumpState(x, y, yaw, capacity=cfg.vessel_capacity)
        self.cmd_v = 0.0
        self.cmd_w = 0.0
        self.vessel_target = 0.0
        self.quadrants = np.zeros(4)

    def apply(self, msg) -> None:
        if isinstance(msg, VelocityCmd):
            self.cmd_v, self.cmd_w = msg.v, msg.w
        elif isinstance(msg, VesselCmd):
            self.vessel_target = max(0.0, min(self.cfg.vessel_max_tilt, msg.angle))
        elif isinstance(msg, EStop):
            self.cmd_v = self.cmd_w = 0.0
            self.vessel_target = self.state.vessel_angle  # hold, do not drop a load

    def step(self, dt: float, terrain: Terrain,
             on_dump: Optional[Callable[[float, tuple], None]] = None) -> None:
        cfg = self.cfg
        self.state = step_dump(self.state, self.cmd_v, self.cmd_w, dt,
                               cfg.dump_v_max, cfg.dump_w_max)
        angle = self.state.vessel_angle
        delta = self.vessel_target - angle
        max_step = cfg.vessel_rate * dt
        angle += max(-max_step, min(max_step, delta))
        self.state = replace(self.state, vessel_angle=angle)
        if angle >= cfg.vessel_release_threshold and self.state.vessel_load > 0.0:
            load = self.state.vessel_load
            self.state, deposited = dump_vessel(self.state, terrain, cfg,
                                                self.quadrants)
            if on_dump is not None:
                on_dump(deposited, (self.state.x, self.state.y))


class ExcavatorPlant:
    def __init__(self, cfg: SiteConfig, start_joints=None):
        self.cfg = cfg
        joints = tuple(start_joints) if start_joints is not None \
            else tuple(cfg.excavator_start_joints)
        self.state = ExcavatorState(base=tuple(cfg.excavator_base), joints=joints,
                                    bucket_capacity=cfg.bucket_capacity)
        self.cmd_vel = [0.0, 0.0, 0.0, 0.0]
        self.valves = [0, 0, 0, 0]

    def apply(self, msg) -> None:
        if isinstance(msg, JointVelCmd) and 0 <= msg.joint < 4:
            self.cmd_vel[msg.joint] = msg.vel
            self.valves[msg.joint] = msg.valve
        elif isinstance(msg, EStop):
            self.cmd_vel = [0.0, 0.0, 0.0, 0.0]
            self.valves = [0, 0, 0, 0]

    def step(self, dt: float) -> None:
        self.state = step_excavator(self.state, self.cmd_vel, dt,
                                    self.cfg.joint_limits, self.cfg.joint_v_max)


# --- sensing ---------------------------------------------------------------------------

@dataclass
class SensingReport:
    mound_volume: float
    vessel_fill: float
    vessel_observable: bool
    dump_at_point1: bool
    target_excavation: Optional[dict]
    target_release: dict
    flags: dict


def compute_sensing(world: "SiteWorld") -> SensingReport:
    cfg = world.cfg
    dump = world.dump.state
    mound_volume = world.terrain.region_volume(cfg.mound_center,
                                               world.mound_region_radius)
    p1 = cfg.point("point1")
    dist_p1 = math.hypot(dump.x - p1[0], dump.y - p1[1])
    at_point1 = (dist_p1 <= cfg.accept_pos_tol and
                 abs(wrap_angle(dump.yaw - p1[2])) <= cfg.accept_yaw_tol)
    observable = dist_p1 <= cfg.sensing_radius
    fill = dump.vessel_load / dump.capacity if dump.capacity > 0 else 0.0

    target_excavation = _recommend_excavation(world)
    target_release = _recommend_release(world)

    arrival = world.global_bb.get("ARRIVAL_FLG")
    arrival_confirmed = bool(arrival.value) if arrival is not None else False
    flags = {
        "SENSING_ARRIVAL_FLG": at_point1 and arrival_confirmed,
        "SENSING_CHECK_MOUND_FLG": mound_volume < cfg.bucket_capacity,
    }
    if observable:
        flags["SENSING_LOADED_FLG"] = fill >= cfg.loaded_fill_fraction
    return SensingReport(mound_volume, fill, observable, at_point1,
                         target_excavation, target_release, flags)


def _recommend_excavation(world: "SiteWorld") -> Optional[dict]:
    """Highest mound cell the arm can actually reach."""
    cfg = world.cfg
    t = world.terrain
    xs, ys = t.cell_centers()
    region = np.hypot(xs - cfg.mound_center[0],
                      ys - cfg.mound_center[1]) <= world.mound_region_radius
    bx, by, _ = cfg.excavator_base
    reach = np.hypot(xs - bx, ys - by)
    candidates = region & (t.heights > 0.02) & \
        (reach >= cfg.reach_min) & (reach <= cfg.reach_max)
    if not candidates.any():
        return None
    masked = np.where(candidates, t.heights, -1.0)
    row, col = np.unravel_index(int(np.argmax(masked)), masked.shape)
    return {"x": float(xs[row, col]), "y": float(ys[row, col]),
            "z": float(t.heights[row, col]), "theta_w": cfg.dig_theta_w}


def _recommend_release(world: "SiteWorld") -> dict:
    """Release point over the least-filled vessel quadrant."""
    cfg = world.cfg
    dump = world.dump.state
    quadrant = int(np.argmin(world.dump.quadrants))
    ox, oy = cfg.vessel_quadrant_offsets[quadrant]
    c, s = math.cos(dump.yaw), math.sin(dump.yaw)
    return {"x": dump.x + c * ox - s * oy,
            "y": dump.y + s * ox + c * oy,
            "z": cfg.vessel_top_height + 0.3,
            "theta_w": -math.pi / 2,
            "target_angle": -0.4,
            "quadrant": quadrant,
            "fill": dump.vessel_load / dump.capacity}


def apply_sensing(world: "SiteWorld", report: SensingReport) -> None:
    """Push sensed values into the store and the global blackboard."""
    now = world.t
    if report.target_excavation is not None:
        world.upsert_dynamic(EXCAVATOR, "Target_excavation_position",
                             report.target_excavation, now)
    if report.vessel_observable:
        world.upsert_dynamic(EXCAVATOR, "Target_release_position",
                             report.target_release, now)
        world.upsert_dynamic(DUMP, "Vessel_state",
                             {"fill": report.vessel_fill,
                              "load": world.dump.state.vessel_load}, now)
    for key, value in report.flags.items():
        world.global_bb.set_if_changed(key, bool(value), now)


# --- the world ----------------------------------------------------------------------------

class SiteWorld:
    """Owns the plants, buses, terrain and onboard state estimators."""

    def __init__(self, cfg: SiteConfig, store, global_bb,
                 event_sink: Optional[Callable[[dict], None]] = None):
        self.cfg = cfg
        self.store = store
        self.global_bb = global_bb
        self.event_sink = event_sink or (lambda e: None)
        self.rng = np.random.default_rng(cfg.seed)
        self.t = 0.0
        self.step_index = 0
        self.mound_region_radius = cfg.mound_radius + 1.5

        self.terrain = Terrain.with_cone_mound(cfg)
        self.dump = DumpPlant(cfg)
        self.excavator = ExcavatorPlant(cfg, cfg.excavator_start_joints)
        self.buses = {DUMP: MachineBus(DUMP), EXCAVATOR: MachineBus(EXCAVATOR)}

        origin = GeoPoint(*cfg.geo_origin)
        self.geo_origin = origin
        self.nav = NavPipeline(cfg, cfg.dump_start, origin)
        self.sensed_vessel_angle = 0.0
        self.sensed_joints = tuple(self.excavator.state.joints)

        self._costmap: Optional[CostGrid] = None
        self._costmap_version = -1
        self._gnss_every = max(1, int(round(cfg.gnss_period / cfg.dt)))

        self.initial_volume = self.terrain.volume()
        self.total_scooped = 0.0
        self.total_to_vessel = 0.0
        self.total_returned = 0.0
        self.total_ground_spill = 0.0
        self.total_dumped = 0.0
        self.dump_events = 0

        self._emit_telemetry()  # step-0 telemetry so estimators start warm

    # --- handles used by the subtask servers ---
    def bus(self, machine: str) -> MachineBus:
        return self.buses[machine]

    def nav_pipeline(self, machine: str) -> NavPipeline:
        if machine != DUMP:
            raise KeyError(f"no navigation pipeline for {machine}")
        return self.nav

    def vessel_angle(self, machine: str) -> float:
        return self.sensed_vessel_angle

    def excavator_joints(self) -> tuple:
        return self.sensed_joints

    def bucket_load(self) -> float:
        return self.excavator.state.bucket_load

    def costmap(self) -> CostGrid:
        if self._costmap is None or self._costmap_version != self.terrain.version:
            self._costmap = CostGrid.from_terrain(self.terrain,
                                                  self.cfg.lethal_height,
                                                  self.cfg.dump_radius)
            self._costmap_version = self.terrain.version
        return self._costmap

    def upsert_dynamic(self, model: str, record: str, payload: dict,
                       now: float) -> None:
        existing = self.store.query_parameter(model, record)
        if existing is not None and existing.payload == payload:
            return
        self.store.upsert_parameter(model, record, "dynamic", payload, now)

    # --- soil transactions ---
    def dig_at(self, site_xy, scoop: float) -> float:
        scooped = self.terrain.excavate(site_xy, scoop, self.cfg.bucket_radius)
        st = self.excavator.state
        self.excavator.state = replace(st, bucket_load=st.bucket_load + scooped)
        self.total_scooped += scooped
        self.event_sink({"type": "dig", "t": self.t, "scooped": scooped,
                         "at": [site_xy[0], site_xy[1]],
                         "bucket_load": self.excavator.state.bucket_load})
        return scooped

    def release_bucket(self, tip_xy) -> tuple[float, float]:
        """Empty the bucket: into the vessel when over it, else back to the
        ground; whatever the vessel cannot take returns to the mound."""
        st = self.excavator.state
        load = st.bucket_load
        if load <= 0.0:
            return 0.0, 0.0
        dump = self.dump.state
        over_vessel = math.hypot(tip_xy[0] - dump.x, tip_xy[1] - dump.y) <= 2.0
        transferred = returned = 0.0
        if over_vessel:
            quadrant = self._nearest_quadrant(tip_xy)
            self.dump.state, leftover = transfer_to_vessel(
                dump, load, self.dump.quadrants, quadrant)
            transferred = load - leftover
            if leftover > 0.0:
                returned = self.terrain.deposit(self.cfg.mound_center, leftover,
                                                self.cfg.bucket_radius + 0.4)
        else:
            returned = self.terrain.deposit(tip_xy, load,
                                            self.cfg.bucket_radius + 0.4)
            self.total_ground_spill += returned
        self.excavator.state = replace(st, bucket_load=0.0)
        self.total_to_vessel += transferred
        self.total_returned += returned if over_vessel else 0.0
        self.event_sink({"type": "bucket_release", "t": self.t,
                         "to_vessel": transferred, "returned": returned,
                         "vessel_load": self.dump.state.vessel_load})
        return transferred, returned

    def _nearest_quadrant(self, tip_xy) -> int:
        dump = self.dump.state
        c, s = math.cos(dump.yaw), math.sin(dump.yaw)
        best, best_d = 0, float("inf")
        for i, (ox, oy) in enumerate(self.cfg.vessel_quadrant_offsets):
            qx = dump.x + c * ox - s * oy
            qy = dump.y + s * ox + c * oy
            d = math.hypot(tip_xy[0] - qx, tip_xy[1] - qy)
            if d < best_d:
                best, best_d = i, d
        return best

    # --- stepping ---
    def consume_telemetry(self) -> None:
        dt = self.cfg.dt
        msgs = self.buses[DUMP].drain_telemetry()
        nav_msgs = []
        for m in msgs:
            if isinstance(m, JointTelemetry) and m.joint == 0:
                self.sensed_vessel_angle = m.angle
            else:
                nav_msgs.append(m)
        self.nav.consume(nav_msgs, dt)
        joints = list(self.sensed_joints)
        for m in self.buses[EXCAVATOR].drain_telemetry():
            if isinstance(m, JointTelemetry) and 0 <= m.joint < 4:
                joints[m.joint] = m.angle
        self.sensed_joints = tuple(joints)

    def run_sensing(self) -> SensingReport:
        report = compute_sensing(self)
        apply_sensing(self, report)
        return report

    def step(self) -> None:
        dt = self.cfg.dt
        for machine in (DUMP, EXCAVATOR):
            for msg in self.buses[machine].drain_commands():
                if machine == DUMP:
                    self.dump.apply(msg)
                else:
                    self.excavator.apply(msg)
        self.dump.step(dt, self.terrain, self._on_vessel_dump)
        self.excavator.step(dt)
        self.t += dt
        self.step_index += 1
        self._emit_telemetry()

    def _on_vessel_dump(self, deposited: float, at) -> None:
        self.total_dumped += deposited
        self.dump_events += 1
        self.event_sink({"type": "vessel_dump", "t": self.t,
                         "volume": deposited, "at": [at[0], at[1]],
                         "count": self.dump_events})

    def _emit_telemetry(self) -> None:
        cfg = self.cfg
        bus = self.buses[DUMP]
        st = self.dump.state
        noise = self.rng.normal(size=2)
        bus.send_telemetry(OdomTelemetry(
            v=st.v * cfg.odom_scale + cfg.odom_sigma_v * noise[0],
            w=st.w * cfg.odom_scale + cfg.odom_sigma_w * noise[1]))
        bus.send_telemetry(JointTelemetry(0, st.vessel_angle))
        if self.step_index % self._gnss_every == 0:
            gn = self.rng.normal(size=2)
            gx = st.x + cfg.gnss_sigma * gn[0]
            gy = st.y + cfg.gnss_sigma * gn[1]
            p = plane_to_geo(gx, gy, 0.0, self.geo_origin)
            bus.send_telemetry(GnssTelemetry(p.lat, p.lon))
            bus.send_telemetry(GnssAltTelemetry(p.alt))
        ebus = self.buses[EXCAVATOR]
        for joint, angle in enumerate(self.excavator.state.joints):
            ebus.send_telemetry(JointTelemetry(joint, angle))

    # --- accounting ---
    def soil_total(self) -> float:
        return (self.terrain.volume() + self.excavator.state.bucket_load +
                self.dump.state.vessel_load)

    def conservation_residual(self) -> float:
        return self.soil_total() - self.initial_volume

    def snapshot(self) -> dict:
        d = self.dump.state
        e = self.excavator.state
        est = self.nav.pose
        return {
            "t": round(self.t, 6),
            "step": self.step_index,
            "dump": {"x": d.x, "y": d.y, "yaw": d.yaw, "v": d.v, "w": d.w,
                     "vessel_angle": d.vessel_angle, "vessel_load": d.vessel_load,
                     "capacity": d.capacity,
                     "estimate": {"x": est[0], "y": est[1], "yaw": est[2]}},
            "excavator": {"base": list(e.base), "joints": list(e.joints),
                          "bucket_load": e.bucket_load},
            "volumes": {"terrain": self.terrain.volume(),
                        "mound": self.terrain.region_volume(
                            self.cfg.mound_center, self.mound_region_radius),
                        "dumped": self.total_dumped,
                        "conservation_residual": self.conservation_residual()},
        }
