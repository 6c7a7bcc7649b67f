"""Excavator arm stack: kinematics for the swing/boom/arm/bucket chain,
time-synchronized trapezoidal joint trajectories, and the subtask servers
that stream velocity/valve commands across the machine boundary.

The bucket pitch relative to the ground (theta_w) is the sum of boom, arm
and bucket pitches; goals may arrive as joint angles, as position plus
theta_w, as position plus yaw, or as position plus quaternion (the latter
must be swing-planar, the chain has no off-plane wrist).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

from .comms import ActionState, JointVelCmd, SubtaskServer, action_transition
from .geometry import ang_diff, quat_rotate, quat_normalize, wrap_angle


class ManipError(Exception):
    pass


class Unreachable(ManipError):
    pass


class JointLimitViolation(ManipError):
    pass


class OutOfRange(ManipError):
    pass


@dataclass(frozen=True)
class ArmGeometry:
    l_boom: float
    l_arm: float
    l_bucket: float
    pivot_height: float = 0.0
    joint_limits: tuple = ((-math.pi, math.pi), (-math.pi, math.pi),
                           (-math.pi, math.pi), (-math.pi, math.pi))

    @classmethod
    def from_config(cls, cfg) -> "ArmGeometry":
        return cls(cfg.l_boom, cfg.l_arm, cfg.l_bucket, cfg.boom_pivot_height,
                   tuple(tuple(l) for l in cfg.joint_limits))


def forward_kinematics(joints: Sequence[float], geom: ArmGeometry):
    """Bucket tip (x, y, z) in the base frame plus theta_w."""
    swing, boom, arm, bucket = joints
    theta_w = boom + arm + bucket
    rho = (geom.l_boom * math.cos(boom)
           + geom.l_arm * math.cos(boom + arm)
           + geom.l_bucket * math.cos(theta_w))
    z = (geom.pivot_height
         + geom.l_boom * math.sin(boom)
         + geom.l_arm * math.sin(boom + arm)
         + geom.l_bucket * math.sin(theta_w))
    return (rho * math.cos(swing), rho * math.sin(swing), z), theta_w


def inverse_kinematics(x: float, y: float, z: float, theta_w: float,
                       geom: ArmGeometry):
    """Closed-form elbow-up solution for a tip position plus bucket pitch."""
    swing = math.atan2(y, x)
    rho = math.hypot(x, y)
    wrist_rho = rho - geom.l_bucket * math.cos(theta_w)
    wrist_z = z - geom.l_bucket * math.sin(theta_w)
    if wrist_rho <= 1e-9:
        raise Unreachable(f"wrist would sit behind the swing axis (rho={wrist_rho:.3f})")
    dx, dz = wrist_rho, wrist_z - geom.pivot_height
    d = math.hypot(dx, dz)
    lo, hi = abs(geom.l_boom - geom.l_arm), geom.l_boom + geom.l_arm
    if not lo - 1e-9 <= d <= hi + 1e-9:
        raise Unreachable(f"wrist distance {d:.3f} outside [{lo:.3f}, {hi:.3f}]")
    d = min(max(d, lo), hi)
    cos_inner = (geom.l_boom ** 2 + geom.l_arm ** 2 - d * d) / \
        (2.0 * geom.l_boom * geom.l_arm)
    inner = math.acos(min(1.0, max(-1.0, cos_inner)))
    arm = -(math.pi - inner)  # elbow-up branch
    cos_shoulder = (geom.l_boom ** 2 + d * d - geom.l_arm ** 2) / \
        (2.0 * geom.l_boom * d)
    boom = math.atan2(dz, dx) + math.acos(min(1.0, max(-1.0, cos_shoulder)))
    bucket = theta_w - boom - arm
    joints = (swing, boom, arm, bucket)
    for name, angle, (jlo, jhi) in zip(("swing", "boom", "arm", "bucket"),
                                       joints, geom.joint_limits):
        if not jlo - 1e-9 <= angle <= jhi + 1e-9:
            raise JointLimitViolation(f"{name}={angle:.4f} outside [{jlo}, {jhi}]")
    return joints


def quat_to_theta_w(q, swing: float, tol: float = 1e-3) -> float:
    """Bucket pitch from an end-effector quaternion.

    The bucket x-axis must lie in the vertical swing plane and the y-axis
    must stay horizontal; anything else the 4-dof chain cannot realize.
    """
    q = quat_normalize(q)
    ex = quat_rotate(q, (1.0, 0.0, 0.0))
    ey = quat_rotate(q, (0.0, 1.0, 0.0))
    planar = math.hypot(ex[0], ex[1])
    if planar > tol:
        bearing = math.atan2(ex[1], ex[0])
        if abs(ang_diff(bearing, swing)) > tol and \
                abs(ang_diff(bearing, swing + math.pi)) > tol:
            raise Unreachable(f"orientation leaves the swing plane by "
                              f"{ang_diff(bearing, swing):.4f} rad")
        if abs(ang_diff(bearing, swing + math.pi)) <= tol:
            planar = -planar
    if abs(ey[2]) > tol:
        raise Unreachable(f"roll component {ey[2]:.4f} not realizable")
    return math.atan2(ex[2], planar)


# --- trajectories ---------------------------------------------------------------

@dataclass
class _Profile:
    start: float
    delta: float       # signed travel
    v_peak: float      # unsigned
    t_ramp: float
    accel: float       # unsigned

    def pos(self, t: float, total: float) -> float:
        if self.delta == 0.0 or total == 0.0:
            return self.start
        s = 1.0 if self.delta > 0 else -1.0
        t = min(max(t, 0.0), total)
        if t < self.t_ramp:
            travelled = 0.5 * self.accel * t * t
        elif t <= total - self.t_ramp:
            travelled = 0.5 * self.accel * self.t_ramp ** 2 + \
                self.v_peak * (t - self.t_ramp)
        else:
            tr = total - t
            travelled = abs(self.delta) - 0.5 * self.accel * tr * tr
        return self.start + s * travelled

    def vel(self, t: float, total: float) -> float:
        if self.delta == 0.0 or total == 0.0:
            return 0.0
        s = 1.0 if self.delta > 0 else -1.0
        if t < 0.0 or t > total:
            return 0.0
        if t < self.t_ramp:
            return s * self.accel * t
        if t <= total - self.t_ramp:
            return s * self.v_peak
        return s * self.accel * (total - t)


@dataclass
class JointTrajectory:
    times: list            # sample instants, strictly increasing from 0
    angles: list           # per sample, 4 joint angles
    velocities: list       # per sample, 4 joint velocities
    duration: float
    profiles: list         # analytic evaluators, one per joint

    def positions_at(self, t: float):
        return tuple(p.pos(t, self.duration) for p in self.profiles)

    def velocities_at(self, t: float):
        return tuple(p.vel(t, self.duration) for p in self.profiles)

    def to_json_lines(self) -> list[str]:
        """One JSON object per sample, for replay tooling."""
        return [json.dumps({"t": t, "angles": list(a), "velocities": list(v)},
                           sort_keys=True)
                for t, a, v in zip(self.times, self.angles, self.velocities)]


def _min_duration(dist: float, vmax: float, amax: float) -> float:
    if dist == 0.0:
        return 0.0
    if dist >= vmax * vmax / amax:
        return dist / vmax + vmax / amax   # trapezoid: cruise plus two ramps
    return 2.0 * math.sqrt(dist / amax)    # triangular


def plan_trajectory(current: Sequence[float], target: Sequence[float],
                    v_max: Sequence[float], a_max: Sequence[float],
                    sample_dt: float = 0.1) -> JointTrajectory:
    """Per-joint trapezoids stretched so every joint finishes together."""
    deltas = [t - c for c, t in zip(current, target)]
    total = max(_min_duration(abs(d), v, a)
                for d, v, a in zip(deltas, v_max, a_max))
    if total == 0.0:
        profiles = [_Profile(c, 0.0, 0.0, 0.0, a)
                    for c, a in zip(current, a_max)]
        return JointTrajectory([0.0], [tuple(current)], [(0.0,) * len(current)],
                               0.0, profiles)

    profiles = []
    knots = {0.0, total}
    for c, d, a in zip(current, deltas, a_max):
        dist = abs(d)
        if dist == 0.0:
            profiles.append(_Profile(c, 0.0, 0.0, 0.0, a))
            continue
        disc = a * a * total * total - 4.0 * a * dist
        v_peak = (a * total - math.sqrt(max(disc, 0.0))) / 2.0
        t_ramp = v_peak / a
        profiles.append(_Profile(c, d, v_peak, t_ramp, a))
        knots.add(t_ramp)
        knots.add(total - t_ramp)

    grid = {round(k * sample_dt, 9) for k in range(int(total / sample_dt) + 1)}
    times = sorted(t for t in knots | grid if 0.0 <= t <= total)
    traj = JointTrajectory(times, [], [], total, profiles)
    for t in times:
        traj.angles.append(traj.positions_at(t))
        traj.velocities.append(traj.velocities_at(t))
    return traj


def trajectory_to_commands(traj: JointTrajectory, t: float,
                           v_max: Sequence[float]) -> list[JointVelCmd]:
    """Joint velocity commands at time t, valves scaled to permille."""
    if t < 0.0 or t > traj.duration + 1e-12:
        raise OutOfRange(f"t={t} outside [0, {traj.duration}]")
    cmds = []
    for joint, (vel, vmax) in enumerate(zip(traj.velocities_at(t), v_max)):
        valve = int(round(1000.0 * vel / vmax)) if vmax > 0 else 0
        valve = max(-1000, min(1000, valve))
        cmds.append(JointVelCmd(joint, vel, valve))
    return cmds


# --- command streaming ------------------------------------------------------------

def _quantize_vel(v: float) -> float:
    """Mirror of the wire quantization (mrad/s grid)."""
    return round(v * 1000.0) / 1000.0


class _TrajStreamer:
    """Streams a trajectory as interval-average velocities, closing the loop
    on its own commanded integral so wire quantization cannot accumulate."""

    def __init__(self, traj: JointTrajectory, start_angles, v_max, dt: float):
        self.traj = traj
        self.mirror = list(start_angles)
        self.v_max = v_max
        self.dt = dt
        self.t = 0.0
        self.done = False
        self._halting = False

    def tick(self, bus) -> bool:
        if self.done:
            return True
        if self._halting:
            # the last chunk has integrated; zero the setpoints this tick
            for joint in range(len(self.mirror)):
                bus.send_command(JointVelCmd(joint, 0.0, 0))
            self.done = True
            return True
        self.t = min(self.t + self.dt, self.traj.duration)
        targets = self.traj.positions_at(self.t)
        for joint, target in enumerate(targets):
            v = (target - self.mirror[joint]) / self.dt
            vq = _quantize_vel(v)
            vmax = self.v_max[joint]
            valve = max(-1000, min(1000, int(round(1000.0 * vq / vmax)))) \
                if vmax > 0 else 0
            bus.send_command(JointVelCmd(joint, vq, valve))
            self.mirror[joint] += vq * self.dt
        if self.t >= self.traj.duration:
            self._halting = True
        return False


# --- zx200 subtask servers -----------------------------------------------------------

def _site_to_base(x: float, y: float, base) -> tuple[float, float]:
    bx, by, byaw = base
    dx, dy = x - bx, y - by
    c, s = math.cos(-byaw), math.sin(-byaw)
    return (c * dx - s * dy, s * dx + c * dy)


def _base_to_site(x: float, y: float, base) -> tuple[float, float]:
    bx, by, byaw = base
    c, s = math.cos(byaw), math.sin(byaw)
    return (bx + c * x - s * y, by + s * x + c * y)


class _Zx200ServerBase(SubtaskServer):
    """Phase-scripted arm motion; subclasses list their phases."""

    SETTLE_TOL = 1e-3

    def __init__(self, world):
        self.world = world
        self.geom = ArmGeometry.from_config(world.cfg)
        self._state: dict[int, dict] = {}

    # subclasses: build list of phase dicts from the record payload
    def _phases(self, payload: dict, joints) -> list[dict]:
        raise NotImplementedError

    def _abort(self, goal, message: str) -> None:
        if goal.state is ActionState.ACCEPTED:
            action_transition(goal, "start")
        goal.error = message
        action_transition(goal, "abort")
        self._state.pop(goal.goal_id, None)

    def _ik_site(self, x, y, z, theta_w):
        bx, by = _site_to_base(x, y, self.world.cfg.excavator_base)
        return inverse_kinematics(bx, by, z, theta_w, self.geom)

    def tick(self, goal, ctx):
        cfg = self.world.cfg
        if goal.state is ActionState.ACCEPTED:
            rec = ctx.store.query_parameter(goal.model_name, goal.record_name)
            if rec is None:
                self._abort(goal, "parameter record absent")
                return
            joints = self.world.excavator_joints()
            try:
                phases = self._phases(dict(rec.payload), joints)
            except (Unreachable, JointLimitViolation, KeyError, ValueError) as exc:
                self._abort(goal, f"{type(exc).__name__}: {exc}")
                return
            self._state[goal.goal_id] = {"phases": phases, "idx": 0,
                                         "streamer": None, "joints": list(joints)}
            action_transition(goal, "start")

        st = self._state[goal.goal_id]
        bus = self.world.bus(goal.model_name)
        if st["streamer"] is None:
            if st["idx"] >= len(st["phases"]):
                action_transition(goal, "succeed")
                self._state.pop(goal.goal_id, None)
                return
            phase = st["phases"][st["idx"]]
            traj = plan_trajectory(st["joints"], phase["joints"],
                                   cfg.joint_v_max, cfg.joint_a_max)
            st["streamer"] = _TrajStreamer(traj, st["joints"],
                                           cfg.joint_v_max, cfg.dt)
        if st["streamer"].tick(bus):
            phase = st["phases"][st["idx"]]
            st["joints"] = list(st["streamer"].mirror)
            if "action" in phase:
                phase["action"](goal)
            st["idx"] += 1
            st["streamer"] = None
        goal.feedback = st["idx"] / max(1, len(st["phases"]))

    def on_cancel(self, goal, ctx):
        bus = self.world.bus(goal.model_name)
        for joint in range(4):
            bus.send_command(JointVelCmd(joint, 0.0, 0))
        self._state.pop(goal.goal_id, None)


class Zx200ChangePose(_Zx200ServerBase):
    """Move to a target pose given as joint angles, position+quaternion,
    or position+yaw (yaw picks the swing, bucket pitch stays put)."""

    name = "subtask_zx200_change_pose"

    def _phases(self, payload, joints):
        names = ("swing", "boom", "arm", "bucket")
        if all(k in payload for k in names):
            target = tuple(float(payload[k]) for k in names)
            for nm, angle, (lo, hi) in zip(names, target, self.geom.joint_limits):
                if not lo - 1e-9 <= angle <= hi + 1e-9:
                    raise JointLimitViolation(f"{nm}={angle} outside [{lo}, {hi}]")
            return [{"joints": target}]
        base = self.world.cfg.excavator_base
        x, y, z = float(payload["x"]), float(payload["y"]), float(payload["z"])
        bx, by = _site_to_base(x, y, base)
        if all(k in payload for k in ("qx", "qy", "qz", "qw")):
            swing = math.atan2(by, bx)
            theta_w = quat_to_theta_w((payload["qx"], payload["qy"],
                                       payload["qz"], payload["qw"]), swing)
            return [{"joints": inverse_kinematics(bx, by, z, theta_w, self.geom)}]
        if "yaw" in payload:
            swing = wrap_angle(float(payload["yaw"]) - base[2])
            _, theta_w = forward_kinematics(joints, self.geom)
            rho = math.hypot(bx, by)
            target = inverse_kinematics(rho * math.cos(swing),
                                        rho * math.sin(swing), z, theta_w,
                                        self.geom)
            return [{"joints": target}]
        raise ValueError("payload carries neither joint angles, quaternion "
                         "nor yaw")


class Zx200ExcavateSimple(_Zx200ServerBase):
    """Scripted dig: approach above the target, cut in, drag toward the
    base, take the scoop, curl up to the carry pose."""

    name = "subtask_zx200_excavate_simple"

    def _phases(self, payload, joints):
        cfg = self.world.cfg
        x, y = float(payload["x"]), float(payload["y"])
        z = float(payload["z"])
        theta_w = float(payload.get("theta_w", cfg.dig_theta_w))
        bx, by = _site_to_base(x, y, cfg.excavator_base)
        rho = math.hypot(bx, by)
        ux, uy = bx / rho, by / rho  # radially outward in the base frame
        z_dig = max(z - cfg.dig_depth, 0.05)
        out = cfg.drag_length * 0.7
        inward = cfg.drag_length * 0.3

        def at(radial, height, pitch):
            return inverse_kinematics(ux * radial, uy * radial, height,
                                      pitch, self.geom)

        target_site = (x, y)

        def take_scoop(goal):
            scoop = max(0.0, cfg.bucket_capacity - self.world.bucket_load())
            self.world.dig_at(target_site, scoop)

        return [
            {"joints": at(rho + out, z + 1.0, theta_w)},
            {"joints": at(rho + out, z_dig, theta_w)},
            {"joints": at(rho - inward, z_dig, theta_w), "action": take_scoop},
            {"joints": at(rho - inward, z + 1.2, cfg.carry_theta_w)},
        ]


class Zx200ReleaseSimple(_Zx200ServerBase):
    """Swing over the release point, uncurl the bucket to the target angle
    (the soil drops into the vessel), curl back."""

    name = "subtask_zx200_release_simple"

    def _phases(self, payload, joints):
        cfg = self.world.cfg
        x, y = float(payload["x"]), float(payload["y"])
        z = float(payload["z"])
        theta_w = float(payload.get("theta_w", -math.pi / 2))
        open_pitch = float(payload.get("target_angle", 0.0))
        hold = self._ik_site(x, y, z, theta_w)
        # uncurl only the bucket joint; boom/arm stay put
        swing, boom, arm, _ = hold
        opened = (swing, boom, arm, open_pitch - boom - arm)
        for nm, angle, (lo, hi) in zip(("bucket",), (opened[3],),
                                       (self.geom.joint_limits[3],)):
            if not lo - 1e-9 <= angle <= hi + 1e-9:
                raise JointLimitViolation(f"{nm}={angle} outside [{lo}, {hi}]")
        tip_site = (x, y)

        def drop(goal):
            self.world.release_bucket(tip_site)

        return [
            {"joints": hold},
            {"joints": opened, "action": drop},
            {"joints": hold},
        ]


def register_zx200_servers(registry, world) -> None:
    registry.register(Zx200ChangePose(world))
    registry.register(Zx200ExcavateSimple(world))
    registry.register(Zx200ReleaseSimple(world))
