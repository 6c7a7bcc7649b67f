import math

import numpy as np
import pytest

from yardmaster.config import SiteConfig
from yardmaster.geometry import yaw_to_quat
from yardmaster.manip import (
    ArmGeometry,
    JointLimitViolation,
    OutOfRange,
    Unreachable,
    forward_kinematics,
    inverse_kinematics,
    plan_trajectory,
    quat_to_theta_w,
    trajectory_to_commands,
)

SIMPLE = ArmGeometry(2.0, 1.0, 0.5, pivot_height=0.0)
WIDE = ArmGeometry(2.0, 1.0, 0.5, pivot_height=0.0,
                   joint_limits=((-math.pi, math.pi), (-math.pi, math.pi),
                                 (-math.pi + 1e-6, -1e-9),
                                 (-math.pi, math.pi)))


def test_fk_colinear_chain():
    tip, theta_w = forward_kinematics((0, 0, 0, 0), SIMPLE)
    assert tip == (pytest.approx(3.5), pytest.approx(0.0), pytest.approx(0.0))
    assert theta_w == 0.0


def test_fk_pure_swing():
    tip, theta_w = forward_kinematics((math.pi / 2, 0, 0, 0), SIMPLE)
    assert tip[0] == pytest.approx(0.0, abs=1e-12)
    assert tip[1] == pytest.approx(3.5)
    assert theta_w == 0.0


def test_fk_planar_trig_oracle():
    # boom pi/6, arm -pi/6, bucket 0 -> theta_w 0; z from hand trig
    boom, arm = math.pi / 6, -math.pi / 6
    tip, theta_w = forward_kinematics((0.0, boom, arm, 0.0), SIMPLE)
    assert theta_w == pytest.approx(0.0)
    z_oracle = 2.0 * math.sin(boom) + 1.0 * math.sin(0.0) + 0.5 * math.sin(0.0)
    rho_oracle = 2.0 * math.cos(boom) + 1.0 * math.cos(0.0) + 0.5
    assert tip[2] == pytest.approx(z_oracle)
    assert tip[0] == pytest.approx(rho_oracle)


def test_theta_w_additivity():
    rng = np.random.default_rng(2)
    for _ in range(100):
        joints = rng.uniform(-1.5, 1.5, 4)
        _, theta_w = forward_kinematics(joints, SIMPLE)
        assert theta_w == joints[1] + joints[2] + joints[3]


def test_ik_identity_pose():
    joints = inverse_kinematics(3.5, 0.0, 0.0, 0.0, WIDE)
    assert np.allclose(joints, (0, 0, 0, 0), atol=1e-9)


def test_ik_unreachable_far():
    with pytest.raises(Unreachable):
        inverse_kinematics(10.0, 0.0, 0.0, 0.0, WIDE)


def test_ik_joint_limit_violation():
    geom = ArmGeometry(2.0, 1.0, 0.5, joint_limits=(
        (-0.1, 0.1), (-math.pi, math.pi), (-math.pi, -1e-9), (-math.pi, math.pi)))
    with pytest.raises(JointLimitViolation):
        inverse_kinematics(0.0, 3.0, 0.5, 0.0, geom)  # needs swing pi/2


def test_fk_ik_roundtrip_property():
    """10^4 random reachable goals: FK(IK(g)) residual < 1e-6."""
    cfg = SiteConfig()
    geom = ArmGeometry.from_config(cfg)
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 10000:
        swing = rng.uniform(-3.0, 3.0)
        radius = rng.uniform(3.0, 8.2)
        z = rng.uniform(0.0, 3.5)
        theta_w = rng.uniform(-2.6, 0.5)
        x, y = radius * math.cos(swing), radius * math.sin(swing)
        try:
            joints = inverse_kinematics(x, y, z, theta_w, geom)
        except (Unreachable, JointLimitViolation):
            continue
        tip, tw = forward_kinematics(joints, geom)
        assert abs(tip[0] - x) < 1e-6
        assert abs(tip[1] - y) < 1e-6
        assert abs(tip[2] - z) < 1e-6
        assert abs(tw - theta_w) < 1e-6
        checked += 1
    assert checked == 10000


def test_ik_elbow_up_branch():
    cfg = SiteConfig()
    geom = ArmGeometry.from_config(cfg)
    joints = inverse_kinematics(5.0, 0.0, 1.0, -math.pi / 2, geom)
    # elbow-up: the arm joint folds back (negative)
    assert joints[2] < 0


# --- quaternion goals ------------------------------------------------------------

def test_quat_to_theta_w_planar():
    # bucket pitched 0.4 rad below horizontal in the x-z plane, swing 0
    pitch = -0.4
    q = (0.0, math.sin(-pitch / 2), 0.0, math.cos(-pitch / 2))  # rot about +y
    tw = quat_to_theta_w(q, swing=0.0)
    assert tw == pytest.approx(pitch, abs=1e-9)


def test_quat_to_theta_w_respects_swing_plane():
    yaw = 0.7
    q = yaw_to_quat(yaw)
    assert quat_to_theta_w(q, swing=yaw) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(Unreachable):
        quat_to_theta_w(q, swing=yaw + 0.5)


def test_quat_with_roll_rejected():
    roll = 0.2
    q = (math.sin(roll / 2), 0.0, 0.0, math.cos(roll / 2))
    with pytest.raises(Unreachable):
        quat_to_theta_w(q, swing=0.0)


# --- trajectories ----------------------------------------------------------------

V4 = (0.5, 0.5, 0.5, 0.5)
A4 = (1.0, 1.0, 1.0, 1.0)


def test_trajectory_zero_motion():
    traj = plan_trajectory((0.1, 0.2, -1.0, 0.0), (0.1, 0.2, -1.0, 0.0), V4, A4)
    assert traj.duration == 0.0
    assert len(traj.times) == 1
    assert traj.angles[0] == (0.1, 0.2, -1.0, 0.0)


def test_trajectory_trapezoid_closed_form():
    # oracle: D=1, v=0.5, a=1 -> ramps 0.5 s (0.125 rad each), cruise 0.75 rad
    # at 0.5 rad/s = 1.5 s, total 2.5 s
    traj = plan_trajectory((0, 0, 0, 0), (0, 1.0, 0, 0), V4, A4)
    assert traj.duration == pytest.approx(2.5, abs=1e-12)
    assert traj.positions_at(2.5)[1] == pytest.approx(1.0, abs=1e-12)
    assert traj.velocities_at(1.25)[1] == pytest.approx(0.5)  # cruise
    assert traj.velocities_at(0.25)[1] == pytest.approx(0.25)  # ramping
    assert traj.velocities_at(2.5)[1] == pytest.approx(0.0, abs=1e-12)


def test_trajectory_triangular_profile():
    # short move never reaches vmax: D=0.16 < v^2/a=0.25 -> T=2*sqrt(0.16)=0.8
    traj = plan_trajectory((0, 0, 0, 0), (0.16, 0, 0, 0), V4, A4)
    assert traj.duration == pytest.approx(0.8, abs=1e-12)
    assert max(v[0] for v in traj.velocities) < 0.5


def test_trajectory_joints_synchronized():
    traj = plan_trajectory((0, 0, 0, 0), (1.0, 0.3, -0.7, 0.05), V4, A4)
    end = traj.positions_at(traj.duration)
    assert end == pytest.approx((1.0, 0.3, -0.7, 0.05), abs=1e-9)
    just_before = traj.positions_at(traj.duration - 1e-9)
    for e, b in zip(end, just_before):
        assert abs(e - b) < 1e-6  # every joint lands together (1e-9 s window)
    assert traj.velocities_at(traj.duration) == pytest.approx((0, 0, 0, 0))


def test_trajectory_respects_velocity_and_accel_limits():
    traj = plan_trajectory((0, 0, 0, 0), (2.0, -1.5, 0.9, 0.2), V4, A4)
    ts = np.linspace(0, traj.duration, 400)
    vel = np.array([traj.velocities_at(t) for t in ts])
    assert (np.abs(vel) <= 0.5 + 1e-9).all()
    acc = np.diff(vel, axis=0) / np.diff(ts)[:, None]
    assert (np.abs(acc) <= 1.0 + 1e-6).all()


def test_trajectory_central_difference_matches_velocity():
    """Positions and stored velocities agree: central differences inside one
    profile phase are exact for quadratics."""
    traj = plan_trajectory((0, 0, 0, 0), (1.0, 0.4, -0.9, 0.1), V4, A4)
    h = 1e-4
    for t in np.linspace(h, traj.duration - h, 97):
        for j, p in enumerate(traj.profiles):
            # stay inside one phase: skip samples near the ramp boundaries
            boundaries = (p.t_ramp, traj.duration - p.t_ramp)
            if any(abs(t - b) <= h for b in boundaries):
                continue
            num = (p.pos(t + h, traj.duration) - p.pos(t - h, traj.duration)) / (2 * h)
            assert abs(num - p.vel(t, traj.duration)) < 1e-6


def test_trajectory_first_sample_is_current_state():
    traj = plan_trajectory((0.3, 0.1, -1.2, 0.5), (0.5, 0.4, -0.9, 0.1), V4, A4)
    assert traj.times[0] == 0.0
    assert traj.angles[0] == pytest.approx((0.3, 0.1, -1.2, 0.5))
    assert all(b > a for a, b in zip(traj.times, traj.times[1:]))


def test_commands_at_endpoints_and_cruise():
    traj = plan_trajectory((0, 0, 0, 0), (0, 1.0, 0, 0), V4, A4)
    at0 = trajectory_to_commands(traj, 0.0, V4)
    assert all(c.vel == 0.0 for c in at0)
    cruise = trajectory_to_commands(traj, 1.25, V4)
    assert cruise[1].vel == pytest.approx(0.5)
    assert cruise[1].valve == 1000
    assert cruise[0].valve == 0
    with pytest.raises(OutOfRange):
        trajectory_to_commands(traj, 2.6, V4)
    with pytest.raises(OutOfRange):
        trajectory_to_commands(traj, -0.1, V4)


def test_trajectory_json_lines_roundtrip():
    import json

    traj = plan_trajectory((0, 0, 0, 0), (0.5, 1.0, -0.3, 0.1), V4, A4)
    lines = traj.to_json_lines()
    assert len(lines) == len(traj.times)
    rows = [json.loads(line) for line in lines]
    assert rows[0]["t"] == 0.0
    assert rows[0]["angles"] == [0, 0, 0, 0]
    assert rows[-1]["angles"] == pytest.approx([0.5, 1.0, -0.3, 0.1])
    assert [r["t"] for r in rows] == sorted(r["t"] for r in rows)


def test_commands_valve_sign_follows_velocity():
    traj = plan_trajectory((0, 0, 0, 0), (0, -1.0, 0, 0), V4, A4)
    cruise = trajectory_to_commands(traj, traj.duration / 2, V4)
    assert cruise[1].vel < 0
    assert cruise[1].valve == -1000


# --- server integration ------------------------------------------------------------

def manip_world():
    from yardmaster.blackboard import GlobalBlackboard
    from yardmaster.site import SiteWorld
    from yardmaster.store import ParamStore

    cfg = SiteConfig()
    store = ParamStore()
    bb = GlobalBlackboard(store)
    bb.seed_flags()
    world = SiteWorld(cfg, store, bb)
    return world, store


def run_zx200_goal(world, store, server, record, max_steps=600):
    from yardmaster.blackboard import BlackboardStore
    from yardmaster.bt import ExecutionContext
    from yardmaster.comms import SubtaskRegistry
    from yardmaster.manip import register_zx200_servers

    registry = SubtaskRegistry()
    register_zx200_servers(registry, world)
    ctx = ExecutionContext(registry=registry, global_bb=world.global_bb,
                           local_bb=BlackboardStore(), store=store, world=world,
                           clock=lambda: world.t)
    goal = registry.open_goal(server, "zx200", record, ctx)
    assert goal is not None
    for _ in range(max_steps):
        world.consume_telemetry()
        registry.tick_active()
        world.step()
        if goal.terminal:
            return goal
    raise AssertionError(f"goal stuck in {goal.state}")


def test_change_pose_all_joints_reaches_target():
    world, store = manip_world()
    target = {"swing": 0.2, "boom": 0.5, "arm": -1.5, "bucket": -0.4}
    store.upsert_parameter("zx200", "Pose_A", "static", target)
    goal = run_zx200_goal(world, store, "subtask_zx200_change_pose", "Pose_A")
    assert goal.state.value == "SUCCEEDED"
    joints = world.excavator.state.joints
    for got, want in zip(joints, (0.2, 0.5, -1.5, -0.4)):
        assert abs(got - want) < 1e-3


def test_change_pose_absent_record_aborts():
    world, store = manip_world()
    goal = run_zx200_goal(world, store, "subtask_zx200_change_pose", "Missing",
                          max_steps=5)
    assert goal.state.value == "ABORTED"


def test_change_pose_unreachable_aborts():
    world, store = manip_world()
    store.upsert_parameter("zx200", "TooFar", "static",
                           {"x": 100.0, "y": 0.0, "z": 0.0, "yaw": 0.0})
    goal = run_zx200_goal(world, store, "subtask_zx200_change_pose", "TooFar",
                          max_steps=5)
    assert goal.state.value == "ABORTED"


def test_excavate_conserves_soil():
    world, store = manip_world()
    report = world.run_sensing()
    tgt = report.target_excavation
    assert tgt is not None
    mound_before = world.terrain.region_volume(world.cfg.mound_center,
                                               world.mound_region_radius)
    goal = run_zx200_goal(world, store, "subtask_zx200_excavate_simple",
                          "Target_excavation_position", max_steps=1500)
    assert goal.state.value == "SUCCEEDED"
    load = world.excavator.state.bucket_load
    mound_after = world.terrain.region_volume(world.cfg.mound_center,
                                              world.mound_region_radius)
    assert load > 0.3
    assert mound_before - mound_after == pytest.approx(load, abs=1e-9)
    assert abs(world.conservation_residual()) < 1e-9


def test_release_transfers_bucket_to_vessel():
    from yardmaster.site import DumpState

    world, store = manip_world()
    p1 = world.cfg.point("point1")
    world.dump.state = DumpState(p1[0], p1[1], p1[2],
                                 capacity=world.cfg.vessel_capacity)
    scooped = world.dig_at(world.cfg.mound_center, 0.76)  # soil from the mound
    assert scooped == pytest.approx(0.76, abs=1e-9)
    world.run_sensing()
    goal = run_zx200_goal(world, store, "subtask_zx200_release_simple",
                          "Target_release_position", max_steps=1500)
    assert goal.state.value == "SUCCEEDED"
    assert world.excavator.state.bucket_load == 0.0
    assert world.dump.state.vessel_load == pytest.approx(scooped, abs=1e-9)
    assert abs(world.conservation_residual()) < 1e-9


def test_cancel_zeroes_joint_commands():
    from yardmaster.blackboard import BlackboardStore
    from yardmaster.bt import ExecutionContext
    from yardmaster.comms import SubtaskRegistry
    from yardmaster.manip import register_zx200_servers

    world, store = manip_world()
    store.upsert_parameter("zx200", "Pose_B", "static",
                           {"swing": -0.5, "boom": 0.9, "arm": -1.0,
                            "bucket": -0.8})
    registry = SubtaskRegistry()
    register_zx200_servers(registry, world)
    ctx = ExecutionContext(registry=registry, global_bb=world.global_bb,
                           local_bb=BlackboardStore(), store=store, world=world,
                           clock=lambda: world.t)
    goal = registry.open_goal("subtask_zx200_change_pose", "zx200", "Pose_B", ctx)
    for _ in range(8):
        world.consume_telemetry()
        registry.tick_active()
        world.step()
    assert any(v != 0.0 for v in world.excavator.state.joint_vel)
    registry.cancel_goal(goal, ctx)
    world.step()
    assert goal.state.value == "CANCELED"
    assert all(v == 0.0 for v in world.excavator.state.joint_vel)
    joints_after = world.excavator.state.joints
    for _ in range(10):
        world.step()
    assert world.excavator.state.joints == joints_after
