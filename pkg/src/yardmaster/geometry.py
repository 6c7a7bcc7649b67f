"""Small angle/quaternion helpers shared by the planners and the simulator."""

from __future__ import annotations

import math


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


def ang_diff(a: float, b: float) -> float:
    """Shortest signed angle from b to a."""
    return wrap_angle(a - b)


def yaw_to_quat(yaw: float) -> tuple[float, float, float, float]:
    """(qx, qy, qz, qw) for a rotation about +z."""
    return (0.0, 0.0, math.sin(yaw / 2.0), math.cos(yaw / 2.0))


def quat_to_yaw(qx: float, qy: float, qz: float, qw: float) -> float:
    return math.atan2(2.0 * (qw * qz + qx * qy),
                      1.0 - 2.0 * (qy * qy + qz * qz))


def quat_rotate(q, v):
    """Rotate vector v by quaternion q = (qx, qy, qz, qw)."""
    qx, qy, qz, qw = q
    vx, vy, vz = v
    # t = 2 q x v ; v' = v + qw t + q x t
    tx = 2.0 * (qy * vz - qz * vy)
    ty = 2.0 * (qz * vx - qx * vz)
    tz = 2.0 * (qx * vy - qy * vx)
    return (vx + qw * tx + qy * tz - qz * ty,
            vy + qw * ty + qz * tx - qx * tz,
            vz + qw * tz + qx * ty - qy * tx)


def quat_normalize(q):
    qx, qy, qz, qw = q
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return (qx / n, qy / n, qz / n, qw / n)
