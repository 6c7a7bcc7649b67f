"""Site configuration: machine geometry, limits, layout, noise and tolerances.

Everything the experiment could reasonably want to vary lives here and loads
from a single JSON file; the defaults describe the stock two-machine yard
(mound in the southwest, loading point north of it, haul loop to the east).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

HALF_PI = math.pi / 2.0


def _default_points() -> dict:
    # canonical site datums; task fixtures carry their own approach yaws
    return {
        "point1": (12.0, 20.0, HALF_PI),   # loading spot, reached rear-first
        "point2": (12.0, 26.0, HALF_PI),   # align/decelerate before point1
        "point3": (24.0, 26.0, 0.0),       # turning spot
        "point4": (36.0, 26.0, HALF_PI),   # align/decelerate before point5
        "point5": (36.0, 20.0, HALF_PI),   # dumping spot, reached rear-first
    }


@dataclass
class SiteConfig:
    dt: float = 0.1
    seed: int = 42

    # geodetic origin used to synthesize GNSS telemetry
    geo_origin: tuple = (36.0, 140.0, 10.0)  # lat deg, lon deg, alt m

    # crawler dump plant
    dump_start: tuple = (12.0, 26.0, HALF_PI)
    dump_v_max: float = 1.5
    dump_w_max: float = 0.5
    dump_accel_v: float = 0.8
    dump_accel_w: float = 1.2
    dump_radius: float = 1.4            # inflation radius for planning
    vessel_capacity: float = 5.5        # m^3
    vessel_max_tilt: float = 1.0        # rad
    vessel_rate: float = 0.4            # rad/s slew
    vessel_release_threshold: float = 0.7
    vessel_rear_offset: float = 4.0     # deposit centre behind the dump
    vessel_deposit_radius: float = 2.0
    vessel_quadrant_offsets: tuple = ((0.8, 0.45), (0.8, -0.45),
                                      (-0.8, 0.45), (-0.8, -0.45))
    vessel_top_height: float = 2.2      # where the bucket releases

    # excavator plant
    excavator_base: tuple = (13.3, 14.8, 2.554)
    # carry posture facing the mound (swing, boom, arm, bucket)
    excavator_start_joints: tuple = (0.7374, 0.6867, -1.7705, -1.1162)
    boom_pivot_height: float = 2.0
    l_boom: float = 5.7
    l_arm: float = 2.9
    l_bucket: float = 1.3
    joint_names: tuple = ("swing", "boom", "arm", "bucket")
    joint_limits: tuple = ((-3.14, 3.14), (-0.5, 1.571),
                           (-2.9, -0.3), (-3.1, 1.5))
    joint_v_max: tuple = (0.6, 0.5, 0.6, 0.8)
    joint_a_max: tuple = (1.2, 1.0, 1.2, 1.6)
    bucket_capacity: float = 0.8        # m^3 per scoop
    bucket_radius: float = 0.6          # soil removal radius around the tip
    drag_length: float = 1.0            # radial drag during a dig
    dig_depth: float = 0.3
    dig_theta_w: float = -HALF_PI       # bucket pitch while digging
    carry_theta_w: float = -2.2
    reach_min: float = 3.0              # sensing-side reachability band
    reach_max: float = 8.0

    # terrain
    terrain_origin: tuple = (0.0, 0.0)
    terrain_size: tuple = (44.0, 32.0)  # metres (x, y)
    terrain_resolution: float = 0.5
    mound_center: tuple = (8.0, 14.0)
    mound_height: float = 5.0
    mound_radius: float = 2.1

    # costmap
    lethal_height: float = 1.0

    # navigation
    arrive_pos_tol: float = 0.1         # controller tolerance on its estimate
    arrive_yaw_tol: float = 0.05
    accept_pos_tol: float = 0.2         # what the site accepts as "arrived"
    accept_yaw_tol: float = 0.1
    local_plan_horizon: float = 1.5
    local_plan_samples_v: int = 7
    local_plan_samples_w: int = 15
    critic_weights: tuple = (32.0, 24.0, 1.0, 0.5)

    # sensing
    sensing_radius: float = 3.0         # vessel observable this close to point1
    loaded_fill_fraction: float = 0.9
    gnss_sigma: float = 0.05
    gnss_period: float = 1.0
    odom_scale: float = 1.01            # 1% odometry bias
    odom_sigma_v: float = 0.005
    odom_sigma_w: float = 0.002

    # EKF
    ekf_q_xy: float = 4e-4              # process noise per step, m^2
    ekf_q_yaw: float = 4e-4
    ekf_gnss_var: float = 0.0025        # (0.05 m)^2
    ekf_gate: float = 9.21              # chi-square 2dof 99%

    points: dict = field(default_factory=_default_points)

    def joint_limit(self, idx: int) -> tuple:
        return self.joint_limits[idx]

    def point(self, name: str) -> tuple:
        return tuple(self.points[name])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SiteConfig":
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown config key {key!r}")
            if isinstance(getattr(cfg, key), tuple) and isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "SiteConfig":
        return cls.from_json(json.loads(Path(path).read_text()))
