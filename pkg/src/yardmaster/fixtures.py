"""Scenario fixtures: the two coordinated task trees plus every parameter
record they reference, derived from the site configuration.

The trees use only catalog node kinds and subtask servers; all cross-task
coordination goes through the named global-blackboard flags. Flag conventions:
the loader task owns INITIAL_POSE_FLG, the hauler owns ARRIVAL_FLG, sensing
owns the SENSING_* flags, and the operator owns CONTINUE_FLG and MOVING_FLG.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .blackboard import BB_MODEL, INITIAL_FLAGS
from .config import SiteConfig
from .geometry import yaw_to_quat

ZX200_TASK_ID = 1
IC120_TASK_ID = 2


def leaf(model: str, record: str, subtask: str) -> dict:
    return {"kind": "Leaf", "params": {"model_name": model,
                                       "record_name": record,
                                       "subtask_name": subtask}}


def gate(key: str, expected) -> dict:
    return {"kind": "BlackboardGate", "params": {"key": key, "expected": expected}}


def seq(*children) -> dict:
    return {"kind": "Sequence", "children": list(children)}


def fallback(*children) -> dict:
    return {"kind": "Fallback", "children": list(children)}


def loop(child) -> dict:
    return {"kind": "Retry", "max_attempts": -1, "children": [child]}


def _reader(model: str, flag: str) -> tuple[str, dict]:
    record = f"Read_{flag.lower()}"
    return record, {"key": flag}


def _pose_payload(x, y, yaw) -> dict:
    qx, qy, qz, qw = yaw_to_quat(yaw)
    return {"x": x, "y": y, "z": 0.0, "qx": qx, "qy": qy, "qz": qz, "qw": qw}


def zx200_task_sequence(cfg: SiteConfig) -> dict:
    """Loader task: wait for the hauler, dig until loaded or the mound runs
    out, retract to the initial pose, repeat while work continues."""
    m = "zx200"
    dig_loop = loop(seq(
        leaf(m, "Target_excavation_position", "subtask_zx200_excavate_simple"),
        leaf(m, "Target_release_position", "subtask_zx200_release_simple"),
        leaf(m, "Read_sensing_loaded_flg", "blackboard_value_reader"),
        leaf(m, "Read_sensing_check_mound_flg", "blackboard_value_reader"),
        fallback(gate("SENSING_LOADED_FLG", True),
                 gate("SENSING_CHECK_MOUND_FLG", True)),
    ))
    # dig only when the hauler is parked AND still needs soil; otherwise the
    # retract/depart window would retrigger a pointless dig round
    work_or_exit = fallback(
        seq(leaf(m, "Read_continue_flg", "blackboard_value_reader"),
            gate("CONTINUE_FLG", False)),
        seq(leaf(m, "Read_sensing_arrival_flg", "blackboard_value_reader"),
            gate("SENSING_ARRIVAL_FLG", True),
            leaf(m, "Read_sensing_loaded_flg", "blackboard_value_reader"),
            gate("SENSING_LOADED_FLG", False),
            leaf(m, "Read_sensing_check_mound_flg", "blackboard_value_reader"),
            gate("SENSING_CHECK_MOUND_FLG", False),
            leaf(m, "Set_initial_pose_false", "global_value_writer"),
            dig_loop,
            leaf(m, "Target_initial_pose", "subtask_zx200_change_pose"),
            leaf(m, "Set_initial_pose_true", "global_value_writer")),
    )
    root = loop(seq(
        work_or_exit,
        leaf(m, "Read_continue_flg", "blackboard_value_reader"),
        gate("CONTINUE_FLG", False),
    ))
    return {"task_sequence": root}


def ic120_task_sequence(cfg: SiteConfig) -> dict:
    """Hauler task: reach the loading point, then loop load-haul-dump-return
    until the work is flagged complete."""
    m = "ic120"
    departure_wait = loop(seq(
        leaf(m, "Read_initial_pose_flg", "blackboard_value_reader"),
        leaf(m, "Read_moving_flg", "blackboard_value_reader"),
        leaf(m, "Read_sensing_loaded_flg", "blackboard_value_reader"),
        leaf(m, "Read_sensing_check_mound_flg", "blackboard_value_reader"),
        gate("INITIAL_POSE_FLG", True),
        gate("MOVING_FLG", True),
        fallback(gate("SENSING_LOADED_FLG", True),
                 gate("SENSING_CHECK_MOUND_FLG", True)),
    ))
    cycle = seq(
        departure_wait,
        leaf(m, "Set_arrival_false", "global_value_writer"),
        leaf(m, "Target_unloading_path", "subtask_ic120_follow_waypoints"),
        leaf(m, "Target_vessel_angle", "subtask_ic120_release_soil"),
        leaf(m, "Set_sensing_loaded_false", "global_value_writer"),
        leaf(m, "Target_loading_path", "subtask_ic120_navigate_through_poses"),
        leaf(m, "Target_loading_point", "subtask_ic120_anyware"),
        leaf(m, "Set_arrival_true", "global_value_writer"),
        leaf(m, "Read_continue_flg", "blackboard_value_reader"),
        gate("CONTINUE_FLG", False),
    )
    root = seq(
        leaf(m, "Target_loading_point", "subtask_ic120_anyware"),
        leaf(m, "Set_arrival_true", "global_value_writer"),
        loop(cycle),
    )
    return {"task_sequence": root}


def build_task_records(cfg: SiteConfig) -> list[dict]:
    return [
        {"model_name": "zx200", "task_id": ZX200_TASK_ID,
         "description": "excavate the mound and load the crawler dump",
         "task_sequence": zx200_task_sequence(cfg)},
        {"model_name": "ic120", "task_id": IC120_TASK_ID,
         "description": "haul soil from the loading point to the dumping point",
         "task_sequence": ic120_task_sequence(cfg)},
    ]


def build_parameter_records(cfg: SiteConfig) -> list[dict]:
    p1 = cfg.point("point1")
    p2 = cfg.point("point2")
    p3 = cfg.point("point3")
    p4 = cfg.point("point4")
    p5 = cfg.point("point5")
    half_pi = math.pi / 2

    records: list[dict] = []

    def add(model, name, type_, payload):
        records.append({"model_name": model, "record_name": name,
                        "type": type_, "payload": payload})

    # global blackboard flag seeds
    for key, value in INITIAL_FLAGS.items():
        add(BB_MODEL, key, "dynamic", {"value": value})

    # hauler geometry: rear-first arrivals mean the vehicle faces away from
    # its direction of travel at points 1 and 5
    add("ic120", "Target_loading_point", "static",
        _pose_payload(p1[0], p1[1], half_pi))
    add("ic120", "Target_unloading_path", "static", {
        "waypoints": [
            dict(_pose_payload(p3[0], p3[1], math.pi), note="turn rear-east"),
            dict(_pose_payload(p4[0], p4[1], half_pi), note="align rear-south"),
            dict(_pose_payload(p5[0], p5[1], half_pi), note="dumping spot"),
        ]})
    # return leg: orientation only matters at the final waypoint
    add("ic120", "Target_loading_path", "static", {
        "waypoints": [{"x": p3[0], "y": p3[1], "z": 0.0},
                      {"x": p2[0], "y": p2[1], "z": 0.0}],
        **{k: v for k, v in zip(("qx", "qy", "qz", "qw"), yaw_to_quat(half_pi))}})
    add("ic120", "Target_vessel_angle", "static", {"target_angle": 0.8})

    # loader poses; the dynamic records are reseeded by sensing at runtime
    add("zx200", "Target_initial_pose", "static",
        dict(zip(("swing", "boom", "arm", "bucket"), cfg.excavator_start_joints)))
    add("zx200", "Target_excavation_position", "dynamic",
        {"x": cfg.mound_center[0], "y": cfg.mound_center[1],
         "z": cfg.mound_height, "theta_w": cfg.dig_theta_w})
    add("zx200", "Target_release_position", "dynamic",
        {"x": p1[0], "y": p1[1], "z": cfg.vessel_top_height + 0.3,
         "theta_w": -half_pi, "target_angle": -0.4, "quadrant": 0, "fill": 0.0})

    # blackboard access records, one per (machine, flag) pair used by the trees
    for model, flags in (("zx200", ("CONTINUE_FLG", "SENSING_ARRIVAL_FLG",
                                    "SENSING_LOADED_FLG",
                                    "SENSING_CHECK_MOUND_FLG")),
                         ("ic120", ("CONTINUE_FLG", "INITIAL_POSE_FLG",
                                    "MOVING_FLG", "SENSING_LOADED_FLG",
                                    "SENSING_CHECK_MOUND_FLG"))):
        for flag in flags:
            record, payload = _reader(model, flag)
            add(model, record, "static", payload)

    add("zx200", "Set_initial_pose_false", "static",
        {"key": "INITIAL_POSE_FLG", "value": False})
    add("zx200", "Set_initial_pose_true", "static",
        {"key": "INITIAL_POSE_FLG", "value": True})
    add("ic120", "Set_arrival_true", "static",
        {"key": "ARRIVAL_FLG", "value": True})
    add("ic120", "Set_arrival_false", "static",
        {"key": "ARRIVAL_FLG", "value": False})
    add("ic120", "Set_sensing_loaded_false", "static",
        {"key": "SENSING_LOADED_FLG", "value": False})
    return records


def write_fixture_dir(path, cfg: SiteConfig) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "tasks.jsonl", "w") as f:
        for rec in build_task_records(cfg):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(path / "parameters.jsonl", "w") as f:
        for rec in build_parameter_records(cfg):
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def default_fixture_dir() -> Path:
    return Path(__file__).parent / "fixtures" / "scenario"
