"""Top-level service: owns the simulation clock, registers every subtask
server, runs task trees (one machine each), handles the emergency stop, and
drives the coordinated load-haul-dump scenario.

Execution is strictly deterministic: one stepping loop applies queued
mutations at the step boundary, then telemetry, sensing, tree ticks (in
task-id order), server ticks, plant integration and event emission. External
callers (HTTP, tests) interact through start_task / emergency_stop /
set_flag, which queue onto the next boundary when the loop is live.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import bt
from .blackboard import GlobalBlackboard, register_blackboard_servers
from .comms import EStop, SubtaskRegistry
from .config import SiteConfig
from .fixtures import IC120_TASK_ID, ZX200_TASK_ID, default_fixture_dir
from .manip import register_zx200_servers
from .nav import register_ic120_servers
from .site import SiteWorld
from .store import ParamStore


class OrchestratorError(Exception):
    pass


class TaskNotFound(OrchestratorError):
    pass


class MachineBusy(OrchestratorError):
    pass


class ParseError(OrchestratorError):
    pass


class ScenarioTimeout(OrchestratorError):
    pass


class EventedBlackboard(GlobalBlackboard):
    """Global blackboard that reports value transitions to the event log."""

    def __init__(self, store, emit: Callable[[dict], None]):
        super().__init__(store)
        self._emit = emit

    def set(self, key, value, now=0.0):
        cur = self.get(key)
        old = cur.value if cur is not None else None
        rev = super().set(key, value, now)
        if old != value:
            self._emit({"type": "flag", "t": now, "key": key,
                        "old": old, "new": value, "revision": rev})
        return rev


@dataclass
class TreeExec:
    task_id: int
    model_name: str
    tree: bt.TaskTree
    ctx: bt.ExecutionContext
    started_at: float = 0.0
    finished_at: Optional[float] = None

    @property
    def status(self) -> bt.BtStatus:
        return self.tree.status


class Session:
    """One simulated site plus its task executors and event log."""

    def __init__(self, cfg: Optional[SiteConfig] = None,
                 fixture_dir: Optional[Path] = None):
        self.cfg = cfg or SiteConfig()
        self.events: list[dict] = []
        self._event_seq = 0
        self._lock = threading.RLock()

        self.store = ParamStore()
        if fixture_dir is not None:
            self.store.load_fixture(fixture_dir)
        self.global_bb = EventedBlackboard(self.store, self._record_event)
        self.world = SiteWorld(self.cfg, self.store, self.global_bb,
                               event_sink=self._record_event)
        self.global_bb.seed_flags()
        self.registry = SubtaskRegistry()
        register_blackboard_servers(self.registry)
        register_ic120_servers(self.registry, self.world)
        register_zx200_servers(self.registry, self.world)

        self.trees: dict[int, TreeExec] = {}
        self.estopped = False
        self.estop_reports: list[bt.CancelReport] = []

    # --- event log ---
    def _record_event(self, event: dict) -> None:
        event = dict(event)
        if "t" not in event:
            world = getattr(self, "world", None)
            event["t"] = round(world.t, 6) if world is not None else 0.0
        event["seq"] = self._event_seq
        self._event_seq += 1
        self.events.append(event)

    def event_log_canonical(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.events]

    def event_log_digest(self) -> str:
        h = hashlib.sha256()
        for line in self.event_log_canonical():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    # --- control surface ---
    # Mutations and snapshots share one lock with step(), so everything an
    # external caller sees or changes lands exactly on a step boundary.
    def start_task(self, task_id: int) -> dict:
        """Parse the stored task and attach an executor to the clock."""
        with self._lock:
            return self._start_task(task_id)

    def _start_task(self, task_id: int) -> dict:
        rec = self.store.find_task(task_id)
        if rec is None:
            raise TaskNotFound(f"no task with task_id {task_id}")
        for exec_ in self.trees.values():
            if exec_.model_name == rec.model_name and \
                    exec_.status in (bt.BtStatus.IDLE, bt.BtStatus.RUNNING):
                raise MachineBusy(f"{rec.model_name} already runs task "
                                  f"{exec_.task_id}")
        try:
            tree = bt.parse_task_sequence(rec.task_sequence)
        except bt.BtError as exc:
            raise ParseError(f"task {task_id}: {exc}") from exc
        if tree.model_name and tree.model_name != rec.model_name:
            raise ParseError(f"task {task_id}: record says {rec.model_name}, "
                             f"tree actuates {tree.model_name}")
        tree.task_id = task_id
        ctx = bt.ExecutionContext(
            registry=self.registry, global_bb=self.global_bb,
            local_bb=tree.local_bb, store=self.store, world=self.world,
            task_id=task_id, model_name=rec.model_name,
            clock=lambda: self.world.t, emit=self._record_event)
        self.trees[task_id] = TreeExec(task_id, rec.model_name, tree, ctx,
                                       started_at=self.world.t)
        self.store.mark_running(task_id)
        self._record_event({"type": "task_started", "task_id": task_id,
                            "model": rec.model_name})
        return {"task_id": task_id, "model_name": rec.model_name,
                "status": "accepted"}

    def emergency_stop(self) -> list[bt.CancelReport]:
        """Cancel every running tree root-to-leaf and latch the machines."""
        with self._lock:
            return self._emergency_stop()

    def _emergency_stop(self) -> list[bt.CancelReport]:
        reports = []
        for task_id in sorted(self.trees):
            exec_ = self.trees[task_id]
            report = bt.cancel(exec_.tree, exec_.ctx)
            if not report.not_running:
                reports.append(report)
                exec_.finished_at = self.world.t
                self.store.mark_stopped(task_id)
                self._record_event({"type": "task_finished", "task_id": task_id,
                                    "status": exec_.status.value})
        for machine in sorted(self.world.buses):
            self.world.bus(machine).send_command(EStop())
        self.estopped = True
        self.estop_reports.extend(reports)
        self._record_event({"type": "emergency_stop",
                            "canceled_tasks": [r.task_id for r in reports]})
        return reports

    def set_flag(self, key: str, value) -> int:
        with self._lock:
            return self.global_bb.set(key, value, self.world.t)

    # --- stepping ---
    def step(self) -> None:
        with self._lock:
            self.world.consume_telemetry()
            self.world.run_sensing()
            for task_id in sorted(self.trees):
                exec_ = self.trees[task_id]
                if exec_.status in bt.TERMINAL:
                    continue
                before = exec_.status
                status = bt.tick(exec_.tree, exec_.ctx)
                if status is not before and status in bt.TERMINAL:
                    exec_.finished_at = self.world.t
                    self.store.mark_stopped(task_id)
                    self._record_event({"type": "task_finished",
                                        "task_id": task_id,
                                        "status": status.value})
            self.registry.tick_active()
            self.world.step()
            self._record_event({"type": "step", **self.world.snapshot()})

    def run(self, sim_seconds: float) -> None:
        for _ in range(int(round(sim_seconds / self.cfg.dt))):
            self.step()

    def all_terminal(self) -> bool:
        return bool(self.trees) and all(e.status in bt.TERMINAL
                                        for e in self.trees.values())

    # --- snapshots ---
    def get_state(self) -> dict:
        with self._lock:
            return self._get_state()

    def _get_state(self) -> dict:
        snap = self.world.snapshot()
        snap["tasks"] = {str(tid): {"model_name": e.model_name,
                                    "status": e.status.value,
                                    "started_at": e.started_at,
                                    "finished_at": e.finished_at}
                         for tid, e in sorted(self.trees.items())}
        snap["estopped"] = self.estopped
        snap["goals"] = [{"goal_id": g.goal_id, "server": g.server,
                          "model": g.model_name, "state": g.state.value,
                          "feedback": g.feedback}
                         for g in self.registry.active_goals()]
        snap["path"] = None
        for name in ("subtask_ic120_follow_waypoints",
                     "subtask_ic120_navigate_through_poses",
                     "subtask_ic120_anyware"):
            server = self.registry.lookup(name)
            path = server.active_path() if server is not None else None
            if path:
                snap["path"] = path
                break
        return snap

    def get_blackboard(self) -> dict:
        with self._lock:
            return self.global_bb.snapshot()

    def get_terrain(self) -> dict:
        with self._lock:
            t = self.world.terrain
            return {"resolution": t.resolution, "origin": list(t.origin),
                    "heights": [[round(h, 4) for h in row] for row in t.heights],
                    "version": t.version,
                    "points": {name: list(pose)
                               for name, pose in sorted(self.cfg.points.items())}}

    def list_tasks(self) -> list[dict]:
        return [{"task_id": r.task_id, "model_name": r.model_name,
                 "description": r.description} for r in self.store.all_tasks()]


# --- the shipped scenario -----------------------------------------------------------

@dataclass
class ScenarioConfig:
    cycles: int = 3
    seed: int = 42
    dt: float = 0.1
    fixture_dir: Optional[Path] = None
    site: Optional[SiteConfig] = None
    max_sim_time: float = 1800.0
    estop_at: Optional[float] = None      # sim seconds; None runs to completion
    events_path: Optional[Path] = None    # write the canonical event log here


@dataclass
class ScenarioReport:
    cycles_completed: int
    sim_time: float
    wall_time: float
    task_status: dict
    flag_trace: list
    per_cycle: list
    total_excavated: float
    total_dumped: float
    dumped_at_point5: float
    conservation_residual: float
    estopped: bool
    event_count: int
    event_digest: str

    def to_json(self) -> dict:
        return dict(self.__dict__)


class _OperatorPolicy:
    """Plays the operator: clears CONTINUE_FLG when the requested number of
    loads has been delivered, or when nothing haulable remains."""

    def __init__(self, session: Session, cycles: int):
        self.session = session
        self.cycles = cycles

    def observe(self) -> None:
        session = self.session
        world = session.world
        cont = session.global_bb.get("CONTINUE_FLG")
        if cont is None or cont.value is False:
            return
        done = world.dump_events >= self.cycles
        check = session.global_bb.get("SENSING_CHECK_MOUND_FLG")
        exhausted = (check is not None and check.value is True and
                     world.dump.state.vessel_load == 0.0 and
                     world.excavator.state.bucket_load == 0.0)
        if done or exhausted:
            session.set_flag("CONTINUE_FLG", False)


def run_scenario(scenario: ScenarioConfig) -> ScenarioReport:
    site_cfg = scenario.site or SiteConfig()
    site_cfg.seed = scenario.seed
    site_cfg.dt = scenario.dt
    fixture = scenario.fixture_dir or default_fixture_dir()
    session = Session(site_cfg, fixture_dir=fixture)
    session.start_task(ZX200_TASK_ID)
    session.start_task(IC120_TASK_ID)
    policy = _OperatorPolicy(session, scenario.cycles)

    started = time.perf_counter()
    max_steps = int(round(scenario.max_sim_time / site_cfg.dt))
    estop_step = None if scenario.estop_at is None else \
        int(round(scenario.estop_at / site_cfg.dt))
    for step in range(max_steps):
        if estop_step is not None and step == estop_step:
            session.emergency_stop()
        session.step()
        policy.observe()
        if session.all_terminal():
            break
    else:
        raise ScenarioTimeout(f"scenario still live after "
                              f"{scenario.max_sim_time} simulated seconds")
    wall = time.perf_counter() - started
    if scenario.events_path is not None:
        with open(scenario.events_path, "w") as f:
            for line in session.event_log_canonical():
                f.write(line + "\n")
    return _build_report(session, wall)


def _build_report(session: Session, wall: float) -> ScenarioReport:
    world = session.world
    flag_trace = [e for e in session.events if e["type"] == "flag"]
    dumps = [e for e in session.events if e["type"] == "vessel_dump"]
    digs = [e for e in session.events if e["type"] == "dig"]
    per_cycle = []
    for i, d in enumerate(dumps):
        lo = dumps[i - 1]["t"] if i else 0.0
        scoops = [g for g in digs if lo < g["t"] <= d["t"]]
        per_cycle.append({"cycle": i + 1, "dumped": d["volume"],
                          "dump_t": d["t"], "scoops": len(scoops),
                          "scooped": sum(g["scooped"] for g in scoops)})
    p5 = session.cfg.point("point5")
    pile_center = (p5[0], p5[1] - session.cfg.vessel_rear_offset)
    dumped_at_p5 = world.terrain.region_volume(
        pile_center, session.cfg.vessel_deposit_radius + 1.5)
    return ScenarioReport(
        cycles_completed=len(dumps),
        sim_time=round(world.t, 6),
        wall_time=wall,
        task_status={str(tid): e.status.value
                     for tid, e in sorted(session.trees.items())},
        flag_trace=[{k: e[k] for k in ("t", "key", "old", "new")}
                    for e in flag_trace],
        per_cycle=per_cycle,
        total_excavated=world.total_scooped - world.total_returned,
        total_dumped=world.total_dumped,
        dumped_at_point5=dumped_at_p5,
        conservation_residual=world.conservation_residual(),
        estopped=session.estopped,
        event_count=len(session.events),
        event_digest=session.event_log_digest(),
    )
