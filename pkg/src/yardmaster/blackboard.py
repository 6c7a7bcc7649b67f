"""Typed key-value blackboards and the cross-task synchronization subtasks.

One global blackboard is shared by every task and backed by the document
store's dynamic-parameter collection; each task additionally owns a private
local blackboard. Subtask processing reads local values only, so anything
global must first be pulled down by a reader node. Coordination is polling:
there are no blocking waits.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Optional

from .comms import ActionGoal, SubtaskServer, action_transition
from .store import ParamStore

BB_MODEL = "global_blackboard"

# Scenario flag set with its fixed initial values.
INITIAL_FLAGS = {
    "ARRIVAL_FLG": False,
    "CONTINUE_FLG": True,
    "MOVING_FLG": True,
    "INITIAL_POSE_FLG": True,
    "SENSING_ARRIVAL_FLG": False,
    "SENSING_CHECK_MOUND_FLG": False,
    "SENSING_LOADED_FLG": False,
}


class TypeMismatch(Exception):
    pass


@dataclass
class BlackboardEntry:
    value: Any
    revision: int
    updated_at: float


def _check_type(key: str, old: Any, new: Any) -> None:
    # bool is not interchangeable with int here, hence exact type classes
    if old is None:
        return
    if type(old) is not type(new):
        raise TypeMismatch(
            f"{key}: held {type(old).__name__}, refusing {type(new).__name__}")


class BlackboardStore:
    """Linearizable per-key map; every operation is atomic under one lock."""

    def __init__(self, scope: str = "local"):
        self.scope = scope
        self._lock = threading.RLock()
        self._entries: dict[str, BlackboardEntry] = {}

    def get(self, key: str) -> Optional[BlackboardEntry]:
        with self._lock:
            e = self._entries.get(key)
            return BlackboardEntry(e.value, e.revision, e.updated_at) if e else None

    def set(self, key: str, value: Any, now: float = 0.0) -> int:
        with self._lock:
            e = self._entries.get(key)
            _check_type(key, e.value if e else None, value)
            if e is None:
                self._entries[key] = BlackboardEntry(value, 1, now)
                return 1
            e.value = value
            e.revision += 1
            e.updated_at = now
            return e.revision

    def clear(self, key: str) -> None:
        with self._lock:
            self._entries.pop(key, None)

    def keys(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def snapshot(self) -> dict:
        with self._lock:
            return {k: {"value": e.value, "revision": e.revision,
                        "updated_at": e.updated_at}
                    for k, e in sorted(self._entries.items())}


class GlobalBlackboard:
    """Global scope view persisted as dynamic parameter records.

    Key k lives as record (BB_MODEL, k) with payload {"value": v}; the
    blackboard revision is the record revision, so staleness is observable
    through the same counter everywhere.
    """

    scope = "global"

    def __init__(self, store: ParamStore):
        self._store = store
        self._lock = threading.RLock()

    def get(self, key: str) -> Optional[BlackboardEntry]:
        rec = self._store.query_parameter(BB_MODEL, key)
        if rec is None or "value" not in rec.payload:
            return None
        return BlackboardEntry(rec.payload["value"], rec.revision, rec.updated_at)

    def set(self, key: str, value: Any, now: float = 0.0) -> int:
        with self._lock:
            cur = self.get(key)
            _check_type(key, cur.value if cur else None, value)
            return self._store.upsert_parameter(BB_MODEL, key, "dynamic",
                                                {"value": value}, now)

    def set_if_changed(self, key: str, value: Any, now: float = 0.0) -> Optional[int]:
        """Write only when the value actually changes; None means skipped."""
        with self._lock:
            cur = self.get(key)
            if cur is not None and cur.value == value and type(cur.value) is type(value):
                return None
            return self.set(key, value, now)

    def keys(self) -> list[str]:
        return sorted(r.record_name for r in self._store.all_parameters()
                      if r.model_name == BB_MODEL)

    def snapshot(self) -> dict:
        out = {}
        for rec in self._store.all_parameters():
            if rec.model_name == BB_MODEL and "value" in rec.payload:
                out[rec.record_name] = {"value": rec.payload["value"],
                                        "revision": rec.revision,
                                        "updated_at": rec.updated_at}
        return dict(sorted(out.items()))

    def seed_flags(self, now: float = 0.0) -> None:
        for key, value in INITIAL_FLAGS.items():
            if self.get(key) is None:
                self.set(key, value, now)


# --- synchronization subtask servers -----------------------------------------
# Each reads its parameter record for the key (and optional literal value /
# expected value), then completes within one tick.

def _record_payload(ctx, goal: ActionGoal) -> Optional[dict]:
    rec = ctx.store.query_parameter(goal.model_name, goal.record_name)
    return None if rec is None else rec.payload


def _finish(goal: ActionGoal, ok: bool, error: str = "") -> None:
    action_transition(goal, "start")
    if ok:
        action_transition(goal, "succeed")
    else:
        goal.error = error
        action_transition(goal, "abort")


class BlackboardValueReader(SubtaskServer):
    """Copy global[key] onto the calling task's local blackboard."""

    name = "blackboard_value_reader"

    def tick(self, goal, ctx):
        payload = _record_payload(ctx, goal)
        if payload is None or "key" not in payload:
            _finish(goal, False, "parameter record absent or missing key")
            return
        key = payload["key"]
        entry = ctx.global_bb.get(key)
        if entry is None:
            _finish(goal, False, f"global key {key!r} absent")
            return
        ctx.local_bb.set(key, entry.value, ctx.now())
        _finish(goal, True)


class GlobalValueWriter(SubtaskServer):
    """Copy local[key] up to the global blackboard.

    The record may carry a literal "value"; it is placed on the local
    blackboard first, which is how tasks introduce flag values of their own.
    """

    name = "global_value_writer"

    def tick(self, goal, ctx):
        payload = _record_payload(ctx, goal)
        if payload is None or "key" not in payload:
            _finish(goal, False, "parameter record absent or missing key")
            return
        key = payload["key"]
        if "value" in payload:
            ctx.local_bb.set(key, payload["value"], ctx.now())
        entry = ctx.local_bb.get(key)
        if entry is None:
            _finish(goal, False, f"local key {key!r} absent")
            return
        ctx.global_bb.set_if_changed(key, entry.value, ctx.now())
        _finish(goal, True)


class BlackboardValueChecker(SubtaskServer):
    """Compare local[key] with the record's expected value.

    The outcome lands on the local blackboard under key+"_check"; a mismatch
    or an absent key aborts the goal.
    """

    name = "blackboard_value_checker"

    def tick(self, goal, ctx):
        payload = _record_payload(ctx, goal)
        if payload is None or "key" not in payload or "expected" not in payload:
            _finish(goal, False, "parameter record absent or missing key/expected")
            return
        key = payload["key"]
        entry = ctx.local_bb.get(key)
        matched = entry is not None and entry.value == payload["expected"]
        ctx.local_bb.set(key + "_check", matched, ctx.now())
        _finish(goal, matched, "" if matched else f"{key!r} mismatch or absent")


def register_blackboard_servers(registry) -> None:
    registry.register(BlackboardValueReader())
    registry.register(GlobalValueWriter())
    registry.register(BlackboardValueChecker())
