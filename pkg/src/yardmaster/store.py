"""Embedded document store for task records and machine parameter records.

Two collections persisted as JSON-lines (tasks.jsonl, parameters.jsonl).
Record ids are a deterministic counter so that identical fixture loads
produce identical stores. Static parameters are frozen while any task runs;
dynamic parameters (sensing outputs, blackboard values) are writable anytime.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

TASK_FILE = "tasks.jsonl"
PARAM_FILE = "parameters.jsonl"

_TASK_REQUIRED = ("model_name", "task_id", "task_sequence")
_PARAM_REQUIRED = ("model_name", "type", "record_name")


class StoreError(Exception):
    pass


class DuplicateTaskId(StoreError):
    pass


class SchemaViolation(StoreError):
    pass


class StaticWriteWhileRunning(StoreError):
    pass


class FixtureParseError(StoreError):
    pass


@dataclass
class TaskRecord:
    id: int
    model_name: str
    task_id: int
    task_sequence: dict
    description: Optional[str] = None

    def to_json(self) -> dict:
        d = {"_id": self.id, "model_name": self.model_name,
             "task_id": self.task_id, "task_sequence": self.task_sequence}
        if self.description is not None:
            d["description"] = self.description
        return d


@dataclass
class ParameterRecord:
    id: int
    model_name: str
    type: str  # "static" | "dynamic"
    record_name: str
    payload: dict = field(default_factory=dict)
    revision: int = 1
    updated_at: float = 0.0

    def to_json(self) -> dict:
        return {"_id": self.id, "model_name": self.model_name, "type": self.type,
                "record_name": self.record_name, "payload": self.payload,
                "revision": self.revision, "updated_at": self.updated_at}


class ParamStore:
    """In-process store with file-backed flush/load.

    Readers and writers may interleave freely: every mutation swaps whole
    records under one lock, so a reader never sees a partial record.
    """

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root else None
        self._lock = threading.RLock()
        self._tasks: dict[int, TaskRecord] = {}
        self._params: dict[tuple[str, str], ParameterRecord] = {}
        self._next_id = 1
        self._running_tasks: set[int] = set()

    # --- execution guard ---------------------------------------------------
    def mark_running(self, task_id: int) -> None:
        with self._lock:
            self._running_tasks.add(task_id)

    def mark_stopped(self, task_id: int) -> None:
        with self._lock:
            self._running_tasks.discard(task_id)

    @property
    def any_running(self) -> bool:
        return bool(self._running_tasks)

    # --- tasks --------------------------------------------------------------
    def insert_task(self, model_name: str, task_id: int, task_sequence: dict,
                    description: Optional[str] = None) -> TaskRecord:
        with self._lock:
            if task_id in self._tasks:
                raise DuplicateTaskId(f"task_id {task_id} already present")
            if not model_name:
                raise SchemaViolation("model_name must be non-empty")
            rec = TaskRecord(self._take_id(), model_name, task_id,
                             task_sequence, description)
            self._tasks[task_id] = rec
            return rec

    def find_task(self, task_id: int) -> Optional[TaskRecord]:
        with self._lock:
            return self._tasks.get(task_id)

    def all_tasks(self) -> list[TaskRecord]:
        with self._lock:
            return sorted(self._tasks.values(), key=lambda r: r.task_id)

    # --- parameters -----------------------------------------------------------
    def query_parameter(self, model_name: str, record_name: str) -> Optional[ParameterRecord]:
        with self._lock:
            return self._params.get((model_name, record_name))

    def upsert_parameter(self, model_name: str, record_name: str, type: str,
                         payload: dict, now: float = 0.0) -> int:
        """Insert or replace a record; returns the new revision."""
        if not record_name:
            raise SchemaViolation("record_name is required")
        if not model_name:
            raise SchemaViolation("model_name is required")
        if type not in ("static", "dynamic"):
            raise SchemaViolation(f"type must be static|dynamic, got {type!r}")
        with self._lock:
            if type == "static" and self._running_tasks:
                raise StaticWriteWhileRunning(
                    f"static record ({model_name}, {record_name}) is frozen while "
                    f"tasks {sorted(self._running_tasks)} run")
            key = (model_name, record_name)
            existing = self._params.get(key)
            if existing is None:
                rec = ParameterRecord(self._take_id(), model_name, type,
                                      record_name, dict(payload), 1, now)
                self._params[key] = rec
                return rec.revision
            if existing.type == "static" and self._running_tasks:
                raise StaticWriteWhileRunning(
                    f"static record ({model_name}, {record_name}) is frozen")
            existing.type = type
            existing.payload = dict(payload)
            existing.revision += 1
            existing.updated_at = now
            return existing.revision

    def all_parameters(self) -> list[ParameterRecord]:
        with self._lock:
            return sorted(self._params.values(), key=lambda r: r.id)

    # --- persistence ------------------------------------------------------------
    def flush(self, root: Optional[Path] = None) -> None:
        root = Path(root) if root else self.root
        if root is None:
            raise StoreError("no root directory configured")
        root.mkdir(parents=True, exist_ok=True)
        with self._lock:
            with open(root / TASK_FILE, "w") as f:
                for rec in self.all_tasks():
                    f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            with open(root / PARAM_FILE, "w") as f:
                for rec in self.all_parameters():
                    f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    def load_fixture(self, path) -> dict:
        """Replace store contents with the fixture directory's collections.

        Explicit "_id"/"revision" fields are preserved (flush output reloads
        byte-identically); hand-written fixtures may omit them.
        """
        path = Path(path)
        if not path.exists():
            raise FixtureParseError(f"fixture path {path} does not exist")
        with self._lock:
            self._tasks.clear()
            self._params.clear()
            self._next_id = 1
            counts = {"tasks": 0, "parameters": 0}
            seen_ids: set[int] = set()

            def assign_id(raw) -> int:
                rid = raw.get("_id", self._next_id)
                if rid in seen_ids:
                    raise SchemaViolation(f"duplicate _id {rid}")
                seen_ids.add(rid)
                self._next_id = max(self._next_id, rid + 1)
                return rid

            task_file = path / TASK_FILE
            if task_file.exists():
                for raw in self._iter_jsonl(task_file):
                    missing = [k for k in _TASK_REQUIRED if k not in raw]
                    if missing:
                        raise SchemaViolation(f"task record missing {missing}")
                    if raw["task_id"] in self._tasks:
                        raise DuplicateTaskId(f"task_id {raw['task_id']} repeated")
                    rec = TaskRecord(assign_id(raw), raw["model_name"],
                                     raw["task_id"], raw["task_sequence"],
                                     raw.get("description"))
                    self._tasks[rec.task_id] = rec
                    counts["tasks"] += 1
            param_file = path / PARAM_FILE
            if param_file.exists():
                for raw in self._iter_jsonl(param_file):
                    missing = [k for k in _PARAM_REQUIRED if k not in raw]
                    if missing:
                        raise SchemaViolation(f"parameter record missing {missing}")
                    if raw["type"] not in ("static", "dynamic"):
                        raise SchemaViolation(f"bad type {raw['type']!r}")
                    key = (raw["model_name"], raw["record_name"])
                    if key in self._params:
                        raise SchemaViolation(f"duplicate parameter {key}")
                    rec = ParameterRecord(assign_id(raw), raw["model_name"],
                                          raw["type"], raw["record_name"],
                                          dict(raw.get("payload", {})),
                                          raw.get("revision", 1),
                                          raw.get("updated_at", 0.0))
                    self._params[key] = rec
                    counts["parameters"] += 1
            return counts

    @staticmethod
    def _iter_jsonl(path: Path):
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise FixtureParseError(f"{path.name}:{lineno}: {exc}") from exc

    def _take_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid
