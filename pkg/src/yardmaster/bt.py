"""Behavior-tree engine: parsing, ticking, leaf/action bridging, cancel.

Trees are parsed from task-sequence JSON, ticked by one logical executor at
whatever rate the caller owns, and talk to the world exclusively through
subtask action servers and the blackboards carried in the execution context.
Composite nodes keep memory between ticks; a finished tree must be
re-instantiated to run again, except that Retry explicitly resets its child
between attempts.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .blackboard import BlackboardStore
from .comms import ActionGoal, ActionState, SubtaskRegistry


class BtStatus(Enum):
    IDLE = "IDLE"
    RUNNING = "RUNNING"
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    CANCELED = "CANCELED"


TERMINAL = {BtStatus.SUCCESS, BtStatus.FAILURE, BtStatus.CANCELED}

KINDS = ("Sequence", "Fallback", "Parallel", "Retry", "Leaf", "BlackboardGate")


class BtError(Exception):
    pass


class MalformedDocument(BtError):
    pass


class UnknownNodeKind(BtError):
    pass


class MixedMachines(BtError):
    pass


class EmptyTree(BtError):
    pass


class UnregisteredSubtask(BtError):
    pass


@dataclass(frozen=True)
class LeafParams:
    model_name: str
    record_name: str
    subtask_name: str


class BtNode:
    """One tree node plus its per-execution runtime state."""

    def __init__(self, kind: str, children=None, params: Optional[LeafParams] = None,
                 threshold: Optional[int] = None, max_attempts: Optional[int] = None,
                 gate_key: Optional[str] = None, gate_expected: Any = None):
        self.kind = kind
        self.children: list[BtNode] = children or []
        self.params = params
        self.threshold = threshold
        self.max_attempts = max_attempts
        self.gate_key = gate_key
        self.gate_expected = gate_expected
        self.node_id = -1
        self.status = BtStatus.IDLE
        self.cursor = 0          # Sequence/Fallback memory
        self.attempts_done = 0   # Retry
        self.goal: Optional[ActionGoal] = None  # Leaf

    @property
    def label(self) -> str:
        if self.kind == "Leaf" and self.params:
            return f"Leaf#{self.node_id}({self.params.subtask_name})"
        return f"{self.kind}#{self.node_id}"

    def reset(self) -> None:
        self.status = BtStatus.IDLE
        self.cursor = 0
        self.attempts_done = 0
        self.goal = None
        for child in self.children:
            child.reset()

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class ExecutionContext:
    """Everything a tick needs: registry, blackboards, store, world, clock."""

    registry: SubtaskRegistry
    global_bb: Any
    local_bb: BlackboardStore
    store: Any = None
    world: Any = None
    task_id: int = 0
    model_name: str = ""
    clock: Callable[[], float] = lambda: 0.0
    emit: Callable[[dict], None] = lambda event: None

    def now(self) -> float:
        return self.clock()


@dataclass
class TaskTree:
    root: BtNode
    model_name: str
    task_id: int = 0
    local_bb: BlackboardStore = field(default_factory=lambda: BlackboardStore("local"))

    @property
    def status(self) -> BtStatus:
        return self.root.status

    def nodes(self) -> list[BtNode]:
        return list(self.root.walk())


# --- parsing -----------------------------------------------------------------

def parse_task_sequence(doc) -> TaskTree:
    """Build a TaskTree from a task-sequence document (dict or JSON string)."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDocument("document root must be an object")
    root_doc = doc.get("task_sequence")
    if root_doc is None:
        raise EmptyTree("document carries no task_sequence")
    root = _parse_node(root_doc, path="task_sequence")

    models = {n.params.model_name for n in root.walk() if n.kind == "Leaf"}
    if len(models) > 1:
        raise MixedMachines(f"one machine per task, found {sorted(models)}")
    for i, node in enumerate(root.walk()):
        node.node_id = i
    return TaskTree(root=root, model_name=models.pop() if models else "")


def _parse_node(raw, path: str) -> BtNode:
    if not isinstance(raw, dict):
        raise MalformedDocument(f"{path}: node must be an object")
    kind = raw.get("kind")
    if kind is None:
        raise MalformedDocument(f"{path}: missing 'kind'")
    if kind not in KINDS:
        raise UnknownNodeKind(f"{path}: unknown node kind {kind!r}")
    children_raw = raw.get("children") or []
    children = [_parse_node(c, f"{path}.children[{i}]")
                for i, c in enumerate(children_raw)]

    if kind == "Leaf":
        if children:
            raise MalformedDocument(f"{path}: Leaf takes no children")
        params = raw.get("params") or {}
        missing = [k for k in ("model_name", "record_name", "subtask_name")
                   if not params.get(k)]
        if missing:
            raise MalformedDocument(f"{path}: Leaf params missing {missing}")
        return BtNode("Leaf", params=LeafParams(params["model_name"],
                                                params["record_name"],
                                                params["subtask_name"]))
    if kind == "BlackboardGate":
        if children:
            raise MalformedDocument(f"{path}: BlackboardGate takes no children")
        params = raw.get("params") or {}
        if "key" not in params or "expected" not in params:
            raise MalformedDocument(f"{path}: BlackboardGate needs key and expected")
        return BtNode("BlackboardGate", gate_key=params["key"],
                      gate_expected=params["expected"])

    if not children:
        raise MalformedDocument(f"{path}: {kind} needs at least one child")
    if kind == "Parallel":
        threshold = raw.get("threshold")
        if not isinstance(threshold, int) or not 1 <= threshold <= len(children):
            raise MalformedDocument(
                f"{path}: Parallel threshold must be in [1, {len(children)}]")
        return BtNode("Parallel", children=children, threshold=threshold)
    if kind == "Retry":
        max_attempts = raw.get("max_attempts")
        if len(children) != 1:
            raise MalformedDocument(f"{path}: Retry takes exactly one child")
        if not isinstance(max_attempts, int):
            raise MalformedDocument(f"{path}: Retry needs integer max_attempts "
                                    "(<= 0 means unbounded)")
        return BtNode("Retry", children=children, max_attempts=max_attempts)
    return BtNode(kind, children=children)


# --- ticking -----------------------------------------------------------------

def tick(tree: TaskTree, ctx: ExecutionContext) -> BtStatus:
    """Advance the tree one tick; idempotent once the root is terminal."""
    if tree.root.status in TERMINAL:
        return tree.root.status
    return _tick_node(tree.root, ctx)


def _tick_node(node: BtNode, ctx: ExecutionContext) -> BtStatus:
    handler = _HANDLERS[node.kind]
    status = handler(node, ctx)
    node.status = status
    return status


def _tick_sequence(node: BtNode, ctx) -> BtStatus:
    while node.cursor < len(node.children):
        status = _tick_node(node.children[node.cursor], ctx)
        if status is BtStatus.SUCCESS:
            node.cursor += 1
            continue
        return status  # RUNNING, FAILURE or CANCELED stop the scan
    return BtStatus.SUCCESS


def _tick_fallback(node: BtNode, ctx) -> BtStatus:
    while node.cursor < len(node.children):
        status = _tick_node(node.children[node.cursor], ctx)
        if status is BtStatus.FAILURE:
            node.cursor += 1
            continue
        return status
    return BtStatus.FAILURE


def _tick_parallel(node: BtNode, ctx) -> BtStatus:
    for child in node.children:
        if child.status not in TERMINAL:
            _tick_node(child, ctx)
    succeeded = sum(c.status is BtStatus.SUCCESS for c in node.children)
    finished = sum(c.status in TERMINAL for c in node.children)
    if succeeded >= node.threshold:
        _halt_children(node, ctx)
        return BtStatus.SUCCESS
    possible = succeeded + (len(node.children) - finished)
    if possible < node.threshold:
        _halt_children(node, ctx)
        return BtStatus.FAILURE
    return BtStatus.RUNNING


def _tick_retry(node: BtNode, ctx) -> BtStatus:
    child = node.children[0]
    status = _tick_node(child, ctx)
    if status is BtStatus.FAILURE:
        node.attempts_done += 1
        if node.max_attempts > 0 and node.attempts_done >= node.max_attempts:
            return BtStatus.FAILURE
        child.reset()
        return BtStatus.RUNNING
    return status


def _tick_gate(node: BtNode, ctx) -> BtStatus:
    entry = ctx.local_bb.get(node.gate_key)
    ok = entry is not None and entry.value == node.gate_expected
    return BtStatus.SUCCESS if ok else BtStatus.FAILURE


_LEAF_STATUS = {
    ActionState.PENDING: BtStatus.FAILURE,   # rejected before acceptance
    ActionState.ACCEPTED: BtStatus.RUNNING,
    ActionState.EXECUTING: BtStatus.RUNNING,
    ActionState.CANCELING: BtStatus.RUNNING,
    ActionState.SUCCEEDED: BtStatus.SUCCESS,
    ActionState.ABORTED: BtStatus.FAILURE,
    ActionState.CANCELED: BtStatus.CANCELED,
}


def _tick_leaf(node: BtNode, ctx) -> BtStatus:
    params = node.params
    if node.goal is None:
        if ctx.registry.lookup(params.subtask_name) is None:
            raise UnregisteredSubtask(f"{node.label}: no server named "
                                      f"{params.subtask_name!r}")
        goal = ctx.registry.open_goal(params.subtask_name, params.model_name,
                                      params.record_name, ctx)
        if goal is None:
            ctx.emit({"type": "goal_rejected", "node": node.label,
                      "server": params.subtask_name})
            return BtStatus.FAILURE
        node.goal = goal
        ctx.emit({"type": "goal_opened", "node": node.label,
                  "server": params.subtask_name, "goal_id": goal.goal_id})
        return BtStatus.RUNNING
    return _LEAF_STATUS[node.goal.state]


_HANDLERS = {
    "Sequence": _tick_sequence,
    "Fallback": _tick_fallback,
    "Parallel": _tick_parallel,
    "Retry": _tick_retry,
    "Leaf": _tick_leaf,
    "BlackboardGate": _tick_gate,
}


def _halt_children(node: BtNode, ctx) -> None:
    """Stop still-running children once a Parallel has resolved."""
    for child in node.children:
        if child.status is BtStatus.RUNNING:
            _cancel_subtree(child, ctx, report=None)


# --- cancel ------------------------------------------------------------------

@dataclass
class CancelEvent:
    seq: int
    node_id: int
    label: str
    phase: str  # "issued" | "completed"
    sim_time: float


@dataclass
class LeafCancelOutcome:
    node_id: int
    server: str
    goal_id: int
    result: str


@dataclass
class CancelReport:
    task_id: int
    not_running: bool = False
    events: list[CancelEvent] = field(default_factory=list)
    leaf_outcomes: list[LeafCancelOutcome] = field(default_factory=list)

    def order(self) -> list[str]:
        return [f"{e.label}:{e.phase}" for e in self.events]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "not_running": self.not_running,
            "events": [{"seq": e.seq, "node_id": e.node_id, "label": e.label,
                        "phase": e.phase, "sim_time": e.sim_time}
                       for e in self.events],
            "leaf_outcomes": [{"node_id": o.node_id, "server": o.server,
                               "goal_id": o.goal_id, "result": o.result}
                              for o in self.leaf_outcomes],
        }


def cancel(tree: TaskTree, ctx: ExecutionContext) -> CancelReport:
    """Cancel a running tree: requests flow root-to-leaf, results flow back.

    Every RUNNING leaf forwards the cancel to its server and waits for the
    cancel result before its ancestors complete, so the report's completion
    order is leaf-to-root.
    """
    report = CancelReport(task_id=tree.task_id)
    if tree.root.status is not BtStatus.RUNNING:
        report.not_running = True
        return report
    seq = itertools.count()
    _cancel_subtree(tree.root, ctx, report, seq)
    return report


def _cancel_subtree(node: BtNode, ctx, report: Optional[CancelReport],
                    seq=None) -> None:
    if report is not None:
        report.events.append(CancelEvent(next(seq), node.node_id, node.label,
                                         "issued", ctx.now()))
    for child in node.children:
        _cancel_subtree(child, ctx, report, seq)
    if node.kind == "Leaf" and node.goal is not None and not node.goal.terminal:
        state = ctx.registry.cancel_goal(node.goal, ctx)
        if report is not None:
            report.leaf_outcomes.append(LeafCancelOutcome(
                node.node_id, node.goal.server, node.goal.goal_id, state.value))
    if node.status is BtStatus.RUNNING:
        node.status = BtStatus.CANCELED
    if report is not None:
        report.events.append(CancelEvent(next(seq), node.node_id, node.label,
                                         "completed", ctx.now()))
