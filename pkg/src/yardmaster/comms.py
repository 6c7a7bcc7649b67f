"""Machine boundary: CAN-style control/telemetry codec and the action protocol.

Commands travel down and telemetry travels up through per-machine FIFO queues
of 13-byte-max frames (29-bit id + up to 8 payload bytes). The byte layout is
an open catalog with explicit integer scaling so that independent
implementations can be checked against shared conformance vectors.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class CommsError(Exception):
    pass


class RangeOverflow(CommsError):
    """A field does not fit its wire integer after scaling."""


class UnknownMsgId(CommsError):
    pass


class DlcMismatch(CommsError):
    pass


class IllegalTransition(CommsError):
    pass


MAX_MSG_ID = 1 << 29


@dataclass(frozen=True)
class ControlFrame:
    """One frame on the wire: 29-bit id plus 0-8 payload bytes."""

    msg_id: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.msg_id < MAX_MSG_ID:
            raise RangeOverflow(f"msg_id 0x{self.msg_id:x} exceeds 29 bits")
        if len(self.payload) > 8:
            raise DlcMismatch(f"dlc {len(self.payload)} > 8")

    @property
    def dlc(self) -> int:
        return len(self.payload)

    def hex(self) -> str:
        return self.payload.hex()


# --- typed messages -------------------------------------------------------
# Engineering units everywhere; scaling to wire integers happens in the codec.

@dataclass(frozen=True)
class VelocityCmd:
    v: float = 0.0  # m/s, +forward
    w: float = 0.0  # rad/s, +ccw


@dataclass(frozen=True)
class VesselCmd:
    angle: float = 0.0  # rad, commanded tilt


@dataclass(frozen=True)
class JointVelCmd:
    joint: int = 0      # machine-relative joint index (zx200: 0=swing 1=boom 2=arm 3=bucket)
    vel: float = 0.0    # rad/s
    valve: int = 0      # permille opening, carried end to end


@dataclass(frozen=True)
class OdomTelemetry:
    v: float = 0.0
    w: float = 0.0


@dataclass(frozen=True)
class GnssTelemetry:
    lat: float = 0.0  # deg
    lon: float = 0.0  # deg


@dataclass(frozen=True)
class GnssAltTelemetry:
    alt: float = 0.0  # m


@dataclass(frozen=True)
class JointTelemetry:
    joint: int = 0
    angle: float = 0.0  # rad


@dataclass(frozen=True)
class EStop:
    pass


# --- catalog ---------------------------------------------------------------

_I16 = (-(1 << 15), (1 << 15) - 1)
_I32 = (-(1 << 31), (1 << 31) - 1)

# Vessel angle rides the wire in 0.01-degree units; its grid step in radians
# is the canonical decode value for one wire count.
VESSEL_ANGLE_STEP = math.pi / 18000.0
_RAD_TO_CDEG = 18000.0 / math.pi

# per field: (attr, struct code, to-wire multiplier, bounds, decode step or None)
# With step None the wire int decodes as iv / multiplier (exact power-of-ten
# divisors); otherwise as iv * step.
_CATALOG = {
    0x100: ("VelocityCmd", VelocityCmd, "down",
            [("v", "h", 1000.0, _I16, None), ("w", "h", 1000.0, _I16, None)]),
    0x101: ("VesselCmd", VesselCmd, "down",
            [("angle", "h", _RAD_TO_CDEG, _I16, VESSEL_ANGLE_STEP)]),
    0x110: ("JointVelCmd", JointVelCmd, "down",
            [("joint", "B", 1.0, (0, 255), None), ("vel", "h", 1000.0, _I16, None),
             ("valve", "h", 1.0, _I16, None)]),
    0x200: ("OdomTelemetry", OdomTelemetry, "up",
            [("v", "h", 1000.0, _I16, None), ("w", "h", 1000.0, _I16, None)]),
    0x201: ("GnssTelemetry", GnssTelemetry, "up",
            [("lat", "i", 1e7, _I32, None), ("lon", "i", 1e7, _I32, None)]),
    0x202: ("GnssAltTelemetry", GnssAltTelemetry, "up",
            [("alt", "i", 1000.0, _I32, None)]),
    0x210: ("JointTelemetry", JointTelemetry, "up",
            [("joint", "B", 1.0, (0, 255), None), ("angle", "i", 1e6, _I32, None)]),
    0x2FF: ("EStop", EStop, "down", []),
}

_CLASS_TO_ID = {cls: msg_id for msg_id, (_, cls, _, _) in _CATALOG.items()}
_NAME_TO_ID = {name: msg_id for msg_id, (name, _, _, _) in _CATALOG.items()}


def _to_wire(value, scale, bounds, attr):
    raw = value if scale == 1.0 else value * scale
    iv = int(round(raw))
    lo, hi = bounds
    if not lo <= iv <= hi:
        raise RangeOverflow(f"{attr}={value} scales to {iv}, outside [{lo}, {hi}]")
    return iv


def encode(message) -> ControlFrame:
    """Pack a typed message into its catalog frame (little-endian)."""
    msg_id = _CLASS_TO_ID.get(type(message))
    if msg_id is None:
        raise UnknownMsgId(f"no catalog entry for {type(message).__name__}")
    _, _, _, fields = _CATALOG[msg_id]
    fmt = "<" + "".join(code for _, code, _, _, _ in fields)
    raw = [_to_wire(getattr(message, attr), scale, bounds, attr)
           for attr, _, scale, bounds, _ in fields]
    return ControlFrame(msg_id, struct.pack(fmt, *raw))


def decode(frame: ControlFrame):
    """Unpack a frame back into its typed message."""
    entry = _CATALOG.get(frame.msg_id)
    if entry is None:
        raise UnknownMsgId(f"msg_id 0x{frame.msg_id:x} not in catalog")
    name, cls, _, fields = entry
    fmt = "<" + "".join(code for _, code, _, _, _ in fields)
    expected = struct.calcsize(fmt)
    if frame.dlc != expected:
        raise DlcMismatch(f"{name}: dlc {frame.dlc}, catalog says {expected}")
    raw = struct.unpack(fmt, frame.payload)
    kwargs = {}
    for (attr, _, scale, _, step), iv in zip(fields, raw):
        if scale == 1.0:
            kwargs[attr] = iv
        elif step is not None:
            kwargs[attr] = iv * step
        else:
            kwargs[attr] = iv / scale
    return cls(**kwargs)


def message_to_dict(message) -> dict:
    d = {"type": type(message).__name__}
    for attr in getattr(message, "__dataclass_fields__", {}):
        d[attr] = getattr(message, attr)
    return d


def message_from_dict(d: dict):
    msg_id = _NAME_TO_ID.get(d.get("type", ""))
    if msg_id is None:
        raise UnknownMsgId(f"unknown message type {d.get('type')!r}")
    cls = _CATALOG[msg_id][1]
    kwargs = {k: v for k, v in d.items() if k != "type"}
    return cls(**kwargs)


def conformance_vectors() -> list[dict]:
    """Canonical message set covering every catalog entry, with frozen hex."""
    messages = [
        VelocityCmd(0.0, 0.0),
        VelocityCmd(1.0, 0.1),
        VelocityCmd(-1.5, 0.5),
        VelocityCmd(0.033, -0.257),
        VelocityCmd(32.767, -32.768),
        VesselCmd(0.0),
        VesselCmd(math.pi / 4),
        VesselCmd(8700 * math.pi / 18000.0),
        JointVelCmd(0, 0.0, 0),
        JointVelCmd(1, 0.25, 500),
        JointVelCmd(3, -0.734, -1000),
        OdomTelemetry(0.512, -0.023),
        OdomTelemetry(-0.2, 0.0),
        GnssTelemetry(36.1234567, 140.0000001),
        GnssTelemetry(-12.0000005, -77.1234567),
        GnssAltTelemetry(10.123),
        GnssAltTelemetry(-2.5),
        JointTelemetry(0, 0.0),
        JointTelemetry(2, -1.234567),
        JointTelemetry(3, 2.000001),
        EStop(),
    ]
    out = []
    for m in messages:
        fr = encode(m)
        out.append({"message": message_to_dict(m),
                    "msg_id": fr.msg_id,
                    "expected_hex": fr.hex()})
    return out


def write_vectors(fp) -> int:
    n = 0
    for vec in conformance_vectors():
        fp.write(json.dumps(vec, sort_keys=True) + "\n")
        n += 1
    return n


# --- action protocol -------------------------------------------------------

class ActionState(Enum):
    PENDING = "PENDING"
    ACCEPTED = "ACCEPTED"
    EXECUTING = "EXECUTING"
    CANCELING = "CANCELING"
    SUCCEEDED = "SUCCEEDED"
    ABORTED = "ABORTED"
    CANCELED = "CANCELED"


TERMINAL_STATES = {ActionState.SUCCEEDED, ActionState.ABORTED, ActionState.CANCELED}

_ACTION_TRANSITIONS = {
    (ActionState.PENDING, "accept"): ActionState.ACCEPTED,
    (ActionState.ACCEPTED, "start"): ActionState.EXECUTING,
    (ActionState.ACCEPTED, "cancel_request"): ActionState.CANCELING,
    (ActionState.EXECUTING, "succeed"): ActionState.SUCCEEDED,
    (ActionState.EXECUTING, "abort"): ActionState.ABORTED,
    (ActionState.EXECUTING, "cancel_request"): ActionState.CANCELING,
    (ActionState.CANCELING, "cancel_done"): ActionState.CANCELED,
}

@dataclass
class ActionGoal:
    """One goal on a subtask server, with the leaf's (model, record) payload."""

    server: str
    model_name: str
    record_name: str
    goal_id: int = 0
    state: ActionState = ActionState.PENDING
    feedback: Optional[float] = None
    error: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


def action_transition(goal: ActionGoal, event: str) -> ActionState:
    nxt = _ACTION_TRANSITIONS.get((goal.state, event))
    if nxt is None:
        raise IllegalTransition(f"{event!r} not legal in {goal.state.value}")
    goal.state = nxt
    return nxt


class SubtaskServer:
    """Base for subtask action servers; one non-terminal goal per machine."""

    name = "subtask"

    def submit(self, goal: ActionGoal, ctx) -> bool:
        """Accept the goal (True) or reject it. Rejection leaves PENDING."""
        action_transition(goal, "accept")
        self.on_accept(goal, ctx)
        return True

    def on_accept(self, goal: ActionGoal, ctx) -> None:
        pass

    def tick(self, goal: ActionGoal, ctx) -> None:
        """Advance one simulation step. Must drive goal to a terminal state."""
        raise NotImplementedError

    def cancel(self, goal: ActionGoal, ctx) -> ActionState:
        """Synchronous cancel: safe-stop, then report CANCELED."""
        if goal.terminal:
            raise IllegalTransition(f"cancel on terminal goal {goal.state.value}")
        action_transition(goal, "cancel_request")
        self.on_cancel(goal, ctx)
        action_transition(goal, "cancel_done")
        return goal.state

    def on_cancel(self, goal: ActionGoal, ctx) -> None:
        pass


class SubtaskRegistry:
    """Name -> server map enforcing one active goal per (server, machine)."""

    def __init__(self):
        self._servers: dict[str, SubtaskServer] = {}
        self._active: dict[tuple[str, str], ActionGoal] = {}
        self._ctx: dict[int, object] = {}
        self._goal_ids = itertools.count(1)

    def register(self, server: SubtaskServer) -> None:
        if server.name in self._servers:
            raise ValueError(f"duplicate server {server.name!r}")
        self._servers[server.name] = server

    def lookup(self, name: str) -> Optional[SubtaskServer]:
        return self._servers.get(name)

    def names(self) -> list[str]:
        return sorted(self._servers)

    def open_goal(self, name: str, model_name: str, record_name: str, ctx) -> Optional[ActionGoal]:
        """Submit a goal; None means the server rejected it."""
        server = self._servers[name]
        key = (name, model_name)
        active = self._active.get(key)
        if active is not None and not active.terminal:
            return None
        goal = ActionGoal(server=name, model_name=model_name,
                          record_name=record_name,
                          goal_id=next(self._goal_ids))
        if not server.submit(goal, ctx):
            return None
        self._active[key] = goal
        self._ctx[goal.goal_id] = ctx
        return goal

    def active_goals(self) -> list[ActionGoal]:
        return sorted((g for g in self._active.values() if not g.terminal),
                      key=lambda g: g.goal_id)

    def tick_active(self) -> None:
        """Advance every non-terminal goal once, in goal-id order."""
        for goal in self.active_goals():
            self._servers[goal.server].tick(goal, self._ctx.get(goal.goal_id))
            if goal.terminal:
                self._ctx.pop(goal.goal_id, None)

    def tick_goal(self, goal: ActionGoal, ctx) -> None:
        if goal.terminal:
            return
        self._servers[goal.server].tick(goal, ctx)

    def cancel_goal(self, goal: ActionGoal, ctx) -> ActionState:
        state = self._servers[goal.server].cancel(goal, ctx)
        self._ctx.pop(goal.goal_id, None)
        return state


# --- per-machine frame queues ----------------------------------------------

class MachineBus:
    """Ordered command-down / telemetry-up queues for one machine.

    Once an EStop frame has been enqueued, command frames enqueued after it
    that carry nonzero motion are never delivered, until rearm().
    """

    def __init__(self, machine: str):
        self.machine = machine
        self._down: deque[ControlFrame] = deque()
        self._up: deque[ControlFrame] = deque()
        self.estopped = False  # latched on the machine side at delivery

    # command direction
    def send_command(self, message) -> ControlFrame:
        frame = encode(message)
        self._down.append(frame)
        return frame

    def drain_commands(self) -> list:
        """Decode and deliver pending commands in FIFO order."""
        out = []
        while self._down:
            frame = self._down.popleft()
            message = decode(frame)
            if isinstance(message, EStop):
                self.estopped = True
            elif self.estopped and _is_motion(message) and not _is_zero(message):
                continue  # suppressed by the latch
            out.append(message)
        return out

    # telemetry direction
    def send_telemetry(self, message) -> ControlFrame:
        frame = encode(message)
        self._up.append(frame)
        return frame

    def drain_telemetry(self) -> list:
        out = []
        while self._up:
            out.append(decode(self._up.popleft()))
        return out

    def rearm(self) -> None:
        self.estopped = False


def _is_motion(message) -> bool:
    return isinstance(message, (VelocityCmd, JointVelCmd))


def _is_zero(message) -> bool:
    if isinstance(message, VelocityCmd):
        return message.v == 0.0 and message.w == 0.0
    if isinstance(message, JointVelCmd):
        return message.vel == 0.0
    return True
