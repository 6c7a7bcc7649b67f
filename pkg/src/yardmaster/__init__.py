"""Deterministic construction-site simulator and behavior-tree task orchestrator.

A crawler dump and an excavator are simulated on a fixed-step clock, driven
by behavior-tree tasks that talk to subtask action servers over a CAN-style
command/telemetry boundary, and coordinated through a shared global
blackboard backed by a document store.
"""

__version__ = "0.1.0"
