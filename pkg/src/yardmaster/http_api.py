"""HTTP/JSON control surface plus the WebSocket event stream.

The stepping loop runs in a background thread; handlers talk to the session
through its boundary-locked methods, so every response reflects a whole step.
GET /events upgrades to a WebSocket that replays nothing and pushes every new
event (one JSON object per step or transition) as it is logged.
"""

from __future__ import annotations

import asyncio
import threading
import time

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .orchestrator import MachineBusy, ParseError, Session, TaskNotFound


class SessionRunner:
    """Steps a session continuously: real-time pacing or as fast as possible."""

    def __init__(self, session: Session, rate: str = "real"):
        self.session = session
        self.rate = rate
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _run(self) -> None:
        dt = self.session.cfg.dt
        next_due = time.perf_counter()
        while not self._stop.is_set():
            self.session.step()
            if self.rate == "real":
                next_due += dt
                delay = next_due - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_due = time.perf_counter()


def build_app(session: Session, runner: SessionRunner | None = None) -> FastAPI:
    app = FastAPI(title="yardmaster", version="0.1.0")
    app.state.session = session
    app.state.runner = runner

    @app.post("/tasks/{task_id}/start")
    def start_task(task_id: int):
        try:
            return session.start_task(task_id)
        except TaskNotFound as exc:
            raise HTTPException(status_code=404,
                                detail={"error": "TaskNotFound",
                                        "message": str(exc)})
        except MachineBusy as exc:
            raise HTTPException(status_code=409,
                                detail={"error": "MachineBusy",
                                        "message": str(exc)})
        except ParseError as exc:
            raise HTTPException(status_code=422,
                                detail={"error": "ParseError",
                                        "message": str(exc)})

    @app.post("/emergency_stop")
    def emergency_stop():
        reports = session.emergency_stop()
        return {"canceled": [r.to_json() for r in reports],
                "estopped": session.estopped}

    @app.get("/state")
    def get_state():
        return session.get_state()

    @app.get("/blackboard")
    def get_blackboard():
        return session.get_blackboard()

    @app.post("/blackboard/{key}")
    def set_flag(key: str, body: dict):
        if "value" not in body:
            raise HTTPException(status_code=422,
                                detail={"error": "MissingValue",
                                        "message": "body needs a value field"})
        try:
            revision = session.set_flag(key, body["value"])
        except Exception as exc:  # TypeMismatch and friends surface as 409
            raise HTTPException(status_code=409,
                                detail={"error": type(exc).__name__,
                                        "message": str(exc)})
        return {"key": key, "value": body["value"], "revision": revision}

    @app.get("/tasks")
    def list_tasks():
        return {"tasks": session.list_tasks()}

    @app.get("/terrain")
    def get_terrain():
        return session.get_terrain()

    @app.websocket("/events")
    async def events(ws: WebSocket):
        await ws.accept()
        cursor = len(session.events)
        await ws.send_json({"type": "hello", "cursor": cursor,
                            "t": session.world.t})
        try:
            while True:
                tail = session.events[cursor:]
                for event in tail:
                    await ws.send_json(event)
                cursor += len(tail)
                await asyncio.sleep(0.02)
        except WebSocketDisconnect:
            return

    return app


def serve(session: Session, host: str = "127.0.0.1", port: int = 8080,
          rate: str = "real") -> None:
    import uvicorn

    runner = SessionRunner(session, rate=rate)
    app = build_app(session, runner)
    runner.start()
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        runner.stop()
