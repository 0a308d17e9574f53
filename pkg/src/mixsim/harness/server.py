"""Live session server bridging the simulation to cockpit clients.

One WebSocket per session.  The client drives the vehicle marked
``external`` in the scenario; the other vehicle is controlled either by
the full decision pipeline or by a scripted human surrogate, per the
session's hidden role.  The client learns the role only in the
verdict_ack frame, after submitting its guess.

Pacing modes: ``realtime`` sleeps to wall-clock dt per tick, ``free``
runs flat out, and ``lockstep`` steps exactly once per inbound client
frame (used by deterministic tests).  State frames are sent
synchronously: a slow client blocks the loop rather than losing frames.
"""

from __future__ import annotations

import asyncio
import copy
import json
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from ..simulation import ExternalVehicle, World, load_scenario
from .records import GUESSES, SessionRecord, append_record

PACING_MODES = ("realtime", "free", "lockstep")
_DISCONNECT = {"type": "__disconnect__"}


def prepare_document(document: dict, role: str, seed: int | None) -> dict:
    """Assign the non-client vehicle's controller according to the role."""
    doc = copy.deepcopy(document)
    rng = np.random.default_rng(seed)
    for entry in doc["vehicles"]:
        if entry.get("controller") == "external":
            continue
        if role == "model":
            entry["controller"] = "proposed"
            entry.pop("style", None)
        else:
            entry["controller"] = "scripted"
            entry["style"] = str(rng.choice(("conservative", "aggressive")))
    return doc


def state_frame(world: World) -> dict:
    return {
        "type": "state",
        "tick": world.tick,
        "t": round(world.t, 9),
        "vehicles": [
            {
                "id": vid,
                "x": float(world.routes[vid].path.offset_point(rt.s, rt.l)[0]),
                "y": float(world.routes[vid].path.offset_point(rt.s, rt.l)[1]),
                "phi": float(world.routes[vid].path.heading_at(rt.s)),
                "v": rt.v,
                "a": rt.a,
            }
            for vid, rt in sorted(world.vehicles.items())
        ],
        "ehmi": [m.as_dict() for m in world._tick_ehmi],
    }


def _check_verdict(msg: dict) -> str | None:
    """Returns a rejection reason, or None when the verdict is valid."""
    if msg.get("guess") not in GUESSES:
        return f"guess must be one of {list(GUESSES)}"
    for name in ("confidence", "naturalness"):
        val = msg.get(name)
        if isinstance(val, bool) or not isinstance(val, int) or not 1 <= val <= 5:
            return f"{name} must be an integer in [1, 5]"
    return None


class SessionHub:
    """Configuration shared by all sessions served by one app."""

    def __init__(self, document: dict, role: str = "model",
                 pacing: str = "lockstep", log_path: str | Path | None = None,
                 trace_dir: str | Path | None = None, seed: int | None = None) -> None:
        if pacing not in PACING_MODES:
            raise ValueError(f"pacing must be one of {PACING_MODES}")
        if role not in ("model", "human", "random"):
            raise ValueError("role must be 'model', 'human', or 'random'")
        load_scenario(document)  # validate early
        self.document = document
        self.role = role
        self.pacing = pacing
        self.log_path = Path(log_path) if log_path else None
        self.trace_dir = Path(trace_dir) if trace_dir else None
        self.seed = seed
        self._sessions = 0
        self._role_rng = np.random.default_rng(seed)

    def next_session(self) -> tuple[str, str, int | None]:
        self._sessions += 1
        role = self.role
        if role == "random":
            role = str(self._role_rng.choice(("model", "human")))
        seed = None if self.seed is None else self.seed + self._sessions - 1
        return f"s{self._sessions:04d}-{uuid.uuid4().hex[:8]}", role, seed


async def run_session(ws: WebSocket, hub: SessionHub) -> None:
    session_id, role, seed = hub.next_session()
    record = SessionRecord(session_id=session_id, role=role, started_at=time.time())
    doc = prepare_document(hub.document, role, seed)
    world = World(load_scenario(doc), seed=seed)
    externals = [rt.controller for rt in world.vehicles.values()
                 if isinstance(rt.controller, ExternalVehicle)]
    ext = externals[0] if externals else None

    def handle_control(msg) -> dict | None:
        """Apply a control frame; returns a diagnostic frame if malformed."""
        if not isinstance(msg, dict) or msg.get("type") != "control":
            return {"type": "diagnostic", "reason": "expected a control frame"}
        accel = msg.get("accel")
        if isinstance(accel, bool) or not isinstance(accel, (int, float)):
            return {"type": "diagnostic", "reason": "control.accel must be a number"}
        if ext is not None:
            ext.set_command(float(accel))
        return None

    try:
        await ws.send_json(state_frame(world))
        if hub.pacing == "lockstep":
            while not world.done:
                msg = await ws.receive_json()
                diag = handle_control(msg)
                if diag is not None:
                    await ws.send_json(diag)
                world.step()
                await ws.send_json(state_frame(world))
        else:
            inbox: asyncio.Queue = asyncio.Queue()

            async def pump() -> None:
                try:
                    while True:
                        inbox.put_nowait(await ws.receive_json())
                except WebSocketDisconnect:
                    inbox.put_nowait(_DISCONNECT)

            task = asyncio.create_task(pump())
            next_wall = time.monotonic()
            try:
                while not world.done:
                    latest = None
                    while not inbox.empty():
                        msg = inbox.get_nowait()
                        if msg is _DISCONNECT:
                            raise WebSocketDisconnect(code=1006)
                        latest = msg
                    if latest is not None:
                        diag = handle_control(latest)
                        if diag is not None:
                            await ws.send_json(diag)
                    world.step()
                    await ws.send_json(state_frame(world))
                    if hub.pacing == "realtime":
                        next_wall += world.config.sim.dt
                        delay = next_wall - time.monotonic()
                        if delay > 0:
                            await asyncio.sleep(delay)
                        else:
                            next_wall = time.monotonic()
            finally:
                task.cancel()

        await ws.send_json({
            "type": "episode_end",
            "t": round(world.t, 9),
            "collision": world.collision,
            "fault": world.fault,
        })

        while True:
            msg = await ws.receive_json()
            if not isinstance(msg, dict) or msg.get("type") != "verdict":
                await ws.send_json({"type": "diagnostic",
                                    "reason": "episode is over; expected a verdict frame"})
                continue
            reason = _check_verdict(msg)
            if reason is not None:
                await ws.send_json({"type": "error", "reason": reason})
                continue
            record.guess = msg["guess"]
            record.confidence = msg["confidence"]
            record.naturalness = msg["naturalness"]
            record.ended_at = time.time()
            break
        await ws.send_json({"type": "verdict_ack", "role": role})
    except WebSocketDisconnect:
        record.aborted = True
        record.ended_at = time.time()
    finally:
        if hub.trace_dir is not None:
            hub.trace_dir.mkdir(parents=True, exist_ok=True)
            trace_path = hub.trace_dir / f"{session_id}.jsonl"
            with open(trace_path, "w") as fh:
                for row in world.trace:
                    fh.write(json.dumps(row) + "\n")
            record.trace_path = str(trace_path)
        if hub.log_path is not None:
            append_record(hub.log_path, record)


def create_app(document: dict, role: str = "model", pacing: str = "lockstep",
               log_path: str | Path | None = None,
               trace_dir: str | Path | None = None,
               seed: int | None = None) -> FastAPI:
    hub = SessionHub(document, role=role, pacing=pacing, log_path=log_path,
                     trace_dir=trace_dir, seed=seed)
    app = FastAPI(title="mixsim session server")
    app.state.hub = hub

    @app.get("/healthz")
    def healthz() -> dict:
        return {"ok": True, "sessions": hub._sessions}

    @app.websocket("/session")
    async def session_ws(ws: WebSocket) -> None:
        await ws.accept()
        await run_session(ws, hub)
        try:
            await ws.close()
        except RuntimeError:
            pass

    return app


def serve(document: dict, port: int = 8700, host: str = "127.0.0.1",
          role: str = "model", pacing: str = "realtime",
          log_path: str | Path | None = None,
          trace_dir: str | Path | None = None, seed: int | None = None) -> None:
    import uvicorn

    app = create_app(document, role=role, pacing=pacing, log_path=log_path,
                     trace_dir=trace_dir, seed=seed)
    uvicorn.run(app, host=host, port=port, log_level="warning")
