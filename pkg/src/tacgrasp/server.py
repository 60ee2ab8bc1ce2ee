"""WebSocket session server exposing the simulated gripper for teleoperation.

One interactive session at a time drives a fresh simulated episode. The sim
advances 8 ticks per 50 ms wall frame (the internal 160 Hz rate decimated to
a 20 Hz state stream). Messages are line-delimited JSON:

  client -> server
    {"type": "cmd", "theta_target": <deg>}
    {"type": "disturb", "kind": "water"|"pull"|"vibration",
     "magnitude": <num>, "duration_s": <num>}
    {"type": "record", "action": "start", "scenario": "gp"|"stab"|"ga",
     "frames": <optional tick count for auto stop>}
    {"type": "record", "action": "stop"}

  server -> client
    {"type": "state", "t": tick, "theta": deg, "taxels": [32 floats],
     "force_n": N, "fill_g": g, "dropped": bool, "stable": bool}
    {"type": "ack", "seq": n, ...}          one per accepted command, in order
    {"type": "record", "action": "saved", "path": str, "frames": n}
    {"type": "error", "reason": str}        malformed input; session continues

Commands take effect on the tick boundary immediately after receipt and are
acknowledged exactly once, in arrival order. State messages are best-effort:
when the client cannot keep up only the newest state is kept. Recording
captures every internal tick (not just streamed ones) into a dataset file
under the workspace data directory.
"""

from __future__ import annotations

import asyncio
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io, sim, stability, tactile
from .catalog import ObjectSpec

FRAME_TICKS = 8
FRAME_PERIOD_S = FRAME_TICKS / sim.TICK_HZ

_RECORD_KINDS = ("gp", "stab", "ga")


@dataclass
class _Outbox:
    """Prioritized outbound channel: replies reliable, states latest-wins."""

    reliable: asyncio.Queue = field(default_factory=asyncio.Queue)
    state: str | None = None
    wakeup: asyncio.Event = field(default_factory=asyncio.Event)

    def send_reliable(self, payload: dict) -> None:
        self.reliable.put_nowait(json.dumps(payload))
        self.wakeup.set()

    def send_state(self, payload: dict) -> None:
        self.state = json.dumps(payload)
        self.wakeup.set()

    def take_state(self) -> str | None:
        msg, self.state = self.state, None
        return msg


@dataclass
class _Recording:
    kind: str
    auto_stop_frames: int | None
    frames: list = field(default_factory=list)
    prev_taxels: np.ndarray | None = None
    prev_theta: float | None = None


class _Session:
    """State machine for one connected client."""

    def __init__(self, obj: ObjectSpec, seed: int, out_root, noise: bool,
                 estimator=None, te: float | None = None, index: int = 1):
        self.obj = obj
        self.seed = int(seed)
        self.out_root = Path(out_root)
        self.noise = noise
        self.estimator = estimator
        self.te = te
        self.index = int(index)
        self.state = sim.reset(obj, self.seed)
        self.seq = 0
        self.recording: _Recording | None = None

    # ---- message handling ----------------------------------------------

    def handle(self, raw: str) -> list[dict]:
        """Apply one client line; returns the replies it produced."""
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as exc:
            return [{"type": "error", "reason": f"invalid JSON: {exc.msg}"}]
        if not isinstance(msg, dict):
            return [{"type": "error", "reason": "message must be a JSON object"}]
        kind = msg.get("type")
        if kind == "cmd":
            return self._handle_cmd(msg)
        if kind == "disturb":
            return self._handle_disturb(msg)
        if kind == "record":
            return self._handle_record(msg)
        return [{"type": "error", "reason": f"unknown message type {kind!r}"}]

    def _ack(self, **extra) -> dict:
        self.seq += 1
        return {"type": "ack", "seq": self.seq, **extra}

    def _handle_cmd(self, msg: dict) -> list[dict]:
        target = msg.get("theta_target")
        if not isinstance(target, (int, float)) or not math.isfinite(target):
            return [{"type": "error", "reason": "cmd needs a finite theta_target"}]
        self.state = sim.set_target_angle(self.state, float(target))
        return [self._ack(theta_target=self.state.theta_target_deg)]

    def _handle_disturb(self, msg: dict) -> list[dict]:
        kind = msg.get("kind")
        magnitude = msg.get("magnitude")
        duration = msg.get("duration_s")
        if not isinstance(magnitude, (int, float)) or not math.isfinite(magnitude):
            return [{"type": "error", "reason": "disturb needs a finite magnitude"}]
        if not isinstance(duration, (int, float)) or not math.isfinite(duration):
            return [{"type": "error", "reason": "disturb needs a finite duration_s"}]
        try:
            event = sim.DisturbanceEvent(
                kind=str(kind), magnitude=float(magnitude), duration_s=float(duration)
            )
            self.state = sim.inject_disturbance(self.state, event)
        except Exception as exc:  # invalid kind/range or dropped episode
            return [{"type": "error", "reason": str(exc)}]
        return [self._ack(kind=event.kind)]

    def _handle_record(self, msg: dict) -> list[dict]:
        action = msg.get("action")
        if action == "start":
            if self.recording is not None:
                return [{"type": "error", "reason": "recording already active"}]
            scenario = msg.get("scenario")
            if scenario not in _RECORD_KINDS:
                return [{
                    "type": "error",
                    "reason": f"record scenario must be one of {_RECORD_KINDS}",
                }]
            frames = msg.get("frames")
            if frames is not None and (not isinstance(frames, int) or frames < 1):
                return [{"type": "error",
                         "reason": "record frames must be a positive integer"}]
            self.recording = _Recording(kind=scenario, auto_stop_frames=frames)
            return [self._ack(start_tick=self.state.t_tick + 1)]
        if action == "stop":
            if self.recording is None:
                return [{"type": "error", "reason": "no active recording"}]
            path, count = self._write_recording()
            return [self._ack(path=str(path), frames=count)]
        return [{"type": "error", "reason": f"unknown record action {action!r}"}]

    # ---- simulation ------------------------------------------------------

    def tick(self) -> dict | None:
        """Advance one tick; returns a saved-recording notice when auto-stop fires."""
        self.state = sim.step(self.state)
        if self.recording is None:
            return None
        rec = self.recording
        taxels = tactile.render_taxels(self.state, noise=self.noise).values
        theta = self.state.gripper.theta_deg
        ds = np.zeros_like(taxels) if rec.prev_taxels is None else taxels - rec.prev_taxels
        dtheta = 0.0 if rec.prev_theta is None else theta - rec.prev_theta
        rec.frames.append(
            data_io.FrameRecord(
                t_tick=self.state.t_tick,
                s=taxels,
                theta_deg=theta,
                pose=np.asarray(self.state.pose, dtype=float),
                ds=ds,
                dtheta_deg=dtheta,
                label="n/a",
            )
        )
        rec.prev_taxels = taxels
        rec.prev_theta = theta
        if rec.auto_stop_frames is not None and len(rec.frames) >= rec.auto_stop_frames:
            path, count = self._write_recording()
            return {"type": "record", "action": "saved",
                    "path": str(path), "frames": count}
        return None

    def _write_recording(self) -> tuple[Path, int]:
        rec = self.recording
        self.recording = None
        start = rec.frames[0].t_tick if rec.frames else self.state.t_tick
        path = (self.out_root / "data" / rec.kind
                / f"teleop_{self.obj.name}_s{self.index}_t{start}.tsv")
        header = data_io.DatasetHeader(
            kind=rec.kind, object_name=self.obj.name, seed=self.seed
        )
        data_io.write_dataset(path, header, rec.frames)
        return path, len(rec.frames)

    def state_message(self) -> dict:
        taxels = tactile.render_taxels(self.state, noise=self.noise).values
        cs = sim.contact_state(self.state)
        w = sim.load_n(self.state)
        if self.estimator is not None and self.te is not None:
            feature = np.concatenate(
                [taxels, [self.state.gripper.theta_deg], self.state.pose]
            )
            stable = bool(stability.is_stable(self.estimator, self.te, feature))
        else:
            stable = bool(cs.in_contact and w <= cs.capacity_n)
        return {
            "type": "state",
            "t": self.state.t_tick,
            "theta": self.state.gripper.theta_deg,
            "taxels": [float(v) for v in taxels],
            "force_n": self.state.gripper.normal_force_n,
            "fill_g": self.state.fill_g,
            "dropped": self.state.dropped,
            "stable": stable,
        }


def _load_estimator_if_present(out_root):
    path = Path(out_root) / "models" / "estimator.tgm"
    if not path.is_file():
        return None, None
    model, report = stability.load_estimator(path)
    if report is None:
        return None, None
    return model, report.te


async def _recv_into(ws, inbox: asyncio.Queue, closed: asyncio.Event) -> None:
    try:
        async for raw in ws:
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8", errors="replace")
            for line in raw.splitlines():
                if line.strip():
                    inbox.put_nowait(line)
    finally:
        closed.set()


async def _send_from(ws, outbox: _Outbox, closed: asyncio.Event) -> None:
    try:
        while True:
            await outbox.wakeup.wait()
            outbox.wakeup.clear()
            while True:
                try:
                    msg = outbox.reliable.get_nowait()
                except asyncio.QueueEmpty:
                    msg = outbox.take_state()
                    if msg is None:
                        break
                await ws.send(msg)
    finally:
        closed.set()


async def _run_session(ws, session: _Session) -> None:
    inbox: asyncio.Queue = asyncio.Queue()
    outbox = _Outbox()
    closed = asyncio.Event()
    recv_task = asyncio.create_task(_recv_into(ws, inbox, closed))
    send_task = asyncio.create_task(_send_from(ws, outbox, closed))
    loop = asyncio.get_running_loop()
    deadline = loop.time()
    try:
        while not closed.is_set():
            while not inbox.empty():
                for reply in session.handle(inbox.get_nowait()):
                    outbox.send_reliable(reply)
            for _ in range(FRAME_TICKS):
                notice = session.tick()
                if notice is not None:
                    outbox.send_reliable(notice)
            outbox.send_state(session.state_message())
            deadline += FRAME_PERIOD_S
            delay = deadline - loop.time()
            if delay > 0:
                try:
                    await asyncio.wait_for(closed.wait(), timeout=delay)
                except asyncio.TimeoutError:
                    pass
            else:
                # Behind schedule: yield once, then resynchronize the clock.
                await asyncio.sleep(0)
                deadline = loop.time()
    finally:
        recv_task.cancel()
        send_task.cancel()
        if session.recording is not None:
            path, count = session._write_recording()
            print(json.dumps({"event": "recording_flushed", "path": str(path),
                              "frames": count}), flush=True)


async def _serve_async(port, obj, seed, out_root, noise, ready, stop) -> None:
    import websockets

    estimator, te = _load_estimator_if_present(out_root)
    busy = asyncio.Lock()
    session_count = 0

    async def handler(ws):
        nonlocal session_count
        if busy.locked():
            await ws.send(json.dumps(
                {"type": "error", "reason": "another session is active"}))
            await ws.close()
            return
        async with busy:
            session_count += 1
            session = _Session(obj, seed, out_root, noise,
                               estimator=estimator, te=te, index=session_count)
            await _run_session(ws, session)

    async with websockets.serve(handler, "127.0.0.1", port) as server:
        bound = server.sockets[0].getsockname()[1]
        print(json.dumps({
            "command": "serve", "object": obj.name, "out": str(out_root),
            "port": bound, "seed": int(seed),
        }, sort_keys=True), flush=True)
        if ready is not None:
            ready(bound)
        if stop is not None:
            await asyncio.get_running_loop().run_in_executor(None, stop.wait)
            server.close(close_connections=True)
        else:
            await asyncio.Future()


def serve_teleop(port, obj, seed, out_root, noise: bool = True,
                 ready=None, stop=None) -> None:
    """Run the teleoperation server until interrupted or `stop` is set.

    ready: optional callback invoked with the bound port once listening.
    stop: optional threading.Event that shuts the server down when set.
    """
    try:
        asyncio.run(_serve_async(port, obj, seed, out_root, noise, ready, stop))
    except KeyboardInterrupt:
        pass
