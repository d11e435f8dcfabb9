"""Real-time interactive simulation service.

One asyncio simulation loop owns the state and steps one frame per tick.
Queued control messages apply atomically at tick boundaries (drag deltas
accumulate within a tick, clamped to a per-tick maximum), so a snapshot never
reflects a partially applied batch. Each client gets a bounded snapshot
queue with a newest-wins drop policy: a slow client never blocks the loop.

Wire protocol (all JSON text frames carry a "v" field):
  client -> server: {"v":1,"type":"drag","index":i,"delta":[x,y,z]}
                    {"v":1,"type":"set","index":i,"position":[x,y,z]}
                    {"v":1,"type":"pause"|"resume"|"reset"}
  server -> client: hello (once: node/spring/control counts, spring index
                    pairs, tick rate), then one snapshot per tick, plus an
                    ack or error reply per control message.
Snapshots are JSON by default; scenes above BINARY_NODE_THRESHOLD nodes use a
compact binary frame (see encode_snapshot_binary for the layout). Positions
are sent as 32-bit reals either way; simulation state stays 64-bit.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse

from . import kernels
from .dynamics import _attachment_arrays, _topology_arrays, default_attachments
from .model import Scenario
from .skinning import SkinBinding, SkinParticle, deform_skin, estimate_node_rotations, \
    neighborhoods_from_topology
from .topology import ControlAttachment

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
BINARY_NODE_THRESHOLD = 2000
BINARY_MAGIC = b"SNP1"
CLIENT_QUEUE_SIZE = 2


@dataclass
class Snapshot:
    frame: int
    timestamp: float
    paused: bool
    positions: np.ndarray  # (n, 3) float32
    control: np.ndarray    # (C, 3) float32
    skin_centers: np.ndarray | None = None
    skin_colors: np.ndarray | None = None

    def to_json(self) -> str:
        d = {
            "v": PROTOCOL_VERSION,
            "type": "snapshot",
            "frame": self.frame,
            "t": self.timestamp,
            "paused": self.paused,
            "positions": self.positions.tolist(),
            "control": self.control.tolist(),
        }
        if self.skin_centers is not None:
            d["skin"] = {
                "centers": self.skin_centers.tolist(),
                "colors": self.skin_colors.tolist(),
            }
        return json.dumps(d)


def encode_snapshot_binary(s: Snapshot) -> bytes:
    """Layout: 'SNP1' | u32 frame | f32 t | u8 paused | u32 n_nodes |
    u32 n_ctrl | positions f32 xyz * n | control f32 xyz * n_ctrl
    (little-endian throughout; skin data is JSON-mode only)."""
    head = BINARY_MAGIC + struct.pack(
        "<IfBII", s.frame & 0xFFFFFFFF, s.timestamp, 1 if s.paused else 0,
        s.positions.shape[0], s.control.shape[0],
    )
    return head + s.positions.astype("<f4").tobytes() + s.control.astype("<f4").tobytes()


def decode_snapshot_binary(buf: bytes) -> Snapshot:
    if buf[:4] != BINARY_MAGIC:
        raise ValueError("bad snapshot magic")
    frame, t, paused, n, c = struct.unpack("<IfBII", buf[4:21])
    off = 21
    pos = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    off += 12 * n
    ctrl = np.frombuffer(buf, dtype="<f4", count=3 * c, offset=off).reshape(c, 3)
    return Snapshot(frame, t, bool(paused), pos, ctrl)


@dataclass
class SimLoop:
    """Owner of the simulation state; one instance per served scenario."""

    scenario: Scenario
    attachments: list[ControlAttachment]
    tick_rate: float
    max_drag_per_tick: float = 0.25
    skin: list[SkinParticle] | None = None
    skin_binding: SkinBinding | None = None
    realtime: bool = True
    client_queue_size: int = CLIENT_QUEUE_SIZE

    def __post_init__(self):
        scen = self.scenario
        self.x = scen.initial_state.positions.copy()
        self.v = scen.initial_state.velocities.copy()
        self.ctrl = np.array(scen.control.frame(0), dtype=np.float64)
        self._canonical = (self.x.copy(), self.v.copy(), self.ctrl.copy())
        self.frame = 0
        self.paused = False
        self.running = True
        self._spring = _topology_arrays(scen.topology)
        self._att = _attachment_arrays(self.attachments)
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._clients: dict[int, asyncio.Queue] = {}
        self._next_client = 0
        self._neigh = (neighborhoods_from_topology(scen.topology)
                       if scen.topology is not None and self.skin is not None else None)
        self.dropped_snapshots = 0

    # -- client plumbing ----------------------------------------------------
    def register_client(self) -> tuple[int, asyncio.Queue]:
        cid = self._next_client
        self._next_client += 1
        q: asyncio.Queue = asyncio.Queue(maxsize=self.client_queue_size)
        self._clients[cid] = q
        return cid, q

    def drop_client(self, cid: int) -> None:
        self._clients.pop(cid, None)

    def submit(self, msg: dict) -> int:
        """Queue a validated control message; returns the frame index at
        which it will apply (the next tick boundary)."""
        self._inbox.put_nowait(msg)
        return self.frame + 1

    def hello(self) -> dict:
        scen = self.scenario
        springs = scen.topology.indices.tolist() if scen.topology is not None else []
        return {
            "v": PROTOCOL_VERSION,
            "type": "hello",
            "n_nodes": int(self.x.shape[0]),
            "n_ctrl": int(self.ctrl.shape[0]),
            "n_springs": len(springs),
            "springs": springs,
            "tick_rate": self.tick_rate,
            "ground_height": scen.ground_height,
            "binary": bool(self.x.shape[0] > BINARY_NODE_THRESHOLD),
        }

    # -- tick ---------------------------------------------------------------
    def _apply_messages(self) -> None:
        drags = np.zeros_like(self.ctrl)
        while True:
            try:
                msg = self._inbox.get_nowait()
            except asyncio.QueueEmpty:
                break
            kind = msg["type"]
            if kind == "drag":
                drags[msg["index"]] += np.asarray(msg["delta"], dtype=np.float64)
            elif kind == "set":
                self.ctrl[msg["index"]] = np.asarray(msg["position"], dtype=np.float64)
                drags[msg["index"]] = 0.0
            elif kind == "pause":
                self.paused = True
            elif kind == "resume":
                self.paused = False
            elif kind == "reset":
                self.x, self.v, self.ctrl = (a.copy() for a in self._canonical)
                self.frame = 0
                drags[:] = 0.0
        norms = np.linalg.norm(drags, axis=1, keepdims=True)
        over = norms > self.max_drag_per_tick
        if np.any(over):
            drags = np.where(over, drags * (self.max_drag_per_tick / np.maximum(norms, 1e-300)), drags)
        self.ctrl += drags

    def tick(self) -> Snapshot:
        """Apply queued messages, advance one frame, and build the snapshot."""
        prev_x = self.x.copy()
        ctrl_prev = self.ctrl.copy()
        self._apply_messages()
        if not self.paused:
            p = self.scenario.params
            g = p.gravity
            si, sj, rest, stiff = self._spring
            aci, ani, arest, ak = self._att
            bad = kernels.run_frame(
                self.x, self.v, si, sj, rest, stiff, aci, ani, arest, ak,
                ctrl_prev, self.ctrl, p.substeps, p.gamma, p.delta, p.node_mass,
                g[0], g[1], g[2], p.h, p.collision_dist, p.restitution, p.friction,
                self.scenario.ground_height,
            )
            if bad >= 0:
                log.error("simulation diverged at frame %d substep %d; resetting", self.frame, bad)
                self.x, self.v, self.ctrl = (a.copy() for a in self._canonical)
                self.frame = 0
            else:
                self.frame += 1
        snap = Snapshot(
            frame=self.frame,
            timestamp=self.frame / self.tick_rate,
            paused=self.paused,
            positions=self.x.astype(np.float32),
            control=self.ctrl.astype(np.float32),
        )
        if self.skin is not None and not self.paused and self._neigh is not None:
            rot = estimate_node_rotations(prev_x, self.x, self._neigh)
            self.skin = deform_skin(self.skin, self.skin_binding, prev_x, self.x, rot)
            snap.skin_centers = np.array([sp.center for sp in self.skin], dtype=np.float32)
            snap.skin_colors = np.array([sp.color for sp in self.skin], dtype=np.float32)
        return snap

    def broadcast(self, snap: Snapshot) -> None:
        for q in self._clients.values():
            while q.full():  # newest wins; lagging clients lose old frames
                try:
                    q.get_nowait()
                    self.dropped_snapshots += 1
                except asyncio.QueueEmpty:
                    break
            q.put_nowait(snap)

    async def run(self) -> None:
        period = 1.0 / self.tick_rate
        next_due = time.monotonic()
        while self.running:
            snap = self.tick()
            self.broadcast(snap)
            if self.realtime:
                next_due += period
                delay = next_due - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    if delay < -period:
                        log.debug("tick overran by %.1f ms", -1000 * delay)
                    next_due = time.monotonic()  # absorb jitter, no physics skip
            else:
                await asyncio.sleep(0)


def _validate_control_message(raw: str, n_ctrl: int) -> dict | str:
    """Parsed message dict, or an error string for the per-message reply."""
    try:
        msg = json.loads(raw)
    except json.JSONDecodeError as err:
        return f"malformed JSON: {err.msg}"
    if not isinstance(msg, dict) or "type" not in msg:
        return "message must be an object with a 'type' field"
    kind = msg["type"]
    if kind in ("pause", "resume", "reset"):
        return {"type": kind}
    if kind not in ("drag", "set"):
        return f"unknown message type {kind!r}"
    idx = msg.get("index")
    if not isinstance(idx, int) or not (0 <= idx < n_ctrl):
        return f"control index must be an integer in [0, {n_ctrl})"
    key = "delta" if kind == "drag" else "position"
    vec = msg.get(key)
    if (not isinstance(vec, (list, tuple)) or len(vec) != 3
            or not all(isinstance(x, (int, float)) and np.isfinite(x) for x in vec)):
        return f"'{key}' must be a finite [x, y, z] triple"
    return {"type": kind, "index": idx, key: [float(x) for x in vec]}


def create_app(
    scenario: Scenario,
    attachments: list[ControlAttachment] | None = None,
    tick_rate: float = 30.0,
    skin: list[SkinParticle] | None = None,
    skin_binding: SkinBinding | None = None,
    static_dir: str | None = None,
    realtime: bool = True,
    max_drag_per_tick: float = 0.25,
    client_queue_size: int = CLIENT_QUEUE_SIZE,
) -> FastAPI:
    """FastAPI app exposing /health, /meta, and the /ws stream for one scenario."""
    if attachments is None and scenario.control.n_ctrl > 0:
        attachments = default_attachments(
            scenario.initial_state.positions, scenario.control.frame(0), scenario.params
        )
    loop = SimLoop(
        scenario, attachments or [], tick_rate,
        skin=skin, skin_binding=skin_binding, realtime=realtime,
        max_drag_per_tick=max_drag_per_tick, client_queue_size=client_queue_size,
    )

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(loop.run())
        try:
            yield
        finally:
            loop.running = False
            task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await task

    app = FastAPI(lifespan=lifespan)
    app.state.sim = loop

    @app.get("/health")
    async def health():
        return {"v": PROTOCOL_VERSION, "status": "ok"}

    @app.get("/meta")
    async def meta():
        h = loop.hello()
        return JSONResponse({
            "v": PROTOCOL_VERSION,
            "n_nodes": h["n_nodes"],
            "n_springs": h["n_springs"],
            "n_ctrl": h["n_ctrl"],
            "tick_rate": tick_rate,
            "binary": h["binary"],
        })

    if static_dir:
        # registered last below, so /health, /meta, and /ws keep precedence
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="client")

    @app.websocket("/ws")
    async def ws(sock: WebSocket):
        await sock.accept()
        hello = loop.hello()
        await sock.send_text(json.dumps(hello))
        use_binary = hello["binary"]
        cid, queue = loop.register_client()

        async def pump_snapshots():
            while True:
                snap = await queue.get()
                if use_binary:
                    await sock.send_bytes(encode_snapshot_binary(snap))
                else:
                    await sock.send_text(snap.to_json())

        pump = asyncio.create_task(pump_snapshots())
        try:
            while True:
                raw = await sock.receive_text()
                parsed = _validate_control_message(raw, hello["n_ctrl"])
                if isinstance(parsed, str):
                    await sock.send_text(json.dumps(
                        {"v": PROTOCOL_VERSION, "type": "error", "error": parsed}))
                    continue
                applies_at = loop.submit(parsed)
                await sock.send_text(json.dumps(
                    {"v": PROTOCOL_VERSION, "type": "ack", "applies_at_frame": applies_at}))
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await pump
            loop.drop_client(cid)

    return app


def serve(app: FastAPI, port: int, host: str = "127.0.0.1") -> None:
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="warning")
