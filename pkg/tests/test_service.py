import dataclasses
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from springtwin.dynamics import rollout
from springtwin.model import ControlScript, Scenario, SystemState
from springtwin.service import (Snapshot, create_app, decode_snapshot_binary,
                                encode_snapshot_binary)
from springtwin.synth import generate_scenario, named_template


@pytest.fixture(scope="module")
def served_scenario():
    """Small rope with one control point, static script (interactive mode)."""
    template = dataclasses.replace(named_template("rope-lift", seed=13),
                                   counts=(16,), n_frames=3)
    gt = generate_scenario(template)
    scen = dataclasses.replace(
        gt.scenario,
        control=ControlScript.static(gt.scenario.control.frame(0), 2),
    )
    return scen, gt


def make_client(scen, gt, paused=False, tick_rate=200.0):
    app = create_app(scen, attachments=gt.attachments, tick_rate=tick_rate,
                     client_queue_size=600)
    app.state.sim.paused = paused
    return TestClient(app)


def recv_snapshots_until(ws, pred, limit=2000):
    seen = []
    for _ in range(limit):
        msg = json.loads(ws.receive_text())
        if msg.get("type") != "snapshot":
            continue
        seen.append(msg)
        if pred(msg):
            return seen
    raise AssertionError("condition not reached within snapshot limit")


class TestHttp:
    def test_health(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client:
            r = client.get("/health")
            assert r.status_code == 200
            assert r.json()["status"] == "ok"

    def test_meta_counts(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client:
            meta = client.get("/meta").json()
            assert meta["n_nodes"] == 16
            assert meta["n_springs"] == scen.topology.n_springs
            assert meta["n_ctrl"] == 1
            assert meta["tick_rate"] == 200.0


class TestProtocol:
    def test_hello_carries_topology_once(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client, client.websocket_connect("/ws") as ws:
            hello = json.loads(ws.receive_text())
            assert hello["type"] == "hello"
            assert hello["n_nodes"] == 16
            assert len(hello["springs"]) == scen.topology.n_springs

    def test_drag_round_trip_exact(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client, client.websocket_connect("/ws") as ws:
            hello = json.loads(ws.receive_text())
            ws.send_text(json.dumps(
                {"v": 1, "type": "drag", "index": 0, "delta": [0.1, 0.0, 0.0]}))
            ack = None
            pre = []
            while ack is None:
                msg = json.loads(ws.receive_text())
                if msg.get("type") == "ack":
                    ack = msg
                elif msg.get("type") == "snapshot":
                    pre.append(msg)
            k = ack["applies_at_frame"]
            seen = pre + recv_snapshots_until(ws, lambda m: m["frame"] >= k)
            c0 = scen.control.frame(0)[0]
            before = np.float32(c0)
            after = np.float32(c0 + [0.1, 0.0, 0.0])
            for snap in seen:
                got = np.asarray(snap["control"][0], dtype=np.float32)
                if snap["frame"] < k:
                    assert np.array_equal(got, before), "partial application leaked"
                elif snap["frame"] == k:
                    assert np.array_equal(got, after), "drag not applied exactly"

    def test_quiescent_stream_matches_offline_rollout(self, served_scenario):
        scen, gt = served_scenario
        static = dataclasses.replace(
            scen, control=ControlScript.static(scen.control.frame(0), 101))
        offline = rollout(static, 100, attachments=gt.attachments)
        with make_client(scen, gt, paused=True) as client, \
                client.websocket_connect("/ws") as ws:
            json.loads(ws.receive_text())  # hello
            ws.send_text(json.dumps({"v": 1, "type": "resume"}))
            seen = {}
            for _ in range(4000):
                msg = json.loads(ws.receive_text())
                if msg.get("type") != "snapshot" or msg["paused"]:
                    continue
                if msg["frame"] not in seen:
                    seen[msg["frame"]] = msg
                if msg["frame"] >= 100:
                    break
            assert set(range(1, 101)) <= set(seen), "missed served frames"
            for t in range(1, 101):
                expect = np.float32(offline[t].positions)
                got = np.asarray(seen[t]["positions"], dtype=np.float32)
                assert np.array_equal(got, expect), f"frame {t} differs from rollout"

    def test_pause_resume_continuity(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client, client.websocket_connect("/ws") as ws:
            json.loads(ws.receive_text())
            ws.send_text(json.dumps({"v": 1, "type": "pause"}))
            seen = recv_snapshots_until(ws, lambda m: m["paused"])
            frozen = seen[-1]["frame"]
            # while paused the frame index holds
            more = recv_snapshots_until(ws, lambda m: True, limit=5)
            assert all(m["frame"] == frozen for m in more if m["paused"])
            ws.send_text(json.dumps({"v": 1, "type": "resume"}))
            resumed = recv_snapshots_until(ws, lambda m: not m["paused"])
            assert resumed[-1]["frame"] in (frozen, frozen + 1)

    def test_reset_restores_canonical(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client, client.websocket_connect("/ws") as ws:
            json.loads(ws.receive_text())
            recv_snapshots_until(ws, lambda m: m["frame"] > 20)
            ws.send_text(json.dumps({"v": 1, "type": "reset"}))
            seen = recv_snapshots_until(ws, lambda m: m["frame"] <= 1)
            low = seen[-1]
            assert np.allclose(np.asarray(low["control"]),
                               np.float32(scen.control.frame(0)), atol=1e-7)

    def test_malformed_messages_get_error_replies(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt, paused=True) as client, \
                client.websocket_connect("/ws") as ws:
            json.loads(ws.receive_text())

            def next_non_snapshot():
                while True:
                    msg = json.loads(ws.receive_text())
                    if msg.get("type") != "snapshot":
                        return msg

            ws.send_text("{not json")
            assert next_non_snapshot()["type"] == "error"
            ws.send_text(json.dumps({"v": 1, "type": "warp"}))
            assert "unknown" in next_non_snapshot()["error"]
            ws.send_text(json.dumps({"v": 1, "type": "drag", "index": 99,
                                     "delta": [0, 0, 0]}))
            assert "index" in next_non_snapshot()["error"]
            ws.send_text(json.dumps({"v": 1, "type": "drag", "index": 0,
                                     "delta": [0, 0]}))
            assert "delta" in next_non_snapshot()["error"]
            # connection still alive and functional
            ws.send_text(json.dumps({"v": 1, "type": "resume"}))
            assert next_non_snapshot()["type"] == "ack"

    def test_drag_clamped_to_server_max(self, served_scenario):
        scen, gt = served_scenario
        app = create_app(scen, attachments=gt.attachments, tick_rate=200.0,
                         max_drag_per_tick=0.05, client_queue_size=600)
        with TestClient(app) as client, client.websocket_connect("/ws") as ws:
            json.loads(ws.receive_text())
            ws.send_text(json.dumps(
                {"v": 1, "type": "drag", "index": 0, "delta": [1.0, 0.0, 0.0]}))
            ack = None
            while ack is None:
                msg = json.loads(ws.receive_text())
                if msg.get("type") == "ack":
                    ack = msg
            k = ack["applies_at_frame"]
            seen = recv_snapshots_until(ws, lambda m: m["frame"] >= k)
            snap = next(m for m in seen if m["frame"] == k)
            moved = np.asarray(snap["control"][0]) - scen.control.frame(0)[0]
            assert np.linalg.norm(moved) <= 0.05 + 1e-6

    def test_multiple_clients(self, served_scenario):
        scen, gt = served_scenario
        with make_client(scen, gt) as client:
            socks = [client.websocket_connect("/ws").__enter__() for _ in range(4)]
            try:
                for ws in socks:
                    assert json.loads(ws.receive_text())["type"] == "hello"
                for ws in socks:
                    msg = json.loads(ws.receive_text())
                    assert msg["type"] == "snapshot"
            finally:
                for ws in socks:
                    ws.__exit__(None, None, None)


class TestBinaryFraming:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        snap = Snapshot(
            frame=1234, timestamp=41.13, paused=True,
            positions=rng.standard_normal((2500, 3)).astype(np.float32),
            control=rng.standard_normal((2, 3)).astype(np.float32),
        )
        back = decode_snapshot_binary(encode_snapshot_binary(snap))
        assert back.frame == 1234
        assert back.paused is True
        assert back.timestamp == pytest.approx(41.13, abs=1e-4)
        assert np.array_equal(back.positions, snap.positions)
        assert np.array_equal(back.control, snap.control)

    def test_binary_selected_for_large_scenes(self):
        pts = np.zeros((2501, 3))
        pts[:, 0] = np.arange(2501) * 0.01
        scen = Scenario("big", SystemState.at_rest(pts), None,
                        dataclasses.replace(named_template("rope-lift").params,
                                            substeps=1),
                        ControlScript(np.zeros((2, 0, 3))), -1.0)
        app = create_app(scen, tick_rate=100.0)
        with TestClient(app) as client, client.websocket_connect("/ws") as ws:
            hello = json.loads(ws.receive_text())
            assert hello["binary"] is True
            snap = decode_snapshot_binary(ws.receive_bytes())
            assert snap.positions.shape == (2501, 3)
