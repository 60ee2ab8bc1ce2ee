"""Teleoperation server protocol tests over a real WebSocket connection."""

import json
import threading

import pytest
from websockets.sync.client import connect

from tacgrasp import data_io
from tacgrasp.catalog import load_catalog
from tacgrasp.server import serve_teleop

RECV_TIMEOUT = 10.0


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    root = tmp_path_factory.mktemp("teleop")
    obj = load_catalog()["soda_can"]
    stop = threading.Event()
    ready = threading.Event()
    port_holder = []

    def on_ready(port):
        port_holder.append(port)
        ready.set()

    thread = threading.Thread(
        target=serve_teleop,
        kwargs=dict(port=0, obj=obj, seed=9, out_root=root, noise=True,
                    ready=on_ready, stop=stop),
        daemon=True,
    )
    thread.start()
    assert ready.wait(timeout=10.0), "server did not start"
    yield {"port": port_holder[0], "root": root}
    stop.set()
    thread.join(timeout=10.0)


def client(server):
    return connect(f"ws://127.0.0.1:{server['port']}", open_timeout=10)


def recv_json(ws):
    return json.loads(ws.recv(timeout=RECV_TIMEOUT))


def recv_until(ws, pred, limit=400):
    for _ in range(limit):
        msg = recv_json(ws)
        if pred(msg):
            return msg
    raise AssertionError("expected message never arrived")


def next_state(ws):
    return recv_until(ws, lambda m: m["type"] == "state")


class TestStateStream:
    def test_states_flow_at_internal_rate(self, server):
        with client(server) as ws:
            first = next_state(ws)
            second = next_state(ws)
            assert len(first["taxels"]) == 32
            assert second["t"] > first["t"]
            assert (second["t"] - first["t"]) % 8 == 0
            for key in ("theta", "force_n", "fill_g", "dropped", "stable"):
                assert key in first

    def test_fresh_session_restarts_episode(self, server):
        with client(server) as ws:
            last = next_state(ws)["t"]
            for _ in range(3):
                last = next_state(ws)["t"]
        with client(server) as ws:
            again = next_state(ws)["t"]
            assert again < last


class TestCommands:
    def test_theta_command_slews(self, server):
        with client(server) as ws:
            ws.send(json.dumps({"type": "cmd", "theta_target": 45}))
            ack = recv_until(ws, lambda m: m["type"] == "ack")
            assert ack["seq"] == 1
            assert ack["theta_target"] == 45
            thetas = [next_state(ws)["theta"] for _ in range(5)]
            assert thetas == sorted(thetas)
            assert thetas[-1] > thetas[0]

    def test_water_disturbance_fills(self, server):
        with client(server) as ws:
            start = next_state(ws)
            ws.send(json.dumps({"type": "disturb", "kind": "water",
                                "magnitude": 10, "duration_s": 2}))
            recv_until(ws, lambda m: m["type"] == "ack")
            final = recv_until(
                ws, lambda m: m["type"] == "state" and m["t"] >= start["t"] + 2 * 160 + 16
            )
            assert final["fill_g"] == pytest.approx(20.0, abs=1.0)

    def test_acks_count_only_valid_commands(self, server):
        with client(server) as ws:
            ws.send("this is not json")
            ws.send(json.dumps({"type": "wat"}))
            ws.send(json.dumps({"type": "cmd"}))
            errors = [recv_until(ws, lambda m: m["type"] == "error")
                      for _ in range(3)]
            assert all("reason" in e for e in errors)
            ws.send(json.dumps({"type": "cmd", "theta_target": 10}))
            ack = recv_until(ws, lambda m: m["type"] == "ack")
            assert ack["seq"] == 1

    def test_unknown_disturbance_kind(self, server):
        with client(server) as ws:
            ws.send(json.dumps({"type": "disturb", "kind": "earthquake",
                                "magnitude": 1, "duration_s": 1}))
            err = recv_until(ws, lambda m: m["type"] == "error")
            assert "earthquake" in err["reason"]
            state = next_state(ws)
            assert state["t"] >= 0


class TestRecording:
    def test_auto_stop_records_exact_frames(self, server):
        with client(server) as ws:
            ws.send(json.dumps({"type": "record", "action": "start",
                                "scenario": "ga", "frames": 200}))
            ack = recv_until(ws, lambda m: m["type"] == "ack")
            saved = recv_until(
                ws, lambda m: m["type"] == "record" and m["action"] == "saved"
            )
            assert saved["frames"] == 200
            header, frames = data_io.read_dataset(saved["path"])
            data_io.validate_dataset(header, frames)
            assert header.kind == "ga"
            assert header.object_name == "soda_can"
            assert len(frames) == 200
            assert frames[0].t_tick == ack["start_tick"]
            ticks = [f.t_tick for f in frames]
            assert ticks == list(range(ticks[0], ticks[0] + 200))

    def test_manual_stop_reports_path(self, server):
        with client(server) as ws:
            ws.send(json.dumps({"type": "record", "action": "start",
                                "scenario": "gp"}))
            recv_until(ws, lambda m: m["type"] == "ack")
            for _ in range(3):
                next_state(ws)
            ws.send(json.dumps({"type": "record", "action": "stop"}))
            ack = recv_until(ws, lambda m: m["type"] == "ack" and "path" in m)
            assert ack["frames"] > 0
            header, frames = data_io.read_dataset(ack["path"])
            data_io.validate_dataset(header, frames)
            assert len(frames) == ack["frames"]

    def test_stop_without_start_errors(self, server):
        with client(server) as ws:
            ws.send(json.dumps({"type": "record", "action": "stop"}))
            err = recv_until(ws, lambda m: m["type"] == "error")
            assert "recording" in err["reason"]

    def test_bad_scenario_rejected(self, server):
        with client(server) as ws:
            ws.send(json.dumps({"type": "record", "action": "start",
                                "scenario": "selfie"}))
            err = recv_until(ws, lambda m: m["type"] == "error")
            assert "scenario" in err["reason"]


class TestSessionPolicy:
    def test_second_connection_rejected(self, server):
        with client(server) as ws:
            next_state(ws)
            with client(server) as intruder:
                msg = json.loads(intruder.recv(timeout=RECV_TIMEOUT))
                assert msg["type"] == "error"
                assert "active" in msg["reason"]
            assert next_state(ws)["t"] > 0
