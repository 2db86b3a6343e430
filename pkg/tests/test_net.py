import json
import socket
import threading

import pytest

from collabslam.agentsim import Agent, AgentConfig, DriftModel, TrajectorySpec
from collabslam.net import FrameReader, parse_address, run_tcp_agent, serve
from collabslam.placerec import train_vocabulary
from collabslam.server import Server
from collabslam.wire import Message, MsgType, chunk, encode_message


def start_server(server, report_dir, max_agents):
    bound = {}
    ready = threading.Event()

    def on_ready(addr):
        bound["addr"] = addr
        ready.set()

    th = threading.Thread(target=serve, args=(server, "127.0.0.1", 0, str(report_dir)),
                          kwargs={"max_agents": max_agents, "ready": on_ready}, daemon=True)
    th.start()
    assert ready.wait(10)
    return th, "%s:%d" % bound["addr"]


def test_parse_address():
    assert parse_address("10.0.0.1:7400") == ("10.0.0.1", 7400)
    assert parse_address(":99") == ("127.0.0.1", 99)


def test_tcp_session_end_to_end(field, tmp_path):
    server = Server(train_vocabulary(field.descriptors, seed=0))
    th, addr = start_server(server, tmp_path, max_agents=1)
    spec = TrajectorySpec("circle", 3.0, 10.0, {"radius": 4.0, "laps": 0.2})
    agent = Agent(AgentConfig(1, spec, DriftModel(0.002)), field)
    rep = run_tcp_agent(agent, addr, realtime=False, loss_rate=0.1, seed=3)
    th.join(20)
    assert not th.is_alive()
    assert rep["keyframes_sent"] == 30
    assert server.handlers[1].keyframes_received == 30
    # the agent counts frames the lossy channel dropped, the server only what arrived
    assert 0.8 * rep["bytes_up"] < server.handlers[1].bytes_up < rep["bytes_up"]
    assert not rep["degraded"] and rep["abandoned_messages"] == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["handlers"][0]["keyframes_received"] == 30
    for name in ("bandwidth.csv", "fusion_events.jsonl", "optimizations.json", "submap1.tum"):
        assert (tmp_path / name).exists()


def test_duplicate_agent_connection_is_dropped(field, tmp_path):
    server = Server(train_vocabulary(field.descriptors, seed=0))
    server.on_connect(5)  # agent 5 already live
    th, addr = start_server(server, tmp_path, max_agents=1)
    host, port = parse_address(addr)
    with socket.create_connection((host, port), timeout=5) as s:
        for frame in chunk(encode_message(Message(MsgType.Hello, 5, 1, b"")), 1, 5):
            s.sendall(frame.to_bytes())
        s.settimeout(5)
        # the server closes this connection instead of crashing
        data = b""
        while True:
            got = s.recv(4096)
            if not got:
                break
            data += got
    assert th.is_alive()
    spec = TrajectorySpec("circle", 1.0, 10.0, {"radius": 4.0, "laps": 0.1})
    rep = run_tcp_agent(Agent(AgentConfig(1, spec), field), addr, realtime=False)
    th.join(20)
    assert rep["keyframes_sent"] == 10 and not th.is_alive()


def test_frame_reader_resyncs():
    frames = [f.to_bytes() for f in chunk(b"x" * 9000, 1, 1)]
    r = FrameReader()
    stream = b"junkCS" + frames[0] + b"\x00" * 7 + frames[1] + frames[2]
    out = []
    for k in range(0, len(stream), 333):
        out += r.feed(stream[k:k + 333])
    assert out == frames
