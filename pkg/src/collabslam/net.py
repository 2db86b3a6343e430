"""TCP transport for the wire protocol.

Frames are self-delimiting (the 32-byte header carries the payload
length), so a TCP stream is split back into frames by :class:`FrameReader`
and fed to the usual :class:`~collabslam.wire.Endpoint`.  An optional
:class:`~collabslam.wire.ChannelSimulator` can sit between an endpoint and
its socket to inject loss and reordering on top of TCP.
"""

from __future__ import annotations

import json
import logging
import os
import selectors
import signal
import socket
import struct
import time

from .wire import FRAME_HEADER_SIZE, FRAME_SIZE, MAGIC, ChannelSimulator, Endpoint, ProtocolError, write_bandwidth_csv

log = logging.getLogger(__name__)

_PLEN = struct.Struct("<H")
_PLEN_OFFSET = 28


class FrameReader:
    """Split a byte stream into frames; garbage before a magic is skipped."""

    def __init__(self):
        self.buf = bytearray()
        self.skipped = 0

    def feed(self, data: bytes) -> list:
        self.buf += data
        out = []
        while True:
            start = self.buf.find(MAGIC)
            if start < 0:
                keep = len(MAGIC) - 1
                self.skipped += max(0, len(self.buf) - keep)
                del self.buf[: max(0, len(self.buf) - keep)]
                return out
            if start:
                self.skipped += start
                del self.buf[:start]
            if len(self.buf) < FRAME_HEADER_SIZE:
                return out
            plen = _PLEN.unpack_from(self.buf, _PLEN_OFFSET)[0]
            if FRAME_HEADER_SIZE + plen > FRAME_SIZE:
                # not a real header; resynchronise past this magic
                self.skipped += 1
                del self.buf[:1]
                continue
            n = FRAME_HEADER_SIZE + plen
            if len(self.buf) < n:
                return out
            out.append(bytes(self.buf[:n]))
            del self.buf[:n]


def parse_address(addr: str, default_host: str = "127.0.0.1"):
    host, _, port = addr.rpartition(":")
    return host or default_host, int(port)


class _Shaped:
    """Transmit callback that optionally routes frames through a channel simulator."""

    def __init__(self, sock, channel: ChannelSimulator = None):
        self.sock = sock
        self.channel = channel

    def __call__(self, data: bytes):
        if self.channel is None:
            self.sock.sendall(data)
        else:
            self.channel.send(data)

    def flush(self, now: float):
        if self.channel is not None:
            self.channel.now = now
            for data in self.channel.deliver(now):
                self.sock.sendall(data)


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------


class _Conn:
    def __init__(self, sock, addr):
        self.sock = sock
        self.addr = addr
        self.endpoint = Endpoint(0, self.send)
        self.reader = FrameReader()
        self.agent_id = None
        self.dead = False

    def send(self, data: bytes):
        # a broken peer must not take down whoever triggered the send
        if self.dead:
            return
        try:
            self.sock.sendall(data)
        except OSError as e:
            log.warning("send to %s failed: %s", self.addr, e)
            self.dead = True


def write_server_report(server, report_dir, bandwidth_rows):
    from .eval import Trajectory

    os.makedirs(report_dir, exist_ok=True)
    write_bandwidth_csv(bandwidth_rows, os.path.join(report_dir, "bandwidth.csv"))
    with open(os.path.join(report_dir, "fusion_events.jsonl"), "w") as fh:
        for ev in server.fusion_events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    with open(os.path.join(report_dir, "optimizations.json"), "w") as fh:
        json.dump(server.optimization_reports, fh, indent=1, sort_keys=True)
    with open(os.path.join(report_dir, "summary.json"), "w") as fh:
        json.dump(server.summary(), fh, indent=1, sort_keys=True)
    for sid, samples in server.trajectories().items():
        if samples:
            Trajectory.from_samples(samples).save_tum(os.path.join(report_dir, f"submap{sid}.tum"))


def serve(server, host: str, port: int, report_dir: str, max_agents: int = 0, tick: float = 0.01,
          bandwidth_interval: float = 1.0, ready=None):
    """Accept agents over TCP until ``max_agents`` said bye or a signal arrives.

    Reports are flushed to ``report_dir`` on exit.  ``ready`` (if given) is
    called with the bound ``(host, port)`` once listening.
    """
    sel = selectors.DefaultSelector()
    lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    lsock.bind((host, port))
    lsock.listen()
    lsock.setblocking(False)
    sel.register(lsock, selectors.EVENT_READ, None)
    bound = lsock.getsockname()[:2]
    log.info("listening on %s:%d", *bound)
    if ready is not None:
        ready(bound)

    stop = {"flag": False}

    def _on_signal(signum, frame):
        stop["flag"] = True

    old = {}
    try:
        for sig in (signal.SIGINT, signal.SIGTERM):
            old[sig] = signal.signal(sig, _on_signal)
    except ValueError:  # not the main thread
        old = {}

    t0 = time.monotonic()
    conns: list = []
    byes = 0
    rows = []
    next_row = bandwidth_interval
    def drop(conn, why=""):
        if why:
            log.warning("dropping connection from %s: %s", conn.addr, why)
        sel.unregister(conn.sock)
        conn.sock.close()
        conns.remove(conn)
        if conn.agent_id is not None and server.endpoints.get(conn.agent_id) is conn.endpoint:
            server.detach(conn.agent_id)

    try:
        while not stop["flag"]:
            now = time.monotonic() - t0
            for key, _ in sel.select(timeout=tick):
                if key.data is None:
                    sock, addr = lsock.accept()
                    sock.setblocking(True)
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    conn = _Conn(sock, addr)
                    conns.append(conn)
                    sel.register(sock, selectors.EVENT_READ, conn)
                    continue
                conn = key.data
                try:
                    data = conn.sock.recv(65536)
                except OSError:
                    data = b""
                if not data:
                    drop(conn)
                    continue
                conn.endpoint.now = now
                try:
                    for frame in conn.reader.feed(data):
                        for msg in conn.endpoint.on_bytes(frame):
                            if conn.agent_id is None:
                                if msg.agent_id in server.handlers and server.handlers[msg.agent_id].connected:
                                    raise ProtocolError(f"agent {msg.agent_id} already connected")
                                conn.agent_id = msg.agent_id
                                server.attach(msg.agent_id, conn.endpoint)
                            effects = server.on_message(conn.agent_id, msg, now)
                            byes += sum(1 for e in effects if e[0] == "bye")
                except ProtocolError as e:
                    drop(conn, str(e))
            for conn in list(conns):
                conn.endpoint.tick(now)
                if conn.dead:
                    drop(conn, "peer went away")
            byes += sum(1 for e in server.tick(now) if e[0] == "bye")
            if now >= next_row:
                rows.append((round(next_row, 6), sum(h.bytes_up for h in server.handlers.values()),
                             sum(h.bytes_down for h in server.handlers.values())))
                next_row += bandwidth_interval
            if max_agents and byes >= max_agents and all(c.endpoint.idle for c in conns):
                break
    finally:
        for sig, h in old.items():
            signal.signal(sig, h)
        rows.append((round(time.monotonic() - t0, 6), sum(h.bytes_up for h in server.handlers.values()),
                     sum(h.bytes_down for h in server.handlers.values())))
        write_server_report(server, report_dir, rows)
        for c in conns:
            c.sock.close()
        sel.close()
        lsock.close()
    return server.summary()


# ---------------------------------------------------------------------------
# agent side
# ---------------------------------------------------------------------------


def run_tcp_agent(agent, address: str, dt: float = 0.01, realtime: bool = True, loss_rate: float = 0.0,
                  reorder_rate: float = 0.0, seed: int = 0, linger: float = 2.0, timeout: float = 30.0) -> dict:
    """Stream ``agent`` to a TCP server and return its session report.

    With ``realtime`` false the keyframe clock advances by ``dt`` per loop
    iteration instead of following the wall clock.
    """
    from .agentsim import AgentClient

    host, port = parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    channel = ChannelSimulator(loss_rate, reorder_rate, 0.0, 0.0, seed=seed) if (loss_rate or reorder_rate) else None
    shaped = _Shaped(sock, channel)
    ep = Endpoint(agent.cfg.agent_id, shaped)
    client = AgentClient(agent, ep)
    reader = FrameReader()
    sel = selectors.DefaultSelector()
    sel.register(sock, selectors.EVENT_READ)
    t_start = agent.cfg.trajectory.t_start
    t0 = time.monotonic()
    sim = 0.0
    done_at = bye_at = None
    try:
        while True:
            # protocol timers always follow the wall clock; only keyframe production may run ahead
            wall = time.monotonic() - t0
            sim = wall if realtime else sim + dt
            ep.now = wall
            client.step(t_start + sim)
            wait = dt if realtime or client.bye_sent else 0.0
            for _ in sel.select(timeout=wait):
                try:
                    data = sock.recv(65536)
                except ConnectionResetError:
                    data = b""
                if not data:
                    if client.bye_sent and ep.idle:
                        return client.report()
                    raise ConnectionError("server closed the connection")
                for frame in reader.feed(data):
                    for msg in ep.on_bytes(frame):
                        client.on_message(msg)
            ep.tick(wall)
            shaped.flush(wall)
            if client.bye_sent and ep.idle:
                if done_at is None:
                    done_at = wall
                if wall - done_at >= min(linger, 0.2):
                    break
            elif client.bye_sent:
                bye_at = wall if bye_at is None else bye_at
                if wall > bye_at + timeout:
                    log.warning("agent %d: giving up on unacknowledged messages", client.agent_id)
                    break
    finally:
        sel.close()
        sock.close()
    return client.report()
