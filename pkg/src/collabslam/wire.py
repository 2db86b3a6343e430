"""Binary message layout, 4 KiB framing, reassembly and retransmission.

Everything on the wire is little endian.  A message is an envelope::

    u8 msg_type | 3 pad | u32 agent_id | u64 msg_seq | u32 payload_len | payload

which is cut into frames of at most 4096 bytes (32-byte header, up to 4064
payload bytes).  See FORMAT.md for the full layout with hex dumps.
"""

from __future__ import annotations

import enum
import heapq
import logging
import random
import struct
import zlib
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Se3
from .mapcore import KeyFrame, MapPoint

log = logging.getLogger(__name__)

FRAME_SIZE = 4 * 1024
FRAME_HEADER_SIZE = 32
CHUNK_PAYLOAD = FRAME_SIZE - FRAME_HEADER_SIZE  # 4064
REASSEMBLY_CAPACITY = 210 * 1024
MAGIC = b"CSLM"
VERSION = 1

_FRAME_HDR = struct.Struct("<4sIQHHIIHBB")
_ENVELOPE = struct.Struct("<B3xIQI")
_KF_HEADER = struct.Struct("<IQd7dII")
_U32 = struct.Struct("<I")
_OBS = np.dtype([("kp", "<u4"), ("mp", "<u8")])
_MP = np.dtype([("id", "<u8"), ("pos", "<f8", 3), ("desc", "u1", 32)])
_DRIFT = struct.Struct("<IQ7dI")
_HELLO = struct.Struct("<IQ")
_ACK_HEAD = struct.Struct("<QHH")

assert _FRAME_HDR.size == FRAME_HEADER_SIZE


class WireError(ValueError):
    """Malformed bytes."""


class CrcError(WireError):
    def __init__(self, msg_seq, chunk_index, sender_id):
        super().__init__(f"crc mismatch on msg {msg_seq} chunk {chunk_index}")
        self.msg_seq = msg_seq
        self.chunk_index = chunk_index
        self.sender_id = sender_id


class ProtocolError(RuntimeError):
    pass


class MsgType(enum.IntEnum):
    Hello = 1
    KeyFramePush = 2
    DriftNotify = 3
    Ack = 4
    Bye = 5


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    agent_id: int
    msg_seq: int
    payload: bytes = b""


def encode_message(msg: Message) -> bytes:
    return _ENVELOPE.pack(int(msg.msg_type), msg.agent_id, msg.msg_seq, len(msg.payload)) + msg.payload


def decode_message(data: bytes) -> Message:
    if len(data) < _ENVELOPE.size:
        raise WireError("truncated envelope")
    t, agent, seq, n = _ENVELOPE.unpack_from(data)
    if n != len(data) - _ENVELOPE.size:
        raise WireError("envelope length mismatch")
    try:
        mtype = MsgType(t)
    except ValueError:
        raise WireError(f"unknown message type {t}") from None
    return Message(mtype, agent, seq, bytes(data[_ENVELOPE.size:]))


# ---------------------------------------------------------------------------
# payloads
# ---------------------------------------------------------------------------


def _pose_fields(T: Se3):
    w, x, y, z = T.q
    return (*T.t, x, y, z, w)


def _pose_from(vals) -> Se3:
    tx, ty, tz, qx, qy, qz, qw = vals
    return Se3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def encode_keyframe(kf: KeyFrame, new_points=()) -> bytes:
    """Serialise a keyframe plus the map points it introduces.

    Layout: header (agent u32, seq u64, timestamp f64, pose 7xf64 in TUM
    order, correction_epoch u32, flags u32), keypoint count u32 followed by
    f32 pairs, one 32-byte descriptor per keypoint, observation count u32
    followed by (u32 keypoint, u64 map point) pairs sorted by keypoint,
    map-point count u32 followed by (u64 id, 3xf64 position, 32-byte
    descriptor) records.
    """
    n = len(kf.keypoints)
    parts = [
        _KF_HEADER.pack(kf.agent_id, kf.seq, kf.timestamp, *_pose_fields(kf.pose),
                        kf.correction_epoch, 1 if kf.low_texture else 0),
        _U32.pack(n),
        np.ascontiguousarray(kf.keypoints, dtype="<f4").tobytes(),
        np.ascontiguousarray(kf.descriptors, dtype=np.uint8).tobytes(),
    ]
    obs = np.zeros(len(kf.observations), dtype=_OBS)
    if len(obs):
        items = sorted(kf.observations.items())
        obs["kp"] = [k for k, _ in items]
        obs["mp"] = [v for _, v in items]
    parts += [_U32.pack(len(obs)), obs.tobytes()]
    mps = np.zeros(len(new_points), dtype=_MP)
    for i, mp in enumerate(new_points):
        mps[i]["id"] = mp.mp_id
        mps[i]["pos"] = mp.position
        mps[i]["desc"] = np.frombuffer(mp.descriptor, dtype=np.uint8)
    parts += [_U32.pack(len(mps)), mps.tobytes()]
    return b"".join(parts)


def keyframe_payload_size(n_keypoints, n_observations, n_points) -> int:
    return _KF_HEADER.size + 12 + n_keypoints * 40 + n_observations * _OBS.itemsize + n_points * _MP.itemsize


def decode_keyframe(data: bytes):
    """Inverse of :func:`encode_keyframe`; returns ``(KeyFrame, [MapPoint])``."""
    mv = memoryview(data)
    off = 0

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(mv):
            raise WireError("truncated keyframe payload")
        out = mv[off:off + nbytes]
        off += nbytes
        return out

    hdr = _KF_HEADER.unpack(take(_KF_HEADER.size))
    agent, seq, ts = hdr[0], hdr[1], hdr[2]
    pose_vals, epoch, flags = hdr[3:10], hdr[10], hdr[11]
    if not np.all(np.isfinite(pose_vals)) or not any(pose_vals[3:]):
        raise WireError("invalid pose")
    (n,) = _U32.unpack(take(4))
    kps = np.frombuffer(take(8 * n), dtype="<f4").reshape(n, 2).astype(np.float32)
    desc = np.frombuffer(take(32 * n), dtype=np.uint8).reshape(n, 32).copy()
    (n_obs,) = _U32.unpack(take(4))
    obs = np.frombuffer(take(_OBS.itemsize * n_obs), dtype=_OBS)
    (n_mp,) = _U32.unpack(take(4))
    mps = np.frombuffer(take(_MP.itemsize * n_mp), dtype=_MP)
    if off != len(mv):
        raise WireError("trailing bytes after keyframe payload")
    observations = {int(o["kp"]): int(o["mp"]) for o in obs}
    if len(observations) != n_obs or any(k >= n for k in observations):
        raise WireError("bad observation table")
    kf = KeyFrame(agent, seq, ts, _pose_from(pose_vals), kps, desc, observations, epoch, bool(flags & 1))
    observed = set(observations.values())
    points = [
        MapPoint(int(r["id"]), r["pos"].copy(), r["desc"].tobytes(),
                 {kf.kf_id} if int(r["id"]) in observed else set())
        for r in mps
    ]
    return kf, points


@dataclass(frozen=True)
class DriftNotice:
    agent_id: int
    from_sequence: int
    drift: Se3
    index: int


def encode_drift(d: DriftNotice) -> bytes:
    return _DRIFT.pack(d.agent_id, d.from_sequence, *_pose_fields(d.drift), d.index)


def decode_drift(data: bytes) -> DriftNotice:
    if len(data) != _DRIFT.size:
        raise WireError("bad DriftNotify payload")
    v = _DRIFT.unpack(data)
    return DriftNotice(v[0], v[1], _pose_from(v[2:9]), v[9])


def encode_hello(agent_id: int, resume_from: int = 0) -> bytes:
    return _HELLO.pack(agent_id, resume_from)


def decode_hello(data: bytes):
    if len(data) != _HELLO.size:
        raise WireError("bad Hello payload")
    return _HELLO.unpack(data)


def encode_ack(msg_seq: int, missing=(), recent=()) -> bytes:
    """Ack payload; non-empty ``missing`` turns it into a selective NACK.

    ``recent`` lists other recently completed messages so that one lost
    acknowledgement is covered by the next one.
    """
    missing = list(missing)
    recent = list(recent)
    return (_ACK_HEAD.pack(msg_seq, len(missing), len(recent))
            + struct.pack(f"<{len(missing)}H", *missing)
            + struct.pack(f"<{len(recent)}Q", *recent))


def decode_ack(data: bytes):
    if len(data) < _ACK_HEAD.size:
        raise WireError("bad Ack payload")
    seq, nm, nr = _ACK_HEAD.unpack_from(data)
    if len(data) != _ACK_HEAD.size + 2 * nm + 8 * nr:
        raise WireError("bad Ack payload length")
    missing = struct.unpack_from(f"<{nm}H", data, _ACK_HEAD.size)
    recent = struct.unpack_from(f"<{nr}Q", data, _ACK_HEAD.size + 2 * nm)
    return seq, list(missing), list(recent)


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WireFrame:
    total_len: int
    msg_seq: int
    chunk_index: int
    chunk_count: int
    sender_id: int
    chunk_payload: bytes
    crc32: int = 0

    def to_bytes(self) -> bytes:
        hdr = _FRAME_HDR.pack(MAGIC, self.total_len, self.msg_seq, self.chunk_index, self.chunk_count,
                              0, self.sender_id, len(self.chunk_payload), VERSION, 0)
        crc = zlib.crc32(self.chunk_payload, zlib.crc32(hdr))
        return hdr[:20] + _U32.pack(crc) + hdr[24:] + self.chunk_payload


def parse_frame(data: bytes) -> WireFrame:
    """Parse and CRC-check one frame. Raises ``CrcError`` on corruption."""
    if len(data) < FRAME_HEADER_SIZE or len(data) > FRAME_SIZE:
        raise WireError(f"frame size {len(data)} out of range")
    magic, total, seq, idx, count, crc, sender, plen, ver, _flags = _FRAME_HDR.unpack_from(data)
    if magic != MAGIC:
        raise WireError("bad magic")
    zeroed = data[:20] + b"\0\0\0\0" + data[24:FRAME_HEADER_SIZE]
    if zlib.crc32(data[FRAME_HEADER_SIZE:], zlib.crc32(zeroed)) != crc:
        raise CrcError(seq, idx, sender)
    if ver != VERSION:
        raise WireError(f"unsupported version {ver}")
    if plen != len(data) - FRAME_HEADER_SIZE or count == 0 or idx >= count:
        raise WireError("inconsistent frame header")
    if count != max(1, -(-total // CHUNK_PAYLOAD)):
        raise WireError("chunk count does not match total length")
    return WireFrame(total, seq, idx, count, sender, bytes(data[FRAME_HEADER_SIZE:]), crc)


def chunk(payload: bytes, msg_seq: int, sender_id: int = 0) -> list:
    """Cut ``payload`` into ``ceil(len / 4064)`` frames."""
    if not payload:
        raise ValueError("empty payload")
    count = -(-len(payload) // CHUNK_PAYLOAD)
    if count > 0xFFFF:
        raise ValueError("payload too large for 16-bit chunk index")
    return [
        WireFrame(len(payload), msg_seq, i, count, sender_id, payload[i * CHUNK_PAYLOAD:(i + 1) * CHUNK_PAYLOAD])
        for i in range(count)
    ]


@dataclass
class _Staged:
    total_len: int
    chunk_count: int
    chunks: dict
    nbytes: int
    last_activity: float
    last_nack: float


@dataclass
class ReassemblyEvent:
    kind: str  # "evicted" | "duplicate" | "inconsistent"
    sender_id: int
    msg_seq: int


class ReassemblyBuffer:
    """Staging area for partially received messages.

    Holds at most ``capacity`` payload bytes.  When a new chunk would
    overflow it, the oldest incomplete message is dropped and an
    ``evicted`` event recorded.
    """

    def __init__(self, capacity: int = REASSEMBLY_CAPACITY, remember: int = 4096):
        self.capacity = capacity
        self.staged: OrderedDict = OrderedDict()
        self.completed: OrderedDict = OrderedDict()
        self.remember = remember
        self.events: list = []
        self.now = 0.0

    @property
    def staged_bytes(self) -> int:
        return sum(s.nbytes for s in self.staged.values())

    def missing(self, key) -> list:
        s = self.staged.get(key)
        if s is None:
            return []
        return [i for i in range(s.chunk_count) if i not in s.chunks]

    def _evict_for(self, nbytes, protect):
        while self.staged and self.staged_bytes + nbytes > self.capacity:
            victim = next((k for k in self.staged if k != protect), None)
            if victim is None:
                break
            del self.staged[victim]
            self.events.append(ReassemblyEvent("evicted", *victim))
            log.debug("evicted incomplete message %s", victim)


def reassemble(buf: ReassemblyBuffer, frame: WireFrame) -> Optional[bytes]:
    """Stage one CRC-clean frame; return the full envelope bytes on completion.

    The envelope is returned exactly once per message no matter how often
    its chunks are repeated or in which order they arrive.
    """
    key = (frame.sender_id, frame.msg_seq)
    if key in buf.completed:
        buf.events.append(ReassemblyEvent("duplicate", *key))
        return None
    if frame.chunk_count == 1:
        if frame.total_len != len(frame.chunk_payload):
            buf.events.append(ReassemblyEvent("inconsistent", *key))
            return None
        _mark_done(buf, key)
        return frame.chunk_payload
    s = buf.staged.get(key)
    if s is None:
        buf._evict_for(len(frame.chunk_payload), None)
        s = _Staged(frame.total_len, frame.chunk_count, {}, 0, buf.now, buf.now)
        buf.staged[key] = s
    elif s.total_len != frame.total_len or s.chunk_count != frame.chunk_count:
        buf.events.append(ReassemblyEvent("inconsistent", *key))
        return None
    s.last_activity = buf.now
    if frame.chunk_index in s.chunks:
        return None
    buf._evict_for(len(frame.chunk_payload), key)
    s.chunks[frame.chunk_index] = frame.chunk_payload
    s.nbytes += len(frame.chunk_payload)
    if len(s.chunks) < s.chunk_count:
        return None
    data = b"".join(s.chunks[i] for i in range(s.chunk_count))
    del buf.staged[key]
    if len(data) != s.total_len:
        buf.events.append(ReassemblyEvent("inconsistent", *key))
        return None
    _mark_done(buf, key)
    return data


def _mark_done(buf, key):
    buf.completed[key] = True
    while len(buf.completed) > buf.remember:
        buf.completed.popitem(last=False)


# ---------------------------------------------------------------------------
# reliable endpoint
# ---------------------------------------------------------------------------


@dataclass
class _Outgoing:
    msg: Message
    frames: list
    last_send: float = 0.0
    retries: int = 0
    known_missing: Optional[int] = None


@dataclass
class RetransmitEvent:
    kind: str  # "nack" | "timeout"
    msg_seq: int
    missing: tuple = ()


def retransmit_policy(state: "SenderState", event: RetransmitEvent, now: float = 0.0) -> list:
    """Frames to resend for one NACK or timeout.

    A NACK resends exactly the listed chunks.  A timeout with no feedback
    resends only the final chunk as a probe; the receiver answers with an
    ACK (if it already has the message) or a NACK naming what is missing.
    Each event consumes one unit of the message's retry budget; any
    feedback from the receiver that shows progress restores it.  When the
    budget runs out the message is abandoned and ``state.degraded`` set.
    """
    out = state.outstanding.get(event.msg_seq)
    if out is None:
        return []
    if event.kind == "nack":
        missing = [i for i in event.missing if 0 <= i < len(out.frames)]
        if out.known_missing is None or len(missing) < out.known_missing:
            out.retries = 0
        out.known_missing = len(missing)
        frames = [out.frames[i] for i in missing]
    else:
        frames = [out.frames[-1]]
    out.retries += 1
    if out.retries > state.retry_budget:
        del state.outstanding[event.msg_seq]
        state.abandoned.append(event.msg_seq)
        state.degraded = True
        log.warning("abandoning message %d after %d retries", event.msg_seq, state.retry_budget)
        return []
    out.last_send = now
    return frames


@dataclass
class SenderState:
    retry_budget: int = 5
    outstanding: OrderedDict = field(default_factory=OrderedDict)
    abandoned: list = field(default_factory=list)
    degraded: bool = False


class Endpoint:
    """One side of a connection: reliable sender plus reassembling receiver.

    ``transmit`` is called with raw frame bytes.  Feed received bytes into
    :meth:`on_bytes`; call :meth:`tick` regularly to drive timeouts.
    Application messages come back from ``on_bytes`` in the order they
    complete; acknowledgements are consumed internally.
    """

    def __init__(self, node_id: int, transmit, window: int = 4, retry_budget: int = 5,
                 ack_timeout: float = 0.25, nack_timeout: float = 0.06,
                 capacity: int = REASSEMBLY_CAPACITY, recent_acks: int = 8):
        self.node_id = node_id
        self.transmit = transmit
        self.window = window
        self.ack_timeout = ack_timeout
        self.nack_timeout = nack_timeout
        self.state = SenderState(retry_budget)
        self.queue: deque = deque()
        self.buffer = ReassemblyBuffer(capacity)
        self.next_seq = 1
        self.recent = deque(maxlen=recent_acks)
        self.now = 0.0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.retransmitted_frames = 0
        self.crc_failures = 0
        self.malformed = 0
        self.payload_bytes_delivered = 0

    # sending ----------------------------------------------------------
    def send(self, msg_type: MsgType, payload: bytes = b"") -> int:
        seq = self.next_seq
        self.next_seq += 1
        self.queue.append(Message(msg_type, self.node_id, seq, payload))
        self._pump()
        return seq

    def _emit(self, frames, retransmit=False):
        for f in frames:
            data = f.to_bytes()
            self.bytes_sent += len(data)
            self.frames_sent += 1
            if retransmit:
                self.retransmitted_frames += 1
            self.transmit(data)

    def _pump(self):
        while self.queue and len(self.state.outstanding) < self.window:
            msg = self.queue.popleft()
            frames = chunk(encode_message(msg), msg.msg_seq, self.node_id)
            self.state.outstanding[msg.msg_seq] = _Outgoing(msg, frames, self.now)
            self._emit(frames)

    def _send_control(self, payload: bytes):
        msg = Message(MsgType.Ack, self.node_id, 0, payload)
        self._emit(chunk(encode_message(msg), 0, self.node_id))

    @property
    def idle(self) -> bool:
        return not self.queue and not self.state.outstanding

    @property
    def degraded(self) -> bool:
        return self.state.degraded

    # receiving --------------------------------------------------------
    def on_bytes(self, data: bytes) -> list:
        self.bytes_received += len(data)
        self.buffer.now = self.now
        try:
            frame = parse_frame(data)
        except CrcError as e:
            self.crc_failures += 1
            if e.msg_seq != 0:
                self._send_control(encode_ack(e.msg_seq, [e.chunk_index]))
            return []
        except WireError:
            self.malformed += 1
            return []
        if frame.msg_seq == 0:
            # control traffic is single-chunk and unacknowledged
            try:
                msg = decode_message(frame.chunk_payload)
                self._on_ack(*decode_ack(msg.payload))
            except WireError:
                self.malformed += 1
            return []
        key = (frame.sender_id, frame.msg_seq)
        was_done = key in self.buffer.completed
        data = reassemble(self.buffer, frame)
        if data is None:
            if was_done:
                self._send_control(encode_ack(frame.msg_seq, (), self._recent_except(frame.msg_seq)))
            return []
        self.recent.append(frame.msg_seq)
        self._send_control(encode_ack(frame.msg_seq, (), self._recent_except(frame.msg_seq)))
        try:
            msg = decode_message(data)
        except WireError:
            self.malformed += 1
            return []
        self.payload_bytes_delivered += len(msg.payload)
        return [msg]

    def _recent_except(self, seq):
        return [s for s in self.recent if s != seq]

    def _on_ack(self, seq, missing, recent):
        if missing:
            frames = retransmit_policy(self.state, RetransmitEvent("nack", seq, tuple(missing)), self.now)
            self._emit(frames, retransmit=True)
            return
        for s in [seq, *recent]:
            self.state.outstanding.pop(s, None)
        self._pump()

    # timers -------------------------------------------------------------
    def tick(self, now: float):
        self.now = now
        self.buffer.now = now
        for seq, out in list(self.state.outstanding.items()):
            if now - out.last_send >= self.ack_timeout:
                frames = retransmit_policy(self.state, RetransmitEvent("timeout", seq), now)
                self._emit(frames, retransmit=True)
        for key, s in list(self.buffer.staged.items()):
            if now - s.last_activity >= self.nack_timeout and now - s.last_nack >= self.nack_timeout:
                s.last_nack = now
                missing = [i for i in range(s.chunk_count) if i not in s.chunks]
                self._send_control(encode_ack(key[1], missing))
        self._pump()


# ---------------------------------------------------------------------------
# in-process channel simulator
# ---------------------------------------------------------------------------


class ChannelSimulator:
    """Seeded one-way link with loss, reordering, corruption and latency.

    Frames are delivered ``latency`` seconds after sending; a reordered
    frame gets an extra random delay of up to ``reorder_delay``.
    """

    def __init__(self, loss_rate=0.0, reorder_rate=0.0, corrupt_rate=0.0, latency=0.01,
                 reorder_delay=0.05, seed=0):
        self.loss_rate = loss_rate
        self.reorder_rate = reorder_rate
        self.corrupt_rate = corrupt_rate
        self.latency = latency
        self.reorder_delay = reorder_delay
        self.rng = random.Random(seed)
        self._heap: list = []
        self._n = 0
        self.bytes_in = 0
        self.frames_in = 0
        self.frames_dropped = 0
        self.now = 0.0

    def send(self, data: bytes):
        self.bytes_in += len(data)
        self.frames_in += 1
        if self.rng.random() < self.loss_rate:
            self.frames_dropped += 1
            return
        delay = self.latency
        if self.rng.random() < self.reorder_rate:
            delay += self.rng.random() * self.reorder_delay
        if self.rng.random() < self.corrupt_rate:
            b = bytearray(data)
            b[self.rng.randrange(len(b))] ^= 1 << self.rng.randrange(8)
            data = bytes(b)
        heapq.heappush(self._heap, (self.now + delay, self._n, data))
        self._n += 1

    def deliver(self, now: float) -> list:
        self.now = now
        out = []
        while self._heap and self._heap[0][0] <= now + 1e-12:
            out.append(heapq.heappop(self._heap)[2])
        return out

    @property
    def pending(self) -> int:
        return len(self._heap)


class Link:
    """Two endpoints joined by two simulated channels (up and down)."""

    def __init__(self, agent_id: int, server_id: int = 0, loss_rate=0.0, reorder_rate=0.0,
                 corrupt_rate=0.0, latency=0.01, seed=0, **endpoint_kw):
        self.up = ChannelSimulator(loss_rate, reorder_rate, corrupt_rate, latency, seed=seed * 2 + 1)
        self.down = ChannelSimulator(loss_rate, reorder_rate, corrupt_rate, latency, seed=seed * 2 + 2)
        self.agent = Endpoint(agent_id, self.up.send, **endpoint_kw)
        self.server = Endpoint(server_id, self.down.send, **endpoint_kw)

    def step(self, now: float):
        """Advance both directions; returns (to_server, to_agent) messages."""
        self.up.now = self.down.now = now
        self.agent.tick(now)
        self.server.tick(now)
        to_server, to_agent = [], []
        for data in self.up.deliver(now):
            to_server.extend(self.server.on_bytes(data))
        for data in self.down.deliver(now):
            to_agent.extend(self.agent.on_bytes(data))
        return to_server, to_agent


class InOrder:
    """Release messages in ``msg_seq`` order, skipping gaps that time out."""

    def __init__(self, gap_timeout: float = 2.0):
        self.expected = 1
        self.held: dict = {}
        self.gap_since: Optional[float] = None
        self.gap_timeout = gap_timeout
        self.skipped = 0

    def push(self, msg: Message, now: float) -> list:
        if msg.msg_seq < self.expected or msg.msg_seq in self.held:
            return []
        self.held[msg.msg_seq] = msg
        return self.release(now)

    def release(self, now: float) -> list:
        out = []
        while self.expected in self.held:
            out.append(self.held.pop(self.expected))
            self.expected += 1
            self.gap_since = None
        if self.held:
            if self.gap_since is None:
                self.gap_since = now
            elif now - self.gap_since >= self.gap_timeout:
                self.skipped += min(self.held) - self.expected
                self.expected = min(self.held)
                self.gap_since = None
                out.extend(self.release(now))
        return out


def write_bandwidth_csv(rows, path):
    """``rows``: iterable of (t_sec, bytes_up, bytes_down)."""
    with open(path, "w") as fh:
        fh.write("t_sec,bytes_up,bytes_down\n")
        for t, up, down in rows:
            fh.write(f"{t},{up},{down}\n")
