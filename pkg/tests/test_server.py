import numpy as np
import pytest

from collabslam import descriptors as bd
from collabslam.agentsim import Agent, AgentClient, AgentConfig, DriftModel, TrajectorySpec
from collabslam.geometry import Se3
from collabslam.mapcore import validate
from collabslam.placerec import train_vocabulary
from collabslam.server import Server, run_session
from collabslam.wire import Endpoint, Link, Message, MsgType, ProtocolError, encode_hello, encode_keyframe


@pytest.fixture(scope="module")
def vocab(field):
    return train_vocabulary(field.descriptors, seed=0)


class Feed:
    """Hands numbered messages for one agent straight to a server."""

    def __init__(self, server, agent_id):
        self.server, self.agent_id, self.seq = server, agent_id, 0

    def __call__(self, msg_type, payload=b"", now=0.0):
        self.seq += 1
        return self.server.on_message(self.agent_id, Message(msg_type, self.agent_id, self.seq, payload), now)


def keyframes(field, agent_id=1, n=5, laps=0.1):
    spec = TrajectorySpec("circle", n / 10, 10.0, {"radius": 4.0, "laps": laps})
    agent = Agent(AgentConfig(agent_id, spec), field)
    return [agent.simulate_step(t) for t in spec.keyframe_times]


def test_first_connect_creates_handler_and_submap(vocab):
    s = Server(vocab)
    assert Feed(s, 1)(MsgType.Hello, encode_hello(1)) == [("connect", 1)]
    assert list(s.handlers) == [1] and list(s.container.submaps) == [1]
    assert s.two_agent_milestone is None
    Feed(s, 2)(MsgType.Hello, encode_hello(2), now=1.5)
    assert s.two_agent_milestone == 1.5


def test_duplicate_live_connection_rejected(vocab):
    s = Server(vocab)
    s.on_connect(1)
    with pytest.raises(ProtocolError):
        s.on_connect(1)
    with pytest.raises(ProtocolError):
        Feed(s, 3)(MsgType.Hello, encode_hello(4))


def test_keyframe_before_hello_is_dropped(vocab, field):
    s = Server(vocab)
    kf, pts = keyframes(field, n=1)[0]
    assert Feed(s, 1)(MsgType.KeyFramePush, encode_keyframe(kf, pts)) == [("reject", "no session")]


def test_keyframe_without_candidates_is_insert_only(vocab, field):
    s = Server(vocab)
    feed = Feed(s, 1)
    feed(MsgType.Hello, encode_hello(1))
    kf, pts = keyframes(field, n=1)[0]
    assert feed(MsgType.KeyFramePush, encode_keyframe(kf, pts)) == [("insert", (1, 0))]
    assert s.handlers[1].keyframes_received == 1


def test_reconnect_resumes_submap(vocab, field):
    s = Server(vocab)
    frames = keyframes(field, n=6)
    s.attach(1, Endpoint(0, lambda b: None))
    feed = Feed(s, 1)
    feed(MsgType.Hello, encode_hello(1))
    for kf, pts in frames[:3]:
        feed(MsgType.KeyFramePush, encode_keyframe(kf, pts))
    s.detach(1)
    s.attach(1, Endpoint(0, lambda b: None))   # fresh connection restarts message numbering
    feed = Feed(s, 1)
    feed(MsgType.Hello, encode_hello(1, 3))
    for kf, pts in frames[3:]:
        feed(MsgType.KeyFramePush, encode_keyframe(kf, pts))
    sub = s.container.submaps[1]
    assert list(s.container.submaps) == [1] and sub.sequence == list(range(6))
    assert s.handlers[1].connects == 2 and validate(sub) == []


def test_duplicate_and_out_of_order_keyframes_do_not_poison(vocab, field):
    s = Server(vocab)
    feed = Feed(s, 1)
    feed(MsgType.Hello, encode_hello(1))
    frames = keyframes(field, n=3)
    for kf, pts in frames:
        feed(MsgType.KeyFramePush, encode_keyframe(kf, pts))
    kf, pts = frames[1]
    assert feed(MsgType.KeyFramePush, encode_keyframe(kf, pts))[0][0] == "reject"
    assert s.handlers[1].rejected_keyframes == 1
    assert validate(s.container.submaps[1]) == []


def test_keyframes_after_a_lost_one_are_kept(vocab, field):
    s = Server(vocab)
    feed = Feed(s, 1)
    feed(MsgType.Hello, encode_hello(1))
    frames = keyframes(field, n=4)
    lost_ids = {mp.mp_id for mp in frames[1][1]}
    assert lost_ids
    for i, (kf, pts) in enumerate(frames):
        if i != 1:
            assert feed(MsgType.KeyFramePush, encode_keyframe(kf, pts))[0][0] == "insert"
    h, sub = s.handlers[1], s.container.submaps[1]
    assert h.keyframes_received == 3 and h.rejected_keyframes == 0
    assert h.dropped_observations == sum(m in lost_ids for kf, _ in frames[2:] for m in kf.observations.values())
    assert h.dropped_observations > 0
    assert validate(sub) == []


def test_fuzzed_input_never_crashes(vocab, field):
    rng = np.random.default_rng(0)
    s = Server(vocab)
    feed = Feed(s, 1)
    feed(MsgType.Hello, encode_hello(1))
    good = encode_keyframe(*keyframes(field, n=1)[0])
    ep = Endpoint(0, lambda b: None)
    for n in range(400):
        kind = n % 4
        if kind == 0:
            payload = rng.bytes(int(rng.integers(0, 600)))
        elif kind == 1:
            payload = good[: int(rng.integers(0, len(good)))]
        elif kind == 2:
            b = bytearray(good)
            for _ in range(8):
                b[int(rng.integers(len(b)))] ^= 1 << int(rng.integers(8))
            payload = bytes(b)
        else:
            payload = good
        feed(MsgType.KeyFramePush, payload)
        for m in ep.on_bytes(rng.bytes(int(rng.integers(0, 100)))):
            s.on_message(1, m)
    assert s.handlers[1].keyframes_received == 1  # the intact frame, once
    assert validate(s.container.submaps[1]) == []


def _session(field, vocab, agents):
    s = Server(vocab)
    clients, links = [], {}
    for aid, off, spec, drift, wo in agents:
        link = Link(aid, 0, seed=aid)
        c = AgentClient(Agent(AgentConfig(aid, spec, drift, world_offset=wo), field), link.agent)
        c.start_offset = off
        clients.append(c)
        links[aid] = link
    run_session(s, clients, links)
    return s, clients, links


@pytest.fixture(scope="module")
def two_agents(field, vocab):
    spec = TrajectorySpec("circle", 8.0, 10.0, {"radius": 4.0, "laps": 0.4})
    return _session(field, vocab, [
        (1, 0.0, spec, DriftModel(0.002), Se3()),
        (2, 3.0, spec, DriftModel(-0.01, (0.0, 0.01, 0.0), seed=3), Se3.from_yaw(0.5, [1.0, 0.0, 0.0])),
    ])


@pytest.fixture(scope="module")
def one_agent_loop(field, vocab):
    spec = TrajectorySpec("circle", 14.0, 10.0, {"radius": 4.0, "laps": 1.25})
    return _session(field, vocab, [(1, 0.0, spec, DriftModel(0.005, (0.003, 0.0, 0.0)), Se3())])


def test_intra_map_loop_notifies_owner(one_agent_loop):
    s, clients, _ = one_agent_loop
    assert s.accepted["inter_map_ba"] >= 1 and s.merges == 0
    assert s.handlers[1].corrections_sent == s.accepted["inter_map_ba"]
    assert clients[0].agent.epoch == s.handlers[1].corrections_sent


def test_overlap_fuses_and_notifies_both(two_agents):
    s, clients, _ = two_agents
    assert s.merges == 1 and s.container.merge_groups == [[1, 2]]
    notified = {e["agent"] for e in s.stage_log if e["stage"] == "drift_notify"}
    assert notified == {1, 2}
    for sub in s.container.submaps.values():
        assert validate(sub) == []


@pytest.mark.parametrize("which", ["two_agents", "one_agent_loop"])
def test_counters_match_wire_totals(which, request):
    s, clients, links = request.getfixturevalue(which)
    for c in clients:
        h = s.handlers[c.agent_id]
        link = links[c.agent_id]
        assert h.bytes_up == link.server.bytes_received == link.agent.bytes_sent
        assert h.bytes_down == link.server.bytes_sent == link.agent.bytes_received
        assert h.keyframes_received == c.sent


@pytest.mark.parametrize("which", ["two_agents", "one_agent_loop"])
def test_correction_sequences_are_monotone(which, request):
    s, _, _ = request.getfixturevalue(which)
    by_agent = {}
    for e in s.stage_log:
        if e["stage"] == "drift_notify":
            by_agent.setdefault(e["agent"], []).append((e["index"], e["from_sequence"]))
    assert by_agent
    for seqs in by_agent.values():
        assert [i for i, _ in seqs] == list(range(1, len(seqs) + 1))
        assert all(b >= a for (_, a), (_, b) in zip(seqs, seqs[1:]))
