"""Server orchestration: agent handlers and the keyframe pipeline.

The :class:`Server` is transport agnostic.  Each agent is attached with a
wire :class:`~collabslam.wire.Endpoint`; decoded application messages are
fed to :meth:`Server.on_message`.  :func:`run_session` drives agents and a
server over simulated links on a shared deterministic clock, and
:mod:`collabslam.net` runs the same server over TCP.
"""

from __future__ import annotations

import argparse
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fusion import FusionConfig, verify_candidate
from .geometry import PinholeCamera, Se3
from .mapcore import (DuplicateKeyFrame, OutOfOrderKeyFrame, ServerMapContainer, ServerSubmap,
                      insert_keyframe)
from .placerec import PlaceRecognizer, Route, Vocabulary, dispatch
from .posegraph import GraphError, LoopEdge, Mode, merge_submaps
from .wire import (DriftNotice, InOrder, MsgType, ProtocolError, WireError, decode_hello, decode_keyframe,
                   encode_drift)

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    min_gap: int = 30
    top_k: int = 3
    min_score: float = 0.3
    consistency: int = 2
    cooldown: int = 10
    gap_timeout: float = 2.0
    anchor_other: bool = True
    fusion: FusionConfig = field(default_factory=FusionConfig)
    camera: PinholeCamera = field(default_factory=PinholeCamera)


@dataclass
class AgentHandler:
    agent_id: int
    submap_id: int
    endpoint: object = None
    connected: bool = False
    keyframes_received: int = 0
    corrections_sent: int = 0
    rejected_keyframes: int = 0
    dropped_observations: int = 0  # references to map points lost with abandoned messages
    connects: int = 0
    cooldown_until: int = -1
    corrections: list = field(default_factory=list)  # agent-frame drifts, by index - 1
    last_from_sequence: int = -1

    @property
    def bytes_up(self) -> int:
        return self.endpoint.bytes_received if self.endpoint else 0

    @property
    def bytes_down(self) -> int:
        return self.endpoint.bytes_sent if self.endpoint else 0

    def counters(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "submap_id": self.submap_id,
            "keyframes_received": self.keyframes_received,
            "rejected_keyframes": self.rejected_keyframes,
            "dropped_observations": self.dropped_observations,
            "corrections_sent": self.corrections_sent,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "connects": self.connects,
        }


class Server:
    def __init__(self, vocab: Vocabulary, cfg: ServerConfig = None):
        self.cfg = cfg or ServerConfig()
        self.vocab = vocab
        self.container = ServerMapContainer()  # created eagerly
        self.recognizer = PlaceRecognizer(vocab, self.cfg.min_gap, self.cfg.top_k, self.cfg.min_score,
                                          self.cfg.consistency)
        self.handlers: dict = {}
        self.endpoints: dict = {}
        self.inorder: dict = {}
        self.loops: list = []
        self.fusion_events: list = []
        self.optimization_reports: list = []
        self.stage_log: list = []
        self.candidates_seen = 0
        self.query_log: list = []  # (query key, [candidate keys]) per inserted keyframe
        self.merges = 0
        self.accepted = {"inter_map_ba": 0, "multi_map_fusion": 0}
        self._loop_order = 0
        self.two_agent_milestone: Optional[float] = None

    # connection management ----------------------------------------------
    def attach(self, agent_id: int, endpoint):
        """Register the transport endpoint that talks to ``agent_id``."""
        self.endpoints[agent_id] = endpoint
        self.inorder[agent_id] = InOrder(self.cfg.gap_timeout)
        h = self.handlers.get(agent_id)
        if h is not None and not h.connected:
            h.endpoint = endpoint

    def detach(self, agent_id: int):
        h = self.handlers.get(agent_id)
        if h is not None:
            h.connected = False
        self.endpoints.pop(agent_id, None)

    def on_connect(self, agent_id: int, now: float = 0.0) -> AgentHandler:
        h = self.handlers.get(agent_id)
        if h is not None and h.connected:
            raise ProtocolError(f"agent {agent_id} already connected")
        if h is None:
            sub = ServerSubmap(agent_id, agent_id)
            self.container.add_submap(sub)
            h = AgentHandler(agent_id, sub.submap_id)
            self.handlers[agent_id] = h
            if len(self.handlers) == 2 and self.two_agent_milestone is None:
                self.two_agent_milestone = now
                log.info("two agent handlers exist; cross-map queries active")
        h.endpoint = self.endpoints.get(agent_id, h.endpoint)
        h.connected = True
        h.connects += 1
        return h

    # message entry point ------------------------------------------------
    def on_message(self, agent_id: int, msg, now: float = 0.0) -> list:
        """Handle one reassembled message from ``agent_id``; returns pipeline side effects."""
        order = self.inorder.setdefault(agent_id, InOrder(self.cfg.gap_timeout))
        effects = []
        for m in order.push(msg, now):
            effects += self._dispatch(agent_id, m, now)
        return effects

    def _dispatch(self, agent_id: int, msg, now) -> list:
        if msg.msg_type is MsgType.Hello:
            try:
                hello_agent, _ = decode_hello(msg.payload)
            except WireError:
                return []
            if hello_agent != agent_id:
                raise ProtocolError(f"hello for agent {hello_agent} on connection of {agent_id}")
            self.on_connect(agent_id, now)
            return [("connect", agent_id)]
        h = self.handlers.get(agent_id)
        if h is None or not h.connected:
            log.warning("agent %d: %s before hello dropped", agent_id, msg.msg_type.name)
            return [("reject", "no session")]
        if msg.msg_type is MsgType.KeyFramePush:
            try:
                kf, pts = decode_keyframe(msg.payload)
            except WireError as e:
                h.rejected_keyframes += 1
                log.warning("agent %d: undecodable keyframe: %s", h.agent_id, e)
                return [("reject", str(e))]
            if kf.agent_id != h.agent_id:
                h.rejected_keyframes += 1
                return [("reject", "agent id mismatch")]
            return self.pipeline(h, kf, pts, now)
        if msg.msg_type is MsgType.Bye:
            h.connected = False
            return [("bye", h.agent_id)]
        return []

    def tick(self, now: float) -> list:
        effects = []
        for agent_id, order in self.inorder.items():
            for m in order.release(now):
                effects += self._dispatch(agent_id, m, now)
        return effects

    # pipeline -----------------------------------------------------------
    def pipeline(self, h: AgentHandler, kf, new_points, now: float = 0.0) -> list:
        sub = self.container.submaps[h.submap_id]
        # corrections the agent had not applied yet when it produced this frame
        fix = Se3.identity()
        for d in h.corrections[kf.correction_epoch:]:
            fix = d @ fix
        to_group = sub.to_group @ fix
        kf.pose = to_group @ kf.pose
        for mp in new_points:
            mp.position = to_group.act(mp.position)
        # a lost message takes its new map points with it; keep the keyframe
        known = {mp.mp_id for mp in new_points}
        dangling = [i for i, m in kf.observations.items() if m not in known and m not in sub.map_points]
        for i in dangling:
            del kf.observations[i]
        h.dropped_observations += len(dangling)
        try:
            insert_keyframe(sub, kf, new_points)
        except (DuplicateKeyFrame, OutOfOrderKeyFrame, ValueError) as e:
            h.rejected_keyframes += 1
            self.stage_log.append({"t": now, "kf": list(kf.kf_id), "stage": "reject", "reason": str(e)})
            return [("reject", str(e))]
        h.keyframes_received += 1
        effects = [("insert", kf.kf_id)]
        self.stage_log.append({"t": now, "kf": list(kf.kf_id), "stage": "insert"})
        key = (sub.submap_id, kf.seq)
        bow = self.vocab.transform(kf.descriptors)
        cands = self.recognizer.query(key, bow, h.agent_id)
        self.recognizer.add(key, bow)
        self.candidates_seen += len(cands)
        self.query_log.append((key, [c.matched_kf for c in cands]))
        if not cands:
            return effects
        effects.append(("candidates", [c.matched_kf for c in cands]))
        if kf.seq < h.cooldown_until:
            return effects
        for cand in cands:
            route = dispatch(cand, self.container)
            m_sub = self.container.submaps[cand.matched_kf[0]]
            res = verify_candidate(sub, kf.seq, m_sub, cand.matched_kf[1], self.cfg.camera, self.cfg.fusion)
            ev = dict(res.event, t=now, route=route.value, score=cand.score)
            self.fusion_events.append(ev)
            if not res.accepted:
                continue
            effects += self._accept(h, sub, m_sub, kf, cand, route, res, now)
            break
        return effects

    def _accept(self, h, sub, m_sub, kf, cand, route, res, now) -> list:
        pose_m = m_sub.keyframes[cand.matched_kf[1]].pose
        Z = pose_m.inverse() @ res.T_align.inverse() @ kf.pose
        self.fusion_events[-1]["relative_pose"] = Z.to_tum()
        self._loop_order += 1
        self.loops.append(LoopEdge(cand.matched_kf, cand.query_kf, Z, res.hypothesis.inlier_count,
                                   self._loop_order))
        if route is Route.TriggerInterMapBA:
            mode = Mode.InterMapBA
            loops = [lp for lp in self.loops if lp.a[0] == sub.submap_id and lp.b[0] == sub.submap_id]
            T = None
        else:
            mode = Mode.MultiMapFusion
            members = set(self.container.group(sub.submap_id)) | set(self.container.group(m_sub.submap_id))
            loops = [lp for lp in self.loops if lp.a[0] in members and lp.b[0] in members]
            T = None if self.container.same_group(sub.submap_id, m_sub.submap_id) else res.T_align
        was_merge = T is not None
        try:
            mr = merge_submaps(self.container, sub.submap_id, m_sub.submap_id, T, loops, sub.submap_id, mode,
                               anchor_other=self.cfg.anchor_other)
        except GraphError as e:
            self.loops.pop()
            self.fusion_events[-1].update(accepted=False, reason=f"graph: {e}")
            return [("graph_error", str(e))]
        rep = dict(mr.optimization.report(), t=now, mode=mode.value, query=list(kf.kf_id),
                   match=list(cand.matched_kf), vertices=len(mr.graph.vertices), fixed=len(mr.graph.fixed),
                   sequence_edges=len(mr.graph.sequence_edges), loop_edges=len(mr.graph.loop_edges))
        self.optimization_reports.append(rep)
        self.accepted[mode.value] += 1
        if was_merge:
            self.merges += 1
        h.cooldown_until = kf.seq + self.cfg.cooldown
        effects = [("fused" if mode is Mode.MultiMapFusion else "loop", cand.matched_kf, kf.kf_id)]
        for corr in mr.corrections:
            effects += self._notify(corr, now)
        return effects

    def _notify(self, corr, now) -> list:
        h = self.handlers.get(corr.agent_id)
        if h is None:
            return []
        from_seq = max(corr.from_sequence, h.last_from_sequence)
        h.last_from_sequence = from_seq
        h.corrections.append(corr.drift)
        notice = DriftNotice(corr.agent_id, from_seq, corr.drift, len(h.corrections))
        ep = h.endpoint or self.endpoints.get(corr.agent_id)
        if ep is not None:
            ep.send(MsgType.DriftNotify, encode_drift(notice))
        h.corrections_sent += 1
        self.stage_log.append({"t": now, "agent": corr.agent_id, "stage": "drift_notify", "index": notice.index,
                               "from_sequence": from_seq})
        return [("notify", corr.agent_id, from_seq)]

    # reports --------------------------------------------------------------
    def trajectories(self) -> dict:
        """``submap_id -> [(timestamp, pose in group frame)]``."""
        return {sid: [(kf.timestamp, kf.pose) for kf in s.keyframes.values()]
                for sid, s in sorted(self.container.submaps.items())}

    def summary(self) -> dict:
        return {
            "handlers": [h.counters() for _, h in sorted(self.handlers.items())],
            "merge_groups": self.container.merge_groups,
            "merges": self.merges,
            "accepted": dict(self.accepted),
            "loop_edges": len(self.loops),
            "candidates": self.candidates_seen,
            "fusion_attempts": len(self.fusion_events),
        }


# ---------------------------------------------------------------------------
# deterministic in-process session
# ---------------------------------------------------------------------------


def run_session(server: Server, clients: list, links: dict, dt: float = 0.01, start: float = 0.0,
                drain: float = 5.0, bandwidth_interval: float = 1.0, on_step=None) -> dict:
    """Advance agents, links and server on one simulated clock until all agents finish.

    ``clients`` are :class:`~collabslam.agentsim.AgentClient` objects with a
    ``start_offset`` attribute (session seconds before streaming begins);
    ``links`` maps agent id to its :class:`~collabslam.wire.Link`.  Returns
    bandwidth rows ``(t_sec, bytes_up, bytes_down)``, one per interval.
    """
    for c in clients:
        server.attach(c.agent_id, links[c.agent_id].server)
    rows = []
    next_row = bandwidth_interval
    step = 0
    now = start
    end_at = None
    while True:
        now = round(start + step * dt, 9)
        for c in clients:
            c.step(now - getattr(c, "start_offset", 0.0) + c.agent.cfg.trajectory.t_start)
        for c in clients:
            link = links[c.agent_id]
            to_server, to_agent = link.step(now)
            for m in to_server:
                server.on_message(c.agent_id, m, now)
            for m in to_agent:
                c.on_message(m)
        server.tick(now)
        if now - start >= next_row - 1e-9:
            up = sum(links[c.agent_id].agent.bytes_sent for c in clients)
            down = sum(links[c.agent_id].server.bytes_sent for c in clients)
            rows.append((round(next_row, 6), up, down))
            next_row += bandwidth_interval
        if on_step is not None:
            on_step(now)
        done = all(c.finished_sending for c in clients)
        quiet = all(links[c.agent_id].agent.idle and links[c.agent_id].server.idle
                    and not links[c.agent_id].up.pending and not links[c.agent_id].down.pending for c in clients)
        if done and quiet:
            break
        if done and end_at is None:
            end_at = now + drain
        if end_at is not None and now >= end_at:
            break
        step += 1
    up = sum(links[c.agent_id].agent.bytes_sent for c in clients)
    down = sum(links[c.agent_id].server.bytes_sent for c in clients)
    rows.append((round(now - start, 6), up, down))
    return {"bandwidth": rows, "end_time": now}


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def main(argv=None):
    p = argparse.ArgumentParser(prog="collabslam-server", description="Collaborative SLAM server")
    p.add_argument("--listen", default="127.0.0.1:7400", help="host:port to accept agents on")
    p.add_argument("--vocab", help="vocabulary file (trained from the scenario field if absent)")
    p.add_argument("--config", help="scenario TOML (landmark field and server settings)")
    p.add_argument("--report-dir", default="server-report")
    p.add_argument("--max-agents", type=int, default=0, help="exit after this many agents said bye (0: run until signal)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    from .net import serve
    from .scenario import load_scenario, scenario_vocabulary

    sc = load_scenario(args.config) if args.config else None
    vocab = scenario_vocabulary(sc, args.vocab)
    server = Server(vocab, sc.server_config() if sc else ServerConfig())
    host, _, port = args.listen.rpartition(":")
    serve(server, host or "127.0.0.1", int(port), args.report_dir, max_agents=args.max_agents)


if __name__ == "__main__":
    main()
