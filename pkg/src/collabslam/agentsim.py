"""Simulated agents standing in for the on-device visual-inertial odometry.

An agent follows a ground-truth trajectory, integrates odometry with a
seeded drift model, observes a synthetic landmark field through a pinhole
camera and streams keyframes to the server over the wire protocol.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import descriptors as bd
from .geometry import PinholeCamera, Se3, look_at, quat_multiply, quat_normalize
from .mapcore import KeyFrame, MapPoint
from .wire import MsgType, decode_drift, encode_hello, encode_keyframe

log = logging.getLogger(__name__)

MP_ID_SHIFT = 40


class TrajectoryKind(str, enum.Enum):
    Circle = "circle"
    Lissajous = "lissajous"
    FromFile = "file"


@dataclass
class TrajectorySpec:
    """Ground-truth camera path.

    ``Circle`` params: ``radius``, ``center``, ``laps`` (over ``duration``),
    ``start_angle``, ``height_amp``/``height_freq``, ``radius_amp``/``radius_freq``,
    ``yaw_amp``/``yaw_freq`` (look-direction wobble), ``direction`` (+1/-1).
    ``Lissajous`` params: ``ax``, ``ay``, ``fx``, ``fy``, ``phase``, ``z``,
    ``yaw_rate``.  ``FromFile`` reads a TUM or EuRoC ground-truth file.
    """

    kind: TrajectoryKind = TrajectoryKind.Circle
    duration: float = 30.0
    kf_rate: float = 10.0
    params: dict = field(default_factory=dict)
    path: Optional[str] = None
    t_start: float = 0.0

    def __post_init__(self):
        self.kind = TrajectoryKind(self.kind)
        if not self.kf_rate > 0 or not self.duration > 0:
            raise ValueError("kf_rate and duration must be positive")
        self._samples = None
        if self.kind is TrajectoryKind.FromFile:
            if not self.path:
                raise ValueError("FromFile trajectory needs a path")
            self._samples = load_ground_truth(self.path)

    @property
    def keyframe_times(self) -> np.ndarray:
        n = int(math.floor(self.duration * self.kf_rate + 1e-9))
        return self.t_start + np.arange(n) / self.kf_rate

    def pose_at(self, t: float) -> Se3:
        """World ← camera at time ``t`` (camera +Z forward, +Y image-down)."""
        p = self.params
        if self.kind is TrajectoryKind.Circle:
            r0 = p.get("radius", 4.0)
            c = np.asarray(p.get("center", (0.0, 0.0, 0.0)), dtype=float)
            omega = 2 * math.pi * p.get("laps", 1.0) / self.duration * p.get("direction", 1)
            s = t - self.t_start
            th = p.get("start_angle", 0.0) + omega * s
            # modulations run on absolute time so a trajectory split across agents stays continuous
            r = r0 + p.get("radius_amp", 0.0) * math.sin(2 * math.pi * p.get("radius_freq", 0.0) * t)
            z = p.get("height_amp", 0.0) * math.sin(2 * math.pi * p.get("height_freq", 0.0) * t)
            pos = c + np.array([r * math.cos(th), r * math.sin(th), z])
            look = th + p.get("yaw_amp", 0.0) * math.sin(2 * math.pi * p.get("yaw_freq", 0.0) * t)
            return look_at(pos, pos + np.array([math.cos(look), math.sin(look), p.get("pitch", 0.0)]))
        if self.kind is TrajectoryKind.Lissajous:
            s = t - self.t_start
            c = np.asarray(p.get("center", (0.0, 0.0, 0.0)), dtype=float)
            pos = c + np.array([
                p.get("ax", 3.0) * math.sin(2 * math.pi * p.get("fx", 0.05) * s + p.get("phase", 0.0)),
                p.get("ay", 3.0) * math.sin(2 * math.pi * p.get("fy", 0.07) * s),
                p.get("z", 0.0),
            ])
            look = p.get("yaw0", 0.0) + p.get("yaw_rate", 0.2) * s
            return look_at(pos, pos + np.array([math.cos(look), math.sin(look), 0.0]))
        return _interpolate(self._samples, t)


def load_ground_truth(path):
    """Read TUM (``t tx ty tz qx qy qz qw``) or EuRoC CSV ground truth.

    Returns ``(times, positions, quats_wxyz)`` sorted by time.
    """
    times, pos, quats = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "," in line:
                vals = [float(v) for v in line.split(",")[:8]]
                # EuRoC: ns, px py pz, qw qx qy qz
                times.append(vals[0] * 1e-9)
                pos.append(vals[1:4])
                quats.append(vals[4:8])
            else:
                vals = [float(v) for v in line.split()[:8]]
                times.append(vals[0])
                pos.append(vals[1:4])
                quats.append([vals[7], vals[4], vals[5], vals[6]])
    order = np.argsort(times)
    return np.asarray(times)[order], np.asarray(pos)[order], np.asarray(quats)[order]


def _interpolate(samples, t):
    times, pos, quats = samples
    t = float(np.clip(t, times[0], times[-1]))
    i = int(np.searchsorted(times, t))
    if i == 0 or times[i] == t:
        return Se3(quats[i], pos[i])
    a = (t - times[i - 1]) / (times[i] - times[i - 1])
    q0, q1 = quats[i - 1], quats[i]
    if np.dot(q0, q1) < 0:
        q1 = -q1
    q = quat_normalize((1 - a) * q0 + a * q1)
    return Se3(q, (1 - a) * pos[i - 1] + a * pos[i])


@dataclass
class DriftModel:
    """Per-step odometry error.

    Each step the agent's yaw gains ``yaw_rate_bias * dt`` about gravity,
    its position gains ``translation_bias * dt`` (world axes) and the
    increment is right-multiplied by ``Exp(xi)``, ``xi ~ N(0, sigma^2)``.
    ``random_walk_sigma`` is a scalar or six per-axis values ``(rho, phi)``.
    """

    yaw_rate_bias: float = 0.0
    translation_bias: tuple = (0.0, 0.0, 0.0)
    random_walk_sigma: object = 0.0
    seed: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.random_walk_sigma, dtype=float), (6,))

    @property
    def is_zero(self) -> bool:
        return self.yaw_rate_bias == 0.0 and not np.any(self.translation_bias) and not np.any(self.sigma)


@dataclass
class LandmarkField:
    positions: np.ndarray
    descriptors: np.ndarray
    descriptor_flip_noise: float = 1.0
    leaf_of: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.positions)

    def min_pairwise_distance(self, block: int = 2048) -> int:
        best = bd.NBITS
        D = self.descriptors
        for i in range(0, len(D), block):
            H = bd.hamming_matrix(D[i:i + block], D[i:])
            for k in range(min(block, len(D) - i)):
                H[k, : k + 1] = bd.NBITS
            best = min(best, int(H.min()))
        return best


def make_prototypes(seed=0, branching=10, depth=3, flips=(40, 40)):
    """Hierarchical descriptor prototypes: leaf ``i`` descends from the tree path of ``i``."""
    rng = np.random.default_rng(seed)
    level = bd.random_descriptors(branching, rng)
    for f in flips[: depth - 1]:
        parents = np.repeat(level, branching, axis=0)
        level = bd.flip_bits_fast(parents, f, rng)
    return level


def make_landmark_field(n=5000, seed=0, center=(0.0, 0.0, 0.0), r_min=7.0, r_max=10.0,
                        z_min=-1.5, z_max=1.5, flip_noise=1.0, proto_seed=1234,
                        leaf_flips=56, min_distance=80) -> LandmarkField:
    """Landmarks in a thick cylindrical shell with well-separated descriptors.

    Descriptors descend from a fixed prototype tree (shared across fields
    with the same ``proto_seed``) with ``leaf_flips`` extra bits each.
    Any landmark closer than ``min_distance`` bits to another one is redrawn.
    """
    rng = np.random.default_rng(seed)
    c = np.asarray(center, dtype=float)
    ang = rng.uniform(0, 2 * math.pi, n)
    rad = np.sqrt(rng.uniform(r_min ** 2, r_max ** 2, n))
    pos = np.stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang), c[2] + rng.uniform(z_min, z_max, n)], axis=1)
    protos = make_prototypes(proto_seed)
    leaf = rng.permutation(np.arange(n) % len(protos))
    desc = bd.flip_bits_fast(protos[leaf], leaf_flips, rng)
    # redraw collisions; different leaves are far apart by construction,
    # so only leaves sharing a top-level branch need checking
    branch = leaf // (len(protos) // 10)
    for _ in range(100):
        bad = set()
        for b in np.unique(branch):
            idx = np.nonzero(branch == b)[0]
            H = bd.hamming_matrix(desc[idx], desc[idx])
            np.fill_diagonal(H, bd.NBITS)
            ii, jj = np.nonzero(np.triu(H < min_distance))
            bad.update(idx[jj].tolist())
        if not bad:
            break
        bad = np.array(sorted(bad))
        desc[bad] = bd.flip_bits_fast(protos[leaf[bad]], leaf_flips, rng)
    else:
        raise RuntimeError("could not separate landmark descriptors")
    return LandmarkField(pos, desc, flip_noise, leaf)


# ---------------------------------------------------------------------------
# the agent
# ---------------------------------------------------------------------------


@dataclass
class AgentConfig:
    agent_id: int
    trajectory: TrajectorySpec
    drift: DriftModel = field(default_factory=DriftModel)
    world_offset: Se3 = field(default_factory=Se3.identity)
    max_keypoints: int = 700
    max_new_points: int = 70
    pixel_noise: float = 0.5
    point_noise: float = 0.0
    max_depth: float = 30.0
    track_length: int = 0           # keyframes a map point lives before re-triangulation; 0 = forever
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    seed: int = 0


class Agent:
    """Produces keyframes from ground truth plus drifting odometry."""

    def __init__(self, cfg: AgentConfig, field: LandmarkField):
        self.cfg = cfg
        self.field = field
        self.rng = np.random.default_rng([cfg.seed, cfg.agent_id])
        self.drift_rng = np.random.default_rng([cfg.drift.seed, cfg.agent_id, 7])
        self.seq = 0
        self.est: Optional[Se3] = None
        self.prev_true: Optional[Se3] = None
        self.correction = Se3.identity()
        self.mapped: dict = {}
        self.next_mp = 1
        self.history: list = []  # (seq, t, true pose, estimated pose)
        self.epoch = 0
        self.pending_corrections: dict = {}
        self.low_texture = 0

    def _advance(self, t: float) -> Se3:
        true = self.cfg.trajectory.pose_at(t)
        d = self.cfg.drift
        if self.est is None or d.is_zero:
            est = self.correction @ self.cfg.world_offset @ true
        else:
            dt = 1.0 / self.cfg.trajectory.kf_rate
            nominal = self.est @ (self.prev_true.inverse() @ true)
            R = Se3.from_yaw(d.yaw_rate_bias * dt).R @ nominal.R
            tvec = nominal.t + np.asarray(d.translation_bias, dtype=float) * dt
            est = Se3.from_rt(R, tvec)
            if np.any(d.sigma):
                est = est @ Se3.exp(self.drift_rng.normal(size=6) * d.sigma)
        self.prev_true = true
        self.est = est
        return true

    def simulate_step(self, t: float):
        """Return ``(KeyFrame, new MapPoints)`` for time ``t``."""
        traj = self.cfg.trajectory
        if not traj.t_start - 1e-9 <= t <= traj.t_start + traj.duration + 1e-9:
            raise ValueError(f"t={t} outside trajectory")
        true = self._advance(t)
        cam = self.cfg.camera
        Pc = true.inverse().act(self.field.positions)
        uv, valid = cam.project_many(Pc)
        valid &= (Pc[:, 2] > 0.1) & (Pc[:, 2] < self.cfg.max_depth)
        vis = np.nonzero(valid)[0]
        if len(vis) > self.cfg.max_keypoints:
            vis = np.sort(self.rng.choice(vis, self.cfg.max_keypoints, replace=False))
        kps = uv[vis] + self.rng.normal(scale=self.cfg.pixel_noise, size=(len(vis), 2))
        kps[:, 0] = np.clip(kps[:, 0], 0.0, cam.width - 1e-3)
        kps[:, 1] = np.clip(kps[:, 1], 0.0, cam.height - 1e-3)
        flips = self.rng.poisson(self.field.descriptor_flip_noise, len(vis))
        desc = bd.flip_bits_fast(self.field.descriptors[vis], flips, self.rng)

        observations = {}
        new_points = []
        unmapped = []
        expired = []
        for k, lm in enumerate(vis):
            mp = self.mapped.get(int(lm))
            if mp is None:
                unmapped.append(k)
                continue
            observations[k] = mp[0]
            if self.cfg.track_length and self.seq - mp[1] >= self.cfg.track_length:
                expired.append(k)
        if unmapped or expired:
            # unseen landmarks first (nearest first), then the oldest tracks are re-triangulated
            order = sorted(unmapped, key=lambda k: (Pc[vis[k], 2], k))
            order += sorted(expired, key=lambda k: (self.mapped[int(vis[k])][1], k))
            chosen = order[: self.cfg.max_new_points]
            cam_to_est = self.est @ true.inverse()
            for k in sorted(chosen):
                lm = int(vis[k])
                mp_id = (self.cfg.agent_id << MP_ID_SHIFT) | self.next_mp
                self.next_mp += 1
                x = self.field.positions[lm]
                if self.cfg.point_noise > 0:
                    x = x + self.rng.normal(scale=self.cfg.point_noise, size=3)
                kf_id = (self.cfg.agent_id, self.seq)
                new_points.append(MapPoint(mp_id, cam_to_est.act(x), desc[k].tobytes(), {kf_id}))
                self.mapped[lm] = (mp_id, self.seq)
                observations[k] = mp_id
        low = len(vis) < 8
        self.low_texture += int(low)
        kf = KeyFrame(self.cfg.agent_id, self.seq, float(t), self.est, kps.astype(np.float32), desc,
                      observations, self.epoch, low)
        self.history.append((self.seq, float(t), true, self.est))
        self.seq += 1
        return kf, new_points

    def apply_correction(self, notice) -> bool:
        """Apply drift notices in index order; out-of-order ones wait."""
        self.pending_corrections[notice.index] = notice
        applied = False
        while self.epoch + 1 in self.pending_corrections:
            n = self.pending_corrections.pop(self.epoch + 1)
            self.correction = n.drift @ self.correction
            if self.est is not None:
                self.est = n.drift @ self.est
            self.history = [
                (s, t, tr, n.drift @ est if s >= n.from_sequence else est) for s, t, tr, est in self.history
            ]
            self.epoch += 1
            applied = True
        return applied


class AgentClient:
    """An agent bound to a wire endpoint: the agent side of a session."""

    def __init__(self, agent: Agent, endpoint):
        self.agent = agent
        self.endpoint = endpoint
        self.times = list(agent.cfg.trajectory.keyframe_times)
        self.next_idx = 0
        self.connected = False
        self.sent = 0
        self.bye_sent = False

    @property
    def agent_id(self):
        return self.agent.cfg.agent_id

    def connect(self):
        self.endpoint.send(MsgType.Hello, encode_hello(self.agent_id, self.agent.seq))
        self.connected = True

    def due(self, now: float) -> bool:
        return self.next_idx < len(self.times) and self.times[self.next_idx] <= now + 1e-9

    def step(self, now: float):
        if not self.connected and self.times and self.times[0] <= now + 1e-9:
            self.connect()
        while self.due(now):
            kf, pts = self.agent.simulate_step(self.times[self.next_idx])
            self.endpoint.send(MsgType.KeyFramePush, encode_keyframe(kf, pts))
            self.sent += 1
            self.next_idx += 1
        if self.finished_sending and not self.bye_sent:
            self.endpoint.send(MsgType.Bye)
            self.bye_sent = True

    @property
    def finished_sending(self) -> bool:
        return self.connected and self.next_idx >= len(self.times)

    def on_message(self, msg):
        if msg.msg_type is MsgType.DriftNotify:
            self.agent.apply_correction(decode_drift(msg.payload))

    def report(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "keyframes_sent": self.sent,
            "bytes_up": self.endpoint.bytes_sent,
            "bytes_down": self.endpoint.bytes_received,
            "corrections_applied": self.agent.epoch,
            "low_texture_keyframes": self.agent.low_texture,
            "degraded": self.endpoint.degraded,
            "abandoned_messages": len(self.endpoint.state.abandoned),
        }


def run_agent(spec: TrajectorySpec, drift: DriftModel, field: LandmarkField, server_endpoint,
              agent_id: int = 1, dt: float = 0.01, **agent_kw) -> dict:
    """Stream one simulated agent to a server and return its session report.

    ``server_endpoint`` is either an in-process ``Server`` (joined through a
    simulated :class:`~collabslam.wire.Link`) or a ``"host:port"`` string
    for a TCP server.
    """
    cfg = AgentConfig(agent_id, spec, drift, **agent_kw)
    agent = Agent(cfg, field)
    if isinstance(server_endpoint, str):
        from .net import run_tcp_agent

        return run_tcp_agent(agent, server_endpoint, dt=dt)
    from .wire import Link

    link = Link(agent_id, seed=agent_id)
    client = AgentClient(agent, link.agent)
    server = server_endpoint
    server.attach(agent_id, link.server)
    now = spec.t_start
    end = spec.t_start + spec.duration + 5.0
    while now <= end:
        client.step(now)
        to_server, to_agent = link.step(now)
        for m in to_server:
            server.on_message(agent_id, m, now)
        for m in to_agent:
            client.on_message(m)
        server.tick(now)
        if client.finished_sending and link.agent.idle and link.server.idle and not link.up.pending:
            break
        now = round(now + dt, 9)
    return client.report()


def main(argv=None):
    import argparse
    import json

    from .net import run_tcp_agent
    from .scenario import load_scenario

    p = argparse.ArgumentParser(prog="collabslam-agent", description="Simulated agent streaming to a TCP server")
    p.add_argument("--config", required=True, help="scenario TOML (the server must use the same one)")
    p.add_argument("--agent-id", type=int, required=True)
    p.add_argument("--server", default="127.0.0.1:7400", help="host:port of the server")
    p.add_argument("--loss-rate", type=float, default=0.0, help="simulated frame loss on the uplink")
    p.add_argument("--reorder-rate", type=float, default=0.0, help="simulated frame reordering on the uplink")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--fast", action="store_true", help="advance the keyframe clock as fast as possible")
    p.add_argument("--report", help="write the session report JSON here")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    sc = load_scenario(args.config)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    cfgs = {c.agent_id: c for c in sc.agent_configs()}
    if args.agent_id not in cfgs:
        p.error(f"agent {args.agent_id} not in scenario (have {sorted(cfgs)})")
    agent = Agent(cfgs[args.agent_id], sc.build_field())
    rep = run_tcp_agent(agent, args.server, realtime=not args.fast, loss_rate=args.loss_rate,
                        reorder_rate=args.reorder_rate, seed=sc.seed * 97 + args.agent_id)
    text = json.dumps(rep, indent=1, sort_keys=True)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
