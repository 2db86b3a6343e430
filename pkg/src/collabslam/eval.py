"""Trajectory metrics, scenario runner and the evaluation CLI."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Se3, yaw_of
from .mapcore import validate

log = logging.getLogger(__name__)

ASSOC_TOLERANCE = 0.02


class EvalError(ValueError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.poses):
            raise EvalError("times and poses differ in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise EvalError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    @classmethod
    def from_samples(cls, samples) -> "Trajectory":
        samples = sorted(samples, key=lambda s: s[0])
        return cls([s[0] for s in samples], [s[1] for s in samples])

    def transformed(self, T: Se3) -> "Trajectory":
        return Trajectory(self.times.copy(), [T @ p for p in self.poses])

    def to_tum(self) -> str:
        return "".join(f"{float(t)!r} {p.to_tum()}\n" for t, p in zip(self.times, self.poses))

    def save_tum(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_tum())

    @classmethod
    def load_tum(cls, path) -> "Trajectory":
        times, poses = [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = line.replace(",", " ").split()
                times.append(float(vals[0]))
                poses.append(Se3.from_tum(vals[1:8]))
        return cls(times, poses)


def associate(estimate: Trajectory, truth: Trajectory, tolerance: float = ASSOC_TOLERANCE):
    """Nearest-timestamp pairs ``(i_est, i_truth)`` within ``tolerance`` seconds."""
    if len(truth) == 0 or len(estimate) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    j = np.searchsorted(truth.times, estimate.times)
    lo = np.clip(j - 1, 0, len(truth) - 1)
    hi = np.clip(j, 0, len(truth) - 1)
    pick = np.where(np.abs(truth.times[lo] - estimate.times) <= np.abs(truth.times[hi] - estimate.times), lo, hi)
    ok = np.abs(truth.times[pick] - estimate.times) <= tolerance
    return np.stack([np.nonzero(ok)[0], pick[ok]], axis=1)


def umeyama_se3(P, Q) -> Se3:
    """Rigid ``T`` minimising ``sum |T p_i - q_i|^2`` (no scale)."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if len(P) < 3:
        raise EvalError(f"need at least 3 associated pairs, got {len(P)}")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    C = (Q - mq).T @ (P - mp) / len(P)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Se3.from_rt(R, mq - R @ mp)


def _pairs(estimate: Trajectory, truth: Trajectory):
    idx = associate(estimate, truth)
    if len(idx) < 3:
        raise EvalError(f"need at least 3 associated pairs, got {len(idx)}")
    return estimate.positions[idx[:, 0]], truth.positions[idx[:, 1]]


def align_umeyama_se3(estimate: Trajectory, truth: Trajectory) -> Se3:
    P, Q = _pairs(estimate, truth)
    return umeyama_se3(P, Q)


def ate_from_pairs(P, Q) -> float:
    T = umeyama_se3(P, Q)
    r = T.act(P) - Q
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def ate_rmse(estimate: Trajectory, truth: Trajectory, align: bool = True) -> float:
    """Translational RMSE after rigid alignment (or raw, with ``align`` false)."""
    P, Q = _pairs(estimate, truth)
    if not align:
        return float(np.sqrt(np.mean(np.sum((P - Q) ** 2, axis=1))))
    return ate_from_pairs(P, Q)


def ate_multi(pairs: list) -> float:
    """ATE of several (estimate, truth) trajectories sharing one alignment.

    Each agent is associated with its own ground truth, so overlapping
    timestamps across agents do not mix.
    """
    P, Q = zip(*(_pairs(e, t) for e, t in pairs))
    return ate_from_pairs(np.vstack(P), np.vstack(Q))


# ---------------------------------------------------------------------------
# scenario runner
# ---------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, float):
        return float(f"{x:.12g}")
    if isinstance(x, dict):
        return {str(k): _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    if isinstance(x, np.generic):
        return _fmt(x.item())
    return x


def run_scenario(sc, vocab=None, report_dir=None, loss_rate=None, reorder_rate=None, seed=None,
                 agents=None, field=None, dt: float = 0.01) -> dict:
    """Run a scenario in process and return its report bundle.

    ``agents`` restricts the run to a subset of agent ids (single-agent
    baselines).  When ``report_dir`` is given the bundle is written there.
    """
    from .agentsim import Agent, AgentClient
    from .scenario import scenario_vocabulary
    from .server import Server, run_session
    from .wire import Link

    if seed is not None:
        sc = sc.with_seed(seed)
    ch = dict(sc.channel)
    if loss_rate is not None:
        ch["loss_rate"] = loss_rate
    if reorder_rate is not None:
        ch["reorder_rate"] = reorder_rate
    field = field if field is not None else sc.build_field()
    vocab = vocab if vocab is not None else scenario_vocabulary(sc, field=field)
    server = Server(vocab, sc.server_config())
    clients, links = [], {}
    failure = None
    for cfg in sc.agent_configs():
        if agents is not None and cfg.agent_id not in agents:
            continue
        agent = Agent(cfg, field)
        link = Link(cfg.agent_id, 0, seed=sc.seed * 97 + cfg.agent_id, **ch)
        client = AgentClient(agent, link.agent)
        client.start_offset = sc.start_offset(cfg.agent_id)
        clients.append(client)
        links[cfg.agent_id] = link
    try:
        session = run_session(server, clients, links, dt=dt)
    except Exception as e:  # partial report with the failure cause
        log.exception("scenario %s failed", sc.name)
        failure = f"{type(e).__name__}: {e}"
        session = {"bandwidth": [], "end_time": None}
    bundle = _bundle(sc, server, clients, links, session, failure)
    bundle["server"]["invalid_submaps"] = {
        str(sid): problems[:5] for sid, sub in sorted(server.container.submaps.items())
        if (problems := validate(sub))
    }
    if report_dir:
        write_bundle(bundle, report_dir)
    return bundle


def _merged_ate(bundle, agent_ids):
    for g in bundle["groups"]:
        if set(agent_ids) <= set(g["submaps"]):
            return g["ate"]
    return None


def run_split(sc, vocab=None, field=None, floor: bool = True) -> dict:
    """Four-way report for a two-agent split scenario.

    ``A`` and ``B`` are the single-agent ATEs of the two halves;
    ``A+B`` streams A first so B's queries fuse into A's finished map,
    ``B+A`` the reverse.  With ``floor`` the two merged runs are repeated
    without drift to give the noise floor of the fused estimate.
    """
    ids = [a["id"] for a in sc.agents]
    if len(ids) != 2:
        raise ValueError("split report needs exactly two agents")
    a, b = ids
    field = field if field is not None else sc.build_field()
    if vocab is None:
        from .scenario import scenario_vocabulary

        vocab = scenario_vocabulary(sc, field=field)
    dur = {x["id"]: sc.trajectory(x).duration for x in sc.agents}

    def ordered(s, first, second):
        return s.with_agent(first, start_offset=0.0).with_agent(second, start_offset=dur[first])

    out = {"scenario": sc.name, "seed": sc.seed}
    for x in ids:
        out[f"part_{x}"] = run_scenario(ordered(sc, a, b), vocab, field=field, agents=[x])["agents"][str(x)]["ate"]
    runs = {}
    for first, second in ((a, b), (b, a)):
        key = f"{first}-{second}"
        runs[key] = run_scenario(ordered(sc, first, second), vocab, field=field)
        out[f"merged_{key}"] = _merged_ate(runs[key], ids)
        out[f"merges_{key}"] = runs[key]["server"]["merges"]
        out[f"invalid_{key}"] = runs[key]["server"]["invalid_submaps"]
        if floor:
            z = run_scenario(ordered(sc.without_drift(), first, second), vocab, field=field)
            out[f"floor_{key}"] = _merged_ate(z, ids)
    out["runs"] = runs
    return _fmt(out)


def place_recognition_stats(server, clients, revisit_dist=1.0, revisit_yaw=math.radians(10.0),
                            hit_dist=2.0, hit_yaw=math.radians(20.0), rel_dist=0.3,
                            rel_yaw=math.radians(5.0)) -> dict:
    """Revisit recall and false accepts against ground truth.

    A query is a revisit when some keyframe it may be matched against
    (another submap, or ``min_gap`` older in its own) lies within
    ``revisit_dist`` / ``revisit_yaw`` of it.  It is a hit when one of its
    candidates lies within ``hit_dist`` / ``hit_yaw``.  An accepted fusion
    is false when the pair is not within the hit bounds or its measured
    relative pose misses the true one by ``rel_dist`` / ``rel_yaw``.
    """
    truth = {}
    for c in clients:
        sid = server.handlers[c.agent_id].submap_id if c.agent_id in server.handlers else c.agent_id
        for seq, _t, true, _est in c.agent.history:
            truth[(sid, seq)] = true
    keys = list(truth)
    P = np.array([truth[k].t for k in keys]).reshape(-1, 3)
    yaws = np.array([yaw_of(truth[k]) for k in keys])
    sub = np.array([k[0] for k in keys])
    seqs = np.array([k[1] for k in keys])
    arrival = {key: i for i, (key, _) in enumerate(server.query_log)}
    order = np.array([arrival.get(k, len(arrival)) for k in keys])

    def near(a, b, dmax, ymax):
        d = np.linalg.norm(truth[a].t - truth[b].t)
        dy = abs(math.remainder(yaw_of(truth[a]) - yaw_of(truth[b]), 2 * math.pi))
        return d < dmax and dy < ymax

    revisits = hits = 0
    for key, cands in server.query_log:
        if key not in truth:
            continue
        earlier = order < arrival[key]
        allowed = earlier & ((sub != key[0]) | (seqs <= key[1] - server.cfg.min_gap))
        d = np.linalg.norm(P - truth[key].t, axis=1)
        dy = np.abs(np.remainder(yaws - yaw_of(truth[key]) + math.pi, 2 * math.pi) - math.pi)
        if not np.any(allowed & (d < revisit_dist) & (dy < revisit_yaw)):
            continue
        revisits += 1
        hits += any(tuple(c) in truth and near(tuple(c), key, hit_dist, hit_yaw) for c in cands)
    accepted = false = 0
    for ev in server.fusion_events:
        if not ev.get("accepted"):
            continue
        accepted += 1
        q, m = tuple(ev["query"]), tuple(ev["match"])
        if q not in truth or m not in truth or not near(q, m, hit_dist, hit_yaw):
            false += 1
            continue
        Z = Se3.from_tum(ev["relative_pose"]) if "relative_pose" in ev else None
        if Z is not None:
            err = Z.inverse() @ (truth[m].inverse() @ truth[q])
            if np.linalg.norm(err.t) > rel_dist or abs(err.angle()) > rel_yaw:
                false += 1
    return {
        "revisit_queries": revisits,
        "revisit_hits": hits,
        "recall": hits / revisits if revisits else None,
        "accepted": accepted,
        "false_accepts": false,
    }


def _truth(client) -> Trajectory:
    return Trajectory([h[1] for h in client.agent.history], [h[2] for h in client.agent.history])


def _bundle(sc, server, clients, links, session, failure) -> dict:
    trajs = server.trajectories()
    truths = {c.agent_id: _truth(c) for c in clients}
    per_agent = {}
    est = {}
    for c in clients:
        sub = server.handlers.get(c.agent_id)
        samples = trajs.get(sub.submap_id, []) if sub else []
        tr = Trajectory.from_samples(samples) if samples else Trajectory([], [])
        est[c.agent_id] = tr
        h = server.handlers.get(c.agent_id)
        duration = c.agent.cfg.trajectory.duration
        rep = dict(c.report())
        rep.update(
            ate=ate_rmse(tr, truths[c.agent_id]) if len(tr) >= 3 else None,
            server_keyframes=len(tr),
            server_bytes_up=h.bytes_up if h else 0,
            server_bytes_down=h.bytes_down if h else 0,
            uplink_MBps=rep["bytes_up"] / duration / 1e6,
            downlink_MBps=rep["bytes_down"] / duration / 1e6,
            retransmitted_frames=links[c.agent_id].agent.retransmitted_frames,
        )
        per_agent[str(c.agent_id)] = rep
    groups = []
    for g in server.container.merge_groups:
        members = [server.container.submaps[s].origin_agent for s in g]
        pairs = [(est[a], truths[a]) for a in members if a in est and len(est[a]) >= 3]
        groups.append({"submaps": g, "ate": ate_multi(pairs) if pairs else None})
    up = sum(r["bytes_up"] for r in per_agent.values())
    down = sum(r["bytes_down"] for r in per_agent.values())
    bundle = {
        "scenario": sc.name,
        "place_recognition": place_recognition_stats(server, clients),
        "seed": sc.seed,
        "failure": failure,
        "agents": per_agent,
        "groups": groups,
        "server": server.summary(),
        "bandwidth": {
            "bytes_up": up,
            "bytes_down": down,
            "ratio_up_down": up / down if down else None,
            "rows": session["bandwidth"],
        },
        "fusion_events": server.fusion_events,
        "optimizations": server.optimization_reports,
        "trajectories": {str(a): t.to_tum() for a, t in sorted(est.items())},
        "ground_truth": {str(a): t.to_tum() for a, t in sorted(truths.items())},
    }
    return _fmt(bundle)


def write_bundle(bundle: dict, report_dir):
    """Write report.json, bandwidth.csv, fusion_events.jsonl, optimizations.json and TUM files."""
    from .wire import write_bandwidth_csv

    os.makedirs(report_dir, exist_ok=True)
    core = {k: v for k, v in bundle.items() if k not in ("fusion_events", "optimizations", "trajectories",
                                                         "ground_truth")}
    core = dict(core, bandwidth={k: v for k, v in bundle["bandwidth"].items() if k != "rows"})
    with open(os.path.join(report_dir, "report.json"), "w") as fh:
        json.dump(core, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_bandwidth_csv(bundle["bandwidth"]["rows"], os.path.join(report_dir, "bandwidth.csv"))
    with open(os.path.join(report_dir, "fusion_events.jsonl"), "w") as fh:
        for ev in bundle["fusion_events"]:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    with open(os.path.join(report_dir, "optimizations.json"), "w") as fh:
        json.dump(bundle["optimizations"], fh, indent=2, sort_keys=True)
        fh.write("\n")
    for a, text in bundle["trajectories"].items():
        with open(os.path.join(report_dir, f"agent{a}.tum"), "w") as fh:
            fh.write(text)
    for a, text in bundle["ground_truth"].items():
        with open(os.path.join(report_dir, f"agent{a}_gt.tum"), "w") as fh:
            fh.write(text)


def bundle_bytes(bundle: dict) -> bytes:
    """Canonical serialisation used for determinism checks."""
    return json.dumps(bundle, sort_keys=True).encode()


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _cmd_run(args):
    from .scenario import load_scenario, scenario_vocabulary

    sc = load_scenario(args.scenario)
    vocab = scenario_vocabulary(sc, args.vocab) if args.vocab else None
    bundle = run_scenario(sc, vocab, args.report_dir, args.loss_rate, args.reorder_rate, args.seed)
    summary = {
        "scenario": bundle["scenario"],
        "failure": bundle["failure"],
        "agents": {a: {"ate": r["ate"], "uplink_MBps": r["uplink_MBps"]} for a, r in bundle["agents"].items()},
        "groups": bundle["groups"],
        "merges": bundle["server"]["merges"],
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 1 if bundle["failure"] else 0


def _cmd_ate(args):
    est = Trajectory.load_tum(args.estimate)
    gt = Trajectory.load_tum(args.truth)
    print(f"{ate_rmse(est, gt):.6f}")
    return 0


def _cmd_report(args):
    with open(os.path.join(args.report_dir, "report.json")) as fh:
        rep = json.load(fh)
    print(f"scenario {rep['scenario']} (seed {rep['seed']})")
    if rep.get("failure"):
        print(f"  FAILED: {rep['failure']}")
    for a, r in sorted(rep["agents"].items()):
        ate = "n/a" if r["ate"] is None else f"{r['ate']:.4f} m"
        print(f"  agent {a}: {r['keyframes_sent']} KFs, ATE {ate}, up {r['uplink_MBps']:.3f} MB/s, "
              f"down {r['bytes_down']} B, corrections {r['corrections_applied']}")
    for g in rep["groups"]:
        ate = "n/a" if g["ate"] is None else f"{g['ate']:.4f} m"
        print(f"  group {g['submaps']}: ATE {ate}")
    bw = rep["bandwidth"]
    ratio = bw["ratio_up_down"]
    print(f"  bytes up {bw['bytes_up']}, down {bw['bytes_down']}, ratio "
          f"{'inf' if ratio is None else format(ratio, '.1f')}")
    print(f"  merges {rep['server']['merges']}, accepted {rep['server']['accepted']}")
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(prog="collabslam-eval", description="Scenario runner and trajectory metrics")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a scenario in process")
    r.add_argument("scenario")
    r.add_argument("--report-dir")
    r.add_argument("--vocab", help="vocabulary file; trained and saved there if missing")
    r.add_argument("--loss-rate", type=float)
    r.add_argument("--reorder-rate", type=float)
    r.add_argument("--seed", type=int)
    a = sub.add_parser("ate", help="ATE RMSE between two TUM files")
    a.add_argument("estimate")
    a.add_argument("truth")
    rp = sub.add_parser("report", help="summarise a report directory")
    rp.add_argument("report_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return {"run": _cmd_run, "ate": _cmd_ate, "report": _cmd_report}[args.cmd](args)


if __name__ == "__main__":
    sys.exit(main())
