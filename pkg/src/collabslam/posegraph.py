"""Global pose-graph optimisation, submap merging and drift propagation."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (Se3, adjoint_batch, se3_exp_batch, se3_left_jacobian_inv, se3_left_jacobian_inv_batch,
                       se3_log_batch, se3_right_jacobian_inv)
from .mapcore import ServerMapContainer, apply_drift, set_poses, transform_submap, validate

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


class Mode(enum.Enum):
    InterMapBA = "inter_map_ba"
    MultiMapFusion = "multi_map_fusion"


@dataclass
class LoopEdge:
    """Accepted match: ``Z`` is the measured pose of ``b`` relative to ``a``.

    ``a`` is the matched (older) keyframe and ``b`` the query keyframe,
    both ``(submap_id, seq)``.
    """

    a: tuple
    b: tuple
    Z: Se3
    inliers: int = 12
    order: int = 0

    @property
    def weight(self) -> float:
        return min(self.inliers / 12.0, 5.0)


@dataclass
class Edge:
    i: tuple
    j: tuple
    Z: Se3
    weight: float = 1.0
    loop: bool = False


@dataclass
class PoseGraph:
    vertices: dict  # key -> Se3
    fixed: set
    sequence_edges: list = field(default_factory=list)
    loop_edges: list = field(default_factory=list)

    @property
    def edges(self) -> list:
        return self.sequence_edges + self.loop_edges

    @property
    def free(self) -> list:
        return [k for k in self.vertices if k not in self.fixed]

    def check(self):
        if not self.fixed:
            raise GraphError("pose graph has no fixed vertex")
        adj = {k: [] for k in self.vertices}
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        seen = set(self.fixed)
        stack = list(self.fixed)
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        orphans = sorted(set(self.vertices) - seen)
        if orphans:
            raise GraphError(f"free keyframes {orphans[0]}..{orphans[-1]} not connected to a fixed vertex")

    def dump_g2o(self, path):
        index = {k: n for n, k in enumerate(self.vertices)}
        with open(path, "w") as fh:
            for k, T in self.vertices.items():
                fh.write(f"VERTEX_SE3:QUAT {index[k]} {T.to_tum()}\n")
            for k in self.vertices:
                if k in self.fixed:
                    fh.write(f"FIX {index[k]}\n")
            for e in self.edges:
                info = []
                for r in range(6):
                    info += [e.weight if c == r else 0.0 for c in range(r, 6)]
                fh.write(f"EDGE_SE3:QUAT {index[e.i]} {index[e.j]} {e.Z.to_tum()} "
                         + " ".join(repr(float(v)) for v in info) + "\n")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_graph(container: ServerMapContainer, loops: list, main_submap: int,
                mode: Mode = Mode.MultiMapFusion, anchor_other: bool = True,
                fix_main_prefix: bool = True) -> PoseGraph:
    """Vertices and edges for one optimisation.

    Main map: keyframes up to its latest match, fixed up to and including
    its earliest match.  Every other submap touched by a loop: keyframes
    from its first to its latest match, with the endpoint of its first
    accepted loop fixed.
    """
    if not loops:
        raise GraphError("no loop edges")
    touched = {}
    for lp in loops:
        for end in (lp.a, lp.b):
            touched.setdefault(end[0], []).append(end[1])
    if mode is Mode.InterMapBA and set(touched) != {main_submap}:
        raise GraphError("inter-map BA loops must stay inside the main map")
    if main_submap not in touched:
        raise GraphError(f"main submap {main_submap} has no loop edge")
    vertices, fixed = {}, set()
    seq_edges = []
    for sub_id in sorted(touched):
        sub = container.submaps[sub_id]
        last = max(touched[sub_id])
        seqs = [s for s in sub.keyframes if s <= last]
        for s in seqs:
            vertices[(sub_id, s)] = sub.keyframes[s].pose
        for prev, s in zip(seqs, seqs[1:]):
            seq_edges.append(Edge((sub_id, prev), (sub_id, s), sub.odometry[s], 1.0))
        if sub_id == main_submap:
            first = min(touched[sub_id])
            if fix_main_prefix:
                fixed.update((sub_id, s) for s in seqs if s <= first)
        elif anchor_other:
            first_loop = min(loops, key=lambda lp: lp.order if sub_id in (lp.a[0], lp.b[0]) else 1 << 62)
            fixed.add(first_loop.a if first_loop.a[0] == sub_id else first_loop.b)
    loop_edges = [Edge(lp.a, lp.b, lp.Z, lp.weight, True) for lp in loops]
    g = PoseGraph(vertices, fixed, seq_edges, loop_edges)
    g.check()
    return g


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def edge_residual(Z: Se3, Ti: Se3, Tj: Se3) -> np.ndarray:
    return (Z.inverse() @ Ti.inverse() @ Tj).log()


def edge_jacobians(Z: Se3, Ti: Se3, Tj: Se3):
    """Derivatives of the residual under right perturbations ``T <- T Exp(d)``."""
    e = edge_residual(Z, Ti, Tj)
    Jj = se3_right_jacobian_inv(e)
    Ji = -se3_left_jacobian_inv(e) @ Z.inverse().adjoint()
    return e, Ji, Jj


def total_cost(graph: PoseGraph, states: dict = None, edges=None) -> float:
    states = graph.vertices if states is None else states
    edges = graph.edges if edges is None else edges
    c = 0.0
    for e in edges:
        r = edge_residual(e.Z, states[e.i], states[e.j])
        c += e.weight * float(r @ r)
    return c


class _Problem:
    """Array form of a graph: vertex rotations/translations and edge index arrays."""

    def __init__(self, graph: PoseGraph, edges):
        self.keys = list(graph.vertices)
        index = {k: n for n, k in enumerate(self.keys)}
        self.R = np.array([graph.vertices[k].R for k in self.keys])
        self.t = np.array([graph.vertices[k].t for k in self.keys])
        self.ii = np.array([index[e.i] for e in edges], dtype=np.int64)
        self.jj = np.array([index[e.j] for e in edges], dtype=np.int64)
        self.ZR = np.array([e.Z.R for e in edges]).reshape(-1, 3, 3)
        self.Zt = np.array([e.Z.t for e in edges]).reshape(-1, 3)
        self.w = np.array([e.weight for e in edges], dtype=float)
        self.ZinvR = np.transpose(self.ZR, (0, 2, 1))
        self.Zinv_t = -np.einsum("nij,nj->ni", self.ZinvR, self.Zt)
        self.ad_zinv = adjoint_batch(self.ZinvR, self.Zinv_t)
        self.col = np.full(len(self.keys), -1, dtype=np.int64)
        free = [n for n, k in enumerate(self.keys) if k not in graph.fixed]
        self.col[free] = np.arange(len(free))
        self.free = np.array(free, dtype=np.int64)

    def residuals(self, R, t):
        Ri, Rj = R[self.ii], R[self.jj]
        RiT = np.transpose(Ri, (0, 2, 1))
        R_ij = RiT @ Rj
        t_ij = np.einsum("nij,nj->ni", RiT, t[self.jj] - t[self.ii])
        RE = self.ZinvR @ R_ij
        tE = np.einsum("nij,nj->ni", self.ZinvR, t_ij - self.Zt)
        return se3_log_batch(RE, tE)

    def cost(self, R, t) -> float:
        if len(self.ii) == 0:
            return 0.0
        e = self.residuals(R, t)
        return float(np.sum(self.w * np.einsum("ni,ni->n", e, e)))

    def linearize(self, R, t):
        e = self.residuals(R, t)
        Jj = se3_left_jacobian_inv_batch(-e)
        Ji = -se3_left_jacobian_inv_batch(e) @ self.ad_zinv
        nf = len(self.free)
        g = np.zeros((nf, 6))
        rows, cols, vals = [], [], []
        ci, cj = self.col[self.ii], self.col[self.jj]
        blocks = [(ci, Ji), (cj, Jj)]
        w = self.w[:, None, None]
        for ca, Ja in blocks:
            ok = ca >= 0
            np.add.at(g, ca[ok], (self.w[:, None] * np.einsum("nji,nj->ni", Ja, e))[ok])
            for cb, Jb in blocks:
                both = ok & (cb >= 0)
                blk = (w * np.transpose(Ja, (0, 2, 1)) @ Jb)[both]
                r0 = 6 * ca[both][:, None, None] + np.arange(6)[None, :, None]
                c0 = 6 * cb[both][:, None, None] + np.arange(6)[None, None, :]
                rows.append(np.broadcast_to(r0, blk.shape).ravel())
                cols.append(np.broadcast_to(c0, blk.shape).ravel())
                vals.append(blk.ravel())
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(6 * nf, 6 * nf)).tocsc()
        return H, g.ravel()

    def retract(self, R, t, dx):
        dR, dt = se3_exp_batch(dx.reshape(-1, 6))
        R2, t2 = R.copy(), t.copy()
        f = self.free
        R2[f] = R[f] @ dR
        t2[f] = t[f] + np.einsum("nij,nj->ni", R[f], dt)
        return R2, t2

    def states(self, R, t) -> dict:
        return {k: Se3.from_rt(R[n], t[n]) for n, k in enumerate(self.keys)}


def _solve(graph: PoseGraph, edges, max_iters=100, tol=1e-8):
    pb = _Problem(graph, edges)
    R, t = pb.R, pb.t
    cost = pb.cost(R, t)
    c0 = cost
    costs = [cost]
    lam = 1e-4
    it = 0
    converged = len(pb.free) == 0
    while not converged and it < max_iters:
        it += 1
        H, g = pb.linearize(R, t)
        d = H.diagonal()
        while True:
            A = (H + sp.diags(lam * (d + 1e-12))).tocsc()
            dx = spla.spsolve(A, -g)
            R2, t2 = pb.retract(R, t, dx)
            c_new = pb.cost(R2, t2)
            if c_new <= cost:
                R, t, cost = R2, t2, c_new
                costs.append(cost)
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e10:
                converged = True
                break
        if np.max(np.abs(dx)) < tol:
            converged = True
    states = dict(graph.vertices)
    moved = pb.states(R, t)
    for n in pb.free:
        states[pb.keys[n]] = moved[pb.keys[n]]
    return states, it, c0, cost, costs, converged


@dataclass
class OptimizeResult:
    states: dict
    success: bool
    iterations: int
    initial_cost: float
    final_cost: float
    costs: list
    edge_residuals: list
    rejected_edges: list = field(default_factory=list)
    reason: str = ""

    def report(self) -> dict:
        return {
            "success": self.success,
            "iterations": self.iterations,
            "initial_residual": self.initial_cost,
            "final_residual": self.final_cost,
            "rejected_edges": [[list(a), list(b)] for a, b in self.rejected_edges],
            "reason": self.reason,
        }


def _edge_norms(graph: PoseGraph, edges, states: dict) -> np.ndarray:
    if not edges:
        return np.zeros(0)
    pb = _Problem(PoseGraph(states, graph.fixed), edges)
    return np.linalg.norm(pb.residuals(pb.R, pb.t), axis=1)


def optimize(graph: PoseGraph, max_iters: int = 100, tol: float = 1e-8, loop_gate: float = 5.0) -> OptimizeResult:
    """Levenberg-Marquardt over the free vertices.

    After convergence, loop edges whose residual exceeds ``loop_gate``
    times the median loop residual (at least three loops) are dropped and
    the optimisation is rerun once from the original states.
    """
    edges = graph.edges
    states, it, c0, cost, costs, conv = _solve(graph, edges, max_iters, tol)
    rejected = []
    loops = [e for e in edges if e.loop]
    if len(loops) >= 3:
        res = _edge_norms(graph, loops, states)
        med = float(np.median(res))
        bad = [e for e, r in zip(loops, res) if r > loop_gate * med and r > 1e-9]
        if bad:
            rejected = [(e.i, e.j) for e in bad]
            edges = [e for e in edges if not any(e is b for b in bad)]
            sub = PoseGraph(graph.vertices, graph.fixed, graph.sequence_edges,
                            [e for e in graph.loop_edges if not any(e is b for b in bad)])
            sub.check()
            states, it2, c0b, cost, costs2, conv = _solve(sub, edges, max_iters, tol)
            it += it2
            costs += costs2
    residuals = [(e.i, e.j, float(r)) for e, r in zip(edges, _edge_norms(graph, edges, states))]
    ok = conv or cost <= 10 * c0
    reason = "" if ok else "did not converge"
    if not ok:
        log.warning("pose graph optimisation rejected after %d iterations", it)
        states = dict(graph.vertices)
    return OptimizeResult(states, ok, it, c0, cost, costs, residuals, rejected, reason)


# ---------------------------------------------------------------------------
# merge and drift propagation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftCorrection:
    """``drift`` is expressed in the agent's own world frame."""

    agent_id: int
    from_sequence: int
    drift: Se3
    drift_group: Se3 = None


@dataclass
class MergeResult:
    group: list
    corrections: list
    optimization: Optional[OptimizeResult]
    graph: Optional[PoseGraph]


def apply_states(container: ServerMapContainer, states: dict, graph: PoseGraph) -> list:
    """Write optimised poses, move trailing keyframes rigidly, compute per-submap drift.

    Returns ``[(submap_id, last optimised seq, drift in group frame)]``.
    """
    out = []
    by_sub = {}
    for (sub_id, seq) in graph.vertices:
        by_sub.setdefault(sub_id, []).append(seq)
    for sub_id, seqs in sorted(by_sub.items()):
        sub = container.submaps[sub_id]
        last = max(seqs)
        old_last = sub.keyframes[last].pose
        updates = {s: states[(sub_id, s)] for s in seqs if (sub_id, s) not in graph.fixed}
        set_poses(sub, updates)
        drift = states[(sub_id, last)] @ old_last.inverse()
        apply_drift(sub, last + 1, drift)
        out.append((sub_id, last, drift))
    return out


def merge_submaps(container: ServerMapContainer, group_c: int, group_m: int, T_align: Optional[Se3],
                  loops: list, main_submap: int, mode: Mode = Mode.MultiMapFusion, check: bool = False,
                  **graph_kw) -> MergeResult:
    """Re-express ``group_m`` in ``group_c``'s frame via ``T_align``, optimise, write back.

    ``loops`` must already be expressed so that their relative
    measurements hold in the merged frame (relative poses are frame
    independent, so the usual case needs nothing). ``check`` runs
    :func:`~collabslam.mapcore.validate` on every member afterwards.
    """
    with container.lock:
        if T_align is not None and not container.same_group(group_c, group_m):
            for sid in container.group(group_m):
                transform_submap(container.submaps[sid], T_align)
            container.merge(group_c, group_m)
        graph = build_graph(container, loops, main_submap, mode, **graph_kw)
        res = optimize(graph)
        corrections = []
        if res.success:
            for sub_id, last, drift in apply_states(container, res.states, graph):
                sub = container.submaps[sub_id]
                S = sub.to_group
                corrections.append(DriftCorrection(sub.origin_agent, last, S.inverse() @ drift @ S, drift))
        for sid in container.group(group_c) if check else ():
            problems = validate(container.submaps[sid])
            if problems:
                raise GraphError(f"submap {sid} invalid after merge: {problems[:3]}")
        return MergeResult(container.group(group_c), corrections, res, graph)


def write_report(result: OptimizeResult, path, graph: PoseGraph = None):
    rep = result.report()
    if graph is not None:
        rep.update(vertices=len(graph.vertices), fixed=len(graph.fixed),
                   sequence_edges=len(graph.sequence_edges), loop_edges=len(graph.loop_edges))
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
