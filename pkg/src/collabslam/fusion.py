"""Geometric verification and local-window alignment of a match candidate.

Conventions: ``T_align`` maps the matched map's world frame (Wm) into the
query map's world frame (Wc).  Keyframe poses are world <- camera.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import descriptors as bd
from .geometry import PinholeCamera, Se3, skew, world_relative, yaw_of

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    window: int = 10
    radius: float = 8.0
    depth_max: float = 40.0
    max_hamming: int = 50
    ratio: float = 0.8
    pnp_threshold: float = 3.0
    pnp_confidence: float = 0.99
    pnp_max_iters: int = 300
    min_pnp_inliers: int = 12
    min_window_pairs: int = 20
    huber: float = 2.0
    yaw_threshold: float = math.radians(10.0)
    trans_threshold: float = 1.0
    sampson_threshold: float = 2.0
    f_max_iters: int = 300
    ba_max_iters: int = 50
    ba_rel_tol: float = 1e-8
    ba_max_mean_error: float = 2.0
    ba_inlier_threshold: float = 3.0


# ---------------------------------------------------------------------------
# descriptor matching
# ---------------------------------------------------------------------------


def match_descriptors(A, B, max_hamming=50, ratio=0.8):
    """Nearest neighbour of each row of ``A`` in ``B`` with ratio and distance tests.

    Returns an ``(n, 2)`` array of index pairs; each ``B`` row is used at
    most once (best-distance pair wins).
    """
    A = np.asarray(A, dtype=np.uint8).reshape(-1, 32)
    B = np.asarray(B, dtype=np.uint8).reshape(-1, 32)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    H = bd.hamming_matrix(A, B)
    if H.shape[1] >= 2:
        part = np.partition(H, 1, axis=1)
        best, second = part[:, 0], part[:, 1]
    else:
        best, second = H[:, 0], np.full(len(A), bd.NBITS)
    j = np.argmin(H, axis=1)
    ok = (best <= max_hamming) & (best < ratio * second)
    i = np.nonzero(ok)[0]
    return _unique_targets(i, j[i], best[i])


def _unique_targets(i, j, d):
    order = np.lexsort((i, d))
    seen = set()
    keep = []
    for k in order:
        if j[k] not in seen:
            seen.add(j[k])
            keep.append(k)
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    return np.stack([i[keep], j[keep]], axis=1) if len(keep) else np.zeros((0, 2), dtype=np.int64)


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------


def _kabsch(P, Q):
    """Rigid ``T`` with ``T.act(P) ~= Q``."""
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - mp).T @ (Q - mq)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ S @ U.T
    return Se3.from_rt(R, mq - R @ mp)


def p3p(points3d, bearings) -> list:
    """Grunert's minimal solver.

    ``points3d`` (3, 3) world points, ``bearings`` (3, 3) unit rays in the
    camera frame.  Returns up to four camera <- world transforms.
    """
    X = np.asarray(points3d, dtype=float)
    j = np.asarray(bearings, dtype=float)
    j = j / np.linalg.norm(j, axis=1, keepdims=True)
    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    if min(a, b, c) < 1e-9:
        return []
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    a2, b2, c2 = a * a, b * b, c * c
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca ** 2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
    A2 = 2 * (amc ** 2 - 1 + 2 * amc ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg ** 2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or abs(A4) < 1e-14:
        return []
    out = []
    for v in np.roots(coeffs):
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        s1sq = b2 / (1 + v * v - 2 * v * cb)
        if s1sq <= 0:
            continue
        s1 = math.sqrt(s1sq)
        s = np.array([s1, u * s1, v * s1])
        if np.any(s <= 0):
            continue
        out.append(_kabsch(X, j * s[:, None]))
    return out


def reprojection_errors(T_cw: Se3, points3d, uv, cam: PinholeCamera):
    """Pixel error norms; points behind the camera get ``inf``."""
    P = T_cw.act(points3d)
    z = P[:, 2]
    err = np.full(len(P), np.inf)
    ok = z > 1e-9
    proj = np.stack([cam.fx * P[ok, 0] / z[ok] + cam.cx, cam.fy * P[ok, 1] / z[ok] + cam.cy], axis=1)
    err[ok] = np.linalg.norm(proj - uv[ok], axis=1)
    return err


def refine_pose(T_cw: Se3, points3d, uv, cam: PinholeCamera, iters: int = 20) -> Se3:
    """Levenberg-Marquardt on reprojection error, left perturbation of camera <- world."""
    lam = 1e-3

    def cost(T):
        e = reprojection_errors(T, points3d, uv, cam)
        return float(np.sum(e ** 2))

    c = cost(T_cw)
    for _ in range(iters):
        P = T_cw.act(points3d)
        r, J = _proj_residual_jac(P, uv, cam)
        J = np.einsum("nij,njk->nik", J, _point_left_jac(P))
        H = np.einsum("nji,njk->ik", J, J)
        g = np.einsum("nji,nj->i", J, r)
        while True:
            dx = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            T_new = Se3.exp(dx) @ T_cw
            c_new = cost(T_new)
            if c_new <= c:
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e8:
                return T_cw
        done = c - c_new <= 1e-12 * max(c, 1e-300) or np.linalg.norm(dx) < 1e-14
        T_cw, c = T_new, c_new
        if done:
            break
    return T_cw


def _proj_residual_jac(P, uv, cam):
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    iz = 1.0 / z
    r = np.stack([cam.fx * x * iz + cam.cx, cam.fy * y * iz + cam.cy], axis=1) - uv
    J = np.zeros((len(P), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * x * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * y * iz * iz
    return r, J


def _point_left_jac(P):
    """d(Exp(d) P)/dd at d = 0, for d = (rho, phi): ``[I, -[P]x]``."""
    J = np.zeros((len(P), 3, 6))
    J[:, :, :3] = np.eye(3)
    J[:, 0, 4], J[:, 0, 5] = P[:, 2], -P[:, 1]
    J[:, 1, 3], J[:, 1, 5] = -P[:, 2], P[:, 0]
    J[:, 2, 3], J[:, 2, 4] = P[:, 1], -P[:, 0]
    return J


@dataclass
class PnPResult:
    T_cw: Optional[Se3]
    inliers: np.ndarray
    iterations: int

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def pnp_ransac(points3d, uv, cam: PinholeCamera, rng=None, threshold=3.0, confidence=0.99,
               max_iters=300) -> PnPResult:
    points3d = np.asarray(points3d, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    n = len(points3d)
    if n < 4:
        return PnPResult(None, np.zeros(n, dtype=bool), 0)
    rng = np.random.default_rng(0) if rng is None else rng
    rays = np.column_stack([cam.normalize(uv), np.ones(n)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    best_T, best_in, best_score = None, np.zeros(n, dtype=bool), -1
    need, it = max_iters, 0
    while it < min(need, max_iters):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        for T in p3p(points3d[idx], rays[idx]):
            err = reprojection_errors(T, points3d, uv, cam)
            inl = err < threshold
            score = int(inl.sum())
            if score > best_score or (score == best_score and best_T is not None
                                      and err[inl].sum() < reprojection_errors(best_T, points3d, uv, cam)[inl].sum()):
                best_T, best_in, best_score = T, inl, score
                w = score / n
                need = _ransac_iters(w, 3, confidence, max_iters)
    if best_T is None or best_score < 4:
        return PnPResult(None, np.zeros(n, dtype=bool), it)
    T = best_T
    inl = best_in
    for _ in range(3):
        T = refine_pose(T, points3d[inl], uv[inl], cam)
        new_inl = reprojection_errors(T, points3d, uv, cam) < threshold
        if np.array_equal(new_inl, inl) or new_inl.sum() < 4:
            break
        inl = new_inl
    return PnPResult(T, inl, it)


def _ransac_iters(w, s, confidence, cap):
    if w >= 1.0:
        return 1
    if w <= 0.0:
        return cap
    denom = math.log(max(1e-300, 1.0 - w ** s))
    if denom == 0.0:
        return cap
    return int(min(cap, math.ceil(math.log(1.0 - confidence) / denom)))


# ---------------------------------------------------------------------------
# alignment hypothesis
# ---------------------------------------------------------------------------


@dataclass
class AlignmentHypothesis:
    """``T_world`` maps Wm -> Wc; ``T_im_ic`` is K_c's pose relative to K_m."""

    T_im_ic: Optional[Se3]
    T_world: Optional[Se3]
    inlier_count: int
    accepted: bool = False
    T_check: Optional[Se3] = None
    pose_c_in_m: Optional[Se3] = None
    reason: str = ""
    n_matches: int = 0


def solve_pnp_ransac(points3d, keypoints2d, cam: PinholeCamera, pose_c: Se3 = None, pose_m: Se3 = None,
                     cfg: FusionConfig = None, rng=None) -> AlignmentHypothesis:
    """Locate K_c (observing ``keypoints2d``) against K_m's map points.

    ``pose_c`` is K_c's pose in Wc and ``pose_m`` K_m's pose in Wm; without
    them the result is expressed relative to identity poses.
    """
    cfg = cfg or FusionConfig()
    pose_c = pose_c or Se3.identity()
    pose_m = pose_m or Se3.identity()
    n = len(np.asarray(points3d).reshape(-1, 3))
    if n < 4:
        return AlignmentHypothesis(None, None, 0, reason=f"only {n} correspondences", n_matches=n)
    res = pnp_ransac(points3d, keypoints2d, cam, rng, cfg.pnp_threshold, cfg.pnp_confidence, cfg.pnp_max_iters)
    if res.T_cw is None or res.inlier_count < cfg.min_pnp_inliers:
        return AlignmentHypothesis(None, None, res.inlier_count,
                                   reason=f"{res.inlier_count} PnP inliers", n_matches=n)
    pose_c_in_m = res.T_cw.inverse()
    T_world = pose_c @ res.T_cw
    hyp = AlignmentHypothesis(pose_m.inverse() @ pose_c_in_m, T_world, res.inlier_count,
                              T_check=world_relative(pose_m, pose_c_in_m), pose_c_in_m=pose_c_in_m,
                              n_matches=n)
    hyp.inliers = res.inliers
    return hyp


def accept_gate(hyp: AlignmentHypothesis, yaw_threshold=math.radians(10.0), trans_threshold=1.0) -> bool:
    if hyp.T_check is None:
        return False
    return abs(yaw_of(hyp.T_check)) < yaw_threshold and float(np.linalg.norm(hyp.T_check.t)) < trans_threshold


# ---------------------------------------------------------------------------
# local window
# ---------------------------------------------------------------------------


@dataclass
class LocalWindow:
    """Matched pairs between the two windows.

    Pair ``i`` links map point ``vMP_m[i]`` of M_m (position ``X_m[i]`` in
    Wm) to keypoint ``vMP_c[i] = (seq, kp)`` of a window frame of M_c,
    observed at pixel ``uv[i]``; ``frame[i]`` indexes ``vKF_c``.
    """

    vKF_c: list
    vKF_m: list
    vMP_c: list
    vMP_m: list
    X_m: np.ndarray
    uv: np.ndarray
    frame: np.ndarray
    T_align: Se3
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.vMP_m)

    @property
    def poses_c(self) -> list:
        return [kf.pose for kf in self.vKF_c]


def window_around(submap, seq: int, M: int) -> list:
    """``M`` consecutive keyframes containing ``seq``, centred where the map allows."""
    seqs = submap.sequence
    i = seqs.index(seq)
    lo = max(0, min(i - (M - 1) // 2, len(seqs) - M))
    return [submap.keyframes[s] for s in seqs[lo:lo + M]]


def _project_search(X, descs, frames, cam, cfg):
    """Project world points into each frame; radius search + descriptor test.

    Returns (point index, frame index, keypoint index, hamming) arrays.
    """
    out = []
    for fi, kf in enumerate(frames):
        if len(kf.keypoints) == 0 or len(X) == 0:
            continue
        P = kf.pose.inverse().act(X)
        z = P[:, 2]
        front = (z > 0) & (z <= cfg.depth_max)
        zs = np.where(front, z, 1.0)
        uv = np.stack([cam.fx * P[:, 0] / zs + cam.cx, cam.fy * P[:, 1] / zs + cam.cy], axis=1)
        vis = np.nonzero(front & cam.in_image(uv))[0]
        if len(vis) == 0:
            continue
        tree = cKDTree(kf.keypoints.astype(float))
        near = tree.query_ball_point(uv[vis], cfg.radius)
        lens = np.fromiter((len(n) for n in near), dtype=np.int64, count=len(near))
        if lens.sum() == 0:
            continue
        pi = np.repeat(vis, lens)
        ki = np.fromiter((k for n in near for k in n), dtype=np.int64, count=int(lens.sum()))
        h = bd.hamming_rows(descs[pi], kf.descriptors[ki])
        # best and second best per projected point
        order = np.lexsort((ki, h, pi))
        pi, ki, h = pi[order], ki[order], h[order]
        first = np.r_[True, pi[1:] != pi[:-1]]
        starts = np.nonzero(first)[0]
        second = np.full(len(starts), bd.NBITS)
        has2 = np.r_[starts[1:], len(pi)] - starts > 1
        second[has2] = h[starts[has2] + 1]
        b_p, b_k, b_h = pi[starts], ki[starts], h[starts]
        ok = (b_h <= cfg.max_hamming) & (b_h < cfg.ratio * second)
        sel = _unique_targets(b_p[ok], b_k[ok], b_h[ok])
        if len(sel):
            hh = dict(zip(zip(b_p[ok], b_k[ok]), b_h[ok]))
            for p, k in sel:
                out.append((p, fi, k, hh[(p, k)]))
    if not out:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array(out, dtype=np.int64)


def _hartley(x):
    """Normalising similarity for point sets ``(..., n, 2)``; returns homogeneous points and ``T``."""
    m = x.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(x - m, axis=-1).mean(axis=-1)
    s = math.sqrt(2) / np.maximum(d, 1e-12)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = T[..., 1, 1] = s
    T[..., 0, 2] = -s * m[..., 0, 0]
    T[..., 1, 2] = -s * m[..., 0, 1]
    T[..., 2, 2] = 1.0
    h = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    return h @ np.swapaxes(T, -1, -2), T


def fundamental_8pt(x1, x2):
    """Normalised eight-point estimate with ``x2^T F x1 = 0``, rank 2.

    Accepts a leading batch dimension: ``(B, n, 2)`` inputs give ``(B, 3, 3)``.
    """
    p1, T1 = _hartley(np.asarray(x1, dtype=float))
    p2, T2 = _hartley(np.asarray(x2, dtype=float))
    A = (p2[..., :, None] * p1[..., None, :]).reshape(p1.shape[:-1] + (9,))
    _, _, Vt = np.linalg.svd(A)
    F = Vt[..., -1, :].reshape(p1.shape[:-2] + (3, 3))
    U, S, Vt = np.linalg.svd(F)
    S[..., 2] = 0.0
    F = (U * S[..., None, :]) @ Vt
    F = np.swapaxes(T2, -1, -2) @ F @ T1
    n = np.linalg.norm(F, axis=(-2, -1), keepdims=True)
    return F / np.where(n > 0, n, 1.0)


def sampson_distance(F, x1, x2):
    """Squared Sampson distance in pixels^2 (``F`` may be a ``(B, 3, 3)`` stack)."""
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Fx1 = h1 @ np.swapaxes(F, -1, -2)
    Ftx2 = h2 @ F
    num = np.sum(h2 * Fx1, axis=-1) ** 2
    den = Fx1[..., 0] ** 2 + Fx1[..., 1] ** 2 + Ftx2[..., 0] ** 2 + Ftx2[..., 1] ** 2
    return num / np.maximum(den, 1e-300)


def fundamental_ransac(x1, x2, rng, threshold=2.0, confidence=0.99, max_iters=300, batch=16):
    """Inlier mask of the best eight-point model (Sampson distance < threshold px).

    Hypotheses are drawn and scored ``batch`` at a time; the adaptive
    stopping rule is checked between batches.
    """
    n = len(x1)
    if n < 8:
        return np.ones(n, dtype=bool)
    thr2 = threshold ** 2
    best, best_n = np.ones(n, dtype=bool), -1
    need, it = max_iters, 0
    while it < min(need, max_iters):
        b = min(batch, max_iters - it)
        it += b
        idx = np.argsort(rng.random((b, n)), axis=1)[:, :8]
        F = fundamental_8pt(x1[idx], x2[idx])
        inl = sampson_distance(F, x1, x2) < thr2
        counts = inl.sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_n:
            best, best_n = inl[k], int(counts[k])
            need = _ransac_iters(best_n / n, 8, confidence, max_iters)
    if best_n >= 8:
        F = fundamental_8pt(x1[best], x2[best])
        refit = sampson_distance(F, x1, x2) < thr2
        if refit.sum() >= best_n:
            best = refit
    return best


def _filter_by_f(pairs, m_frames, c_frames, mp_ids, mp_ref, rng, cfg, stats):
    """Per (m-frame, c-frame) F-RANSAC.  ``pairs`` rows are (point, c-frame, c-keypoint).

    Each pair is attributed to one m-frame observing its point, greedily
    to the frame that explains the most pairs.  Groups below eight pairs
    cannot fit a fundamental matrix and are kept as they are.
    """
    keep = np.ones(len(pairs), dtype=bool)
    if len(pairs) == 0:
        return keep
    obs_kp = [{v: k for k, v in kf.observations.items()} for kf in m_frames]
    owners = [[mi for mi in range(len(m_frames)) if mp_ids[p] in obs_kp[mi]] for p in pairs[:, 0]]
    counts = {}
    for o, (p, ci, _) in zip(owners, pairs):
        for mi in o:
            counts[(mi, ci)] = counts.get((mi, ci), 0) + 1
    groups = {}
    for row, (o, (p, ci, _)) in enumerate(zip(owners, pairs)):
        if not o:
            continue
        mi = max(o, key=lambda m: (counts[(m, ci)], -m))
        groups.setdefault((mi, ci), []).append(row)
    removed = 0
    for (mi, ci), rows in sorted(groups.items()):
        rows = np.array(rows)
        if len(rows) < 8:
            continue
        x1 = np.array([m_frames[mi].keypoints[obs_kp[mi][mp_ids[p]]] for p in pairs[rows, 0]], dtype=float)
        x2 = c_frames[ci].keypoints[pairs[rows, 2]].astype(float)
        inl = fundamental_ransac(x1, x2, rng, cfg.sampson_threshold, 0.99, cfg.f_max_iters)
        keep[rows[~inl]] = False
        removed += int((~inl).sum())
    stats["f_groups"] = stats.get("f_groups", 0) + len(groups)
    stats["f_removed"] = stats.get("f_removed", 0) + removed
    return keep


def _points_of(frames, submap):
    ids = sorted({mp for kf in frames for mp in kf.observations.values()})
    X = np.array([submap.map_points[i].position for i in ids]).reshape(-1, 3)
    D = np.array([np.frombuffer(submap.map_points[i].descriptor, dtype=np.uint8) for i in ids],
                 dtype=np.uint8).reshape(-1, 32)
    return ids, X, D


def build_local_window(K_c, K_m, M: int, T_align: Se3, cam: PinholeCamera, r: float = None,
                       depth_max: float = None, submap_c=None, submap_m=None, cfg: FusionConfig = None,
                       rng=None) -> Optional[LocalWindow]:
    """Bidirectional projection matching between the windows around K_c and K_m.

    Returns ``None`` if fewer than ``cfg.min_window_pairs`` pairs survive.
    """
    cfg = cfg or FusionConfig()
    if r is not None or depth_max is not None:
        cfg = FusionConfig(**{**cfg.__dict__, "radius": r if r is not None else cfg.radius,
                              "depth_max": depth_max if depth_max is not None else cfg.depth_max})
    rng = np.random.default_rng(0) if rng is None else rng
    vc = window_around(submap_c, K_c.seq, M)
    vm = window_around(submap_m, K_m.seq, M)
    stats = {}

    # forward: M_m points into M_c frames
    ids_m, X_m, D_m = _points_of(vm, submap_m)
    fwd = _project_search(T_align.act(X_m) if len(X_m) else X_m, D_m, vc, cam, cfg)
    stats["forward_candidates"] = len(fwd)
    fwd = fwd[:, :3]
    keep = _filter_by_f(fwd, vm, vc, ids_m, None, rng, cfg, stats)
    fwd = fwd[keep]
    pairs = {}
    for p, ci, k in fwd:
        pairs[(ids_m[p], vc[ci].seq)] = (ids_m[p], ci, int(k))

    # reverse: M_c points into M_m frames, converted to (M_m point, c frame, c keypoint)
    ids_c, X_c, D_c = _points_of(vc, submap_c)
    rev = _project_search(T_align.inverse().act(X_c) if len(X_c) else X_c, D_c, vm, cam, cfg)
    stats["reverse_candidates"] = len(rev)
    rev = rev[:, :3]
    keep = _filter_by_f(rev, vc, vm, ids_c, None, rng, cfg, stats)
    rev = rev[keep]
    c_obs = [{v: k for k, v in kf.observations.items()} for kf in vc]
    added = 0
    for p, mi, k in rev:
        mp_m = vm[mi].observations.get(int(k))
        if mp_m is None:
            continue
        mp_c = ids_c[p]
        for ci, ob in enumerate(c_obs):
            kp = ob.get(mp_c)
            if kp is None:
                continue
            key = (mp_m, vc[ci].seq)
            if key not in pairs:
                pairs[key] = (mp_m, ci, kp)
                added += 1
    stats["reverse_added"] = added
    stats["pairs"] = len(pairs)
    if len(pairs) < cfg.min_window_pairs:
        log.debug("local window rejected: %d pairs", len(pairs))
        return None
    items = [pairs[k] for k in sorted(pairs)]
    vMP_m = [it[0] for it in items]
    frame = np.array([it[1] for it in items], dtype=np.int64)
    vMP_c = [(vc[it[1]].seq, it[2]) for it in items]
    X = np.array([submap_m.map_points[i].position for i in vMP_m])
    uv = np.array([vc[ci].keypoints[k] for ci, k in zip(frame, (it[2] for it in items))], dtype=float)
    return LocalWindow(vc, vm, vMP_c, vMP_m, X, uv, frame, T_align, stats)


# ---------------------------------------------------------------------------
# local window BA on T_align
# ---------------------------------------------------------------------------


def window_residuals(T_align: Se3, X_m, uv, poses_c, frame, cam: PinholeCamera):
    """Stacked ``(n, 2)`` residuals ``pi(inverse(pose_ci) T_align X_j) - u_j``."""
    Y = T_align.act(X_m)
    P = np.empty_like(Y)
    for fi, pose in enumerate(poses_c):
        sel = frame == fi
        if sel.any():
            P[sel] = pose.inverse().act(Y[sel])
    r, _ = _proj_residual_jac(P, uv, cam)
    return r


def window_jacobian(T_align: Se3, X_m, uv, poses_c, frame, cam: PinholeCamera):
    """``(n, 2, 6)`` derivative of the residuals under ``T_align <- Exp(d) T_align``."""
    Y = T_align.act(X_m)
    P = np.empty_like(Y)
    Rt = np.empty((len(Y), 3, 3))
    for fi, pose in enumerate(poses_c):
        sel = frame == fi
        if sel.any():
            P[sel] = pose.inverse().act(Y[sel])
            Rt[sel] = pose.R.T
    _, Jp = _proj_residual_jac(P, uv, cam)
    return np.einsum("nij,njk,nkl->nil", Jp, Rt, _point_left_jac(Y))


def huber_cost(r, delta):
    s = np.einsum("ni,ni->n", r, r)
    e = np.sqrt(s)
    return float(np.sum(np.where(e <= delta, s, 2 * delta * e - delta * delta)))


@dataclass
class BAResult:
    T_align: Se3
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    accepted: bool
    mean_error: float
    inliers: int
    reason: str = ""
    costs: list = field(default_factory=list)


def local_window_ba(win: LocalWindow, cam: PinholeCamera, cfg: FusionConfig = None) -> BAResult:
    """Huber-robust LM over ``T_align`` only; poses and points stay fixed."""
    cfg = cfg or FusionConfig()
    poses = win.poses_c
    args = (win.X_m, win.uv, poses, win.frame, cam)
    T = win.T_align
    r = window_residuals(T, *args)
    cost = huber_cost(r, cfg.huber)
    c0 = cost
    costs = [cost]
    lam = 1e-4
    fails = 0
    converged = False
    it = 0
    while it < cfg.ba_max_iters:
        it += 1
        J = window_jacobian(T, *args)
        e = np.linalg.norm(r, axis=1)
        w = np.where(e <= cfg.huber, 1.0, cfg.huber / np.maximum(e, 1e-300))
        H = np.einsum("n,nji,njk->ik", w, J, J)
        g = np.einsum("n,nji,nj->i", w, J, r)
        dx = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
        T_new = Se3.exp(dx) @ T
        r_new = window_residuals(T_new, *args)
        c_new = huber_cost(r_new, cfg.huber)
        if c_new <= cost:
            rel = (cost - c_new) / max(cost, 1e-300)
            T, r, cost = T_new, r_new, c_new
            costs.append(cost)
            lam = max(lam / 10, 1e-12)
            fails = 0
            if rel < cfg.ba_rel_tol or np.linalg.norm(dx) < 1e-14:
                converged = True
                break
        else:
            fails += 1
            lam *= 10
            if np.linalg.norm(dx) < 1e-14 or cost == 0.0:
                converged = True
                break
            if fails >= 5:
                return BAResult(win.T_align, c0, cost, it, False, False, float("nan"), 0,
                                "diverged: 5 consecutive cost increases", costs)
    e = np.linalg.norm(r, axis=1)
    inl = e < cfg.ba_inlier_threshold
    mean = float(e[inl].mean()) if inl.any() else float("inf")
    ok = mean < cfg.ba_max_mean_error and int(inl.sum()) >= cfg.min_window_pairs
    reason = "" if ok else f"mean inlier error {mean:.3f} px over {int(inl.sum())} pairs"
    return BAResult(T, c0, cost, it, converged, ok, mean, int(inl.sum()), reason, costs)


# ---------------------------------------------------------------------------
# full verification of one candidate
# ---------------------------------------------------------------------------


@dataclass
class FusionResult:
    accepted: bool
    T_align: Optional[Se3]
    hypothesis: Optional[AlignmentHypothesis]
    window_pairs: int = 0
    ba: Optional[BAResult] = None
    reason: str = ""
    event: dict = field(default_factory=dict)


def verify_candidate(submap_c, seq_c, submap_m, seq_m, cam: PinholeCamera, cfg: FusionConfig = None,
                     rng=None) -> FusionResult:
    """Descriptor match -> PnP -> gate -> local window -> BA for one candidate."""
    cfg = cfg or FusionConfig()
    rng = np.random.default_rng([seq_c, seq_m, submap_c.submap_id, submap_m.submap_id]) if rng is None else rng
    K_c, K_m = submap_c.keyframes[seq_c], submap_m.keyframes[seq_m]
    event = {"query": [submap_c.submap_id, seq_c], "match": [submap_m.submap_id, seq_m]}

    def reject(reason, hyp=None, **kw):
        event.update(accepted=False, reason=reason)
        return FusionResult(False, None, hyp, reason=reason, event=event, **kw)

    mp_ids = sorted(set(K_m.observations.values()))
    if not mp_ids:
        return reject("matched keyframe has no map points")
    X = np.array([submap_m.map_points[i].position for i in mp_ids])
    D = np.array([np.frombuffer(submap_m.map_points[i].descriptor, dtype=np.uint8) for i in mp_ids])
    pairs = match_descriptors(D, K_c.descriptors, cfg.max_hamming, cfg.ratio)
    event["descriptor_matches"] = len(pairs)
    hyp = solve_pnp_ransac(X[pairs[:, 0]], K_c.keypoints[pairs[:, 1]].astype(float), cam,
                           K_c.pose, K_m.pose, cfg, rng)
    event["pnp_inliers"] = hyp.inlier_count
    if hyp.T_world is None:
        return reject(hyp.reason, hyp)
    event["check_yaw_deg"] = math.degrees(yaw_of(hyp.T_check))
    event["check_translation"] = float(np.linalg.norm(hyp.T_check.t))
    if not accept_gate(hyp, cfg.yaw_threshold, cfg.trans_threshold):
        return reject("gate", hyp)
    hyp.accepted = True
    win = build_local_window(K_c, K_m, cfg.window, hyp.T_world, cam, submap_c=submap_c, submap_m=submap_m,
                             cfg=cfg, rng=rng)
    if win is None:
        return reject("local window too small", hyp)
    event["window"] = dict(win.stats)
    ba = local_window_ba(win, cam, cfg)
    event["ba"] = {"iterations": ba.iterations, "initial_cost": ba.initial_cost, "final_cost": ba.final_cost,
                   "mean_error": ba.mean_error, "inliers": ba.inliers}
    if not ba.accepted:
        return reject(ba.reason, hyp, window_pairs=len(win), ba=ba)
    event.update(accepted=True, reason="", T_align=ba.T_align.to_tum())
    return FusionResult(True, ba.T_align, hyp, len(win), ba, "", event)
