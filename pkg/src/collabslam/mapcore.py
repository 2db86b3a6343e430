"""Keyframes, map points, per-agent server submaps and the map container."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Se3

DESCRIPTOR_BYTES = 32


class DuplicateKeyFrame(ValueError):
    pass


class OutOfOrderKeyFrame(ValueError):
    pass


@dataclass
class MapPoint:
    mp_id: int
    position: np.ndarray
    descriptor: bytes
    observers: set = field(default_factory=set)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if len(self.descriptor) != DESCRIPTOR_BYTES:
            raise ValueError("descriptor must be 32 bytes")

    def __eq__(self, other):
        if not isinstance(other, MapPoint):
            return NotImplemented
        return (
            self.mp_id == other.mp_id
            and np.array_equal(self.position, other.position)
            and self.descriptor == other.descriptor
            and self.observers == other.observers
        )


@dataclass
class KeyFrame:
    """One agent observation.

    ``pose`` is world_of_submap ← camera.  ``descriptors`` is an ``(N, 32)``
    uint8 array aligned with the ``(N, 2)`` keypoint array, ``observations``
    maps keypoint index to map-point id.  ``correction_epoch`` counts the
    drift notifications the agent had applied when it produced the frame.
    """

    agent_id: int
    seq: int
    timestamp: float
    pose: Se3
    keypoints: np.ndarray
    descriptors: np.ndarray
    observations: dict = field(default_factory=dict)
    correction_epoch: int = 0
    low_texture: bool = False

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)

    @property
    def kf_id(self) -> tuple:
        return (self.agent_id, self.seq)

    def __eq__(self, other):
        if not isinstance(other, KeyFrame):
            return NotImplemented
        return (
            self.kf_id == other.kf_id
            and self.timestamp == other.timestamp
            and self.pose == other.pose
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.descriptors, other.descriptors)
            and self.observations == other.observations
            and self.correction_epoch == other.correction_epoch
        )


@dataclass
class ServerSubmap:
    """Server-side mirror of one agent's map.

    Poses and points are kept in the frame of the merge group the submap
    belongs to; ``to_group`` maps the agent's own world frame into it.
    ``odometry[seq]`` is the relative motion from the previous keyframe
    as received, used for sequence edges.
    """

    submap_id: int
    origin_agent: int
    keyframes: dict = field(default_factory=dict)
    map_points: dict = field(default_factory=dict)
    merged_into: Optional[int] = None
    to_group: Se3 = field(default_factory=Se3.identity)
    odometry: dict = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def sequence(self) -> list:
        return list(self.keyframes)

    def last_seq(self) -> int:
        return next(reversed(self.keyframes)) if self.keyframes else -1

    def kf(self, seq) -> KeyFrame:
        return self.keyframes[seq]

    def set_merged_into(self, target: int):
        if self.merged_into is not None and self.merged_into != target:
            raise ValueError(f"submap {self.submap_id} already merged into {self.merged_into}")
        self.merged_into = target


def insert_keyframe(submap: ServerSubmap, kf: KeyFrame, new_points=()):
    """Add a keyframe and the map points it introduces.

    Observations pointing at map points already in the submap are linked
    back (the point gains the keyframe as observer).  Raises
    ``DuplicateKeyFrame`` for a re-delivered id, ``OutOfOrderKeyFrame``
    for a sequence number that is not the largest so far, and ``ValueError``
    for observations or new points that do not fit the submap.  The submap
    is left untouched whenever it raises.
    """
    with submap.lock:
        if kf.seq in submap.keyframes:
            raise DuplicateKeyFrame(f"keyframe {kf.kf_id} already present")
        if kf.seq <= submap.last_seq():
            raise OutOfOrderKeyFrame(f"keyframe {kf.kf_id} after {submap.last_seq()}")
        new_ids = {mp.mp_id for mp in new_points}
        for idx, mp_id in kf.observations.items():
            if not 0 <= idx < len(kf.keypoints):
                raise ValueError(f"observation index {idx} out of range")
            if mp_id not in new_ids and mp_id not in submap.map_points:
                raise ValueError(f"observation references unknown map point {mp_id}")
        unobserved = new_ids - set(kf.observations.values())
        if unobserved:
            raise ValueError(f"new map point {min(unobserved)} is not observed by its keyframe")
        clash = new_ids & submap.map_points.keys()
        if clash:
            raise ValueError(f"map point {min(clash)} already present")
        if submap.keyframes:
            prev = submap.keyframes[submap.last_seq()]
            submap.odometry[kf.seq] = prev.pose.inverse() @ kf.pose
        for mp in new_points:
            submap.map_points[mp.mp_id] = MapPoint(mp.mp_id, mp.position.copy(), mp.descriptor, set())
        for mp_id in kf.observations.values():
            submap.map_points[mp_id].observers.add(kf.kf_id)
        submap.keyframes[kf.seq] = kf


def validate(submap: ServerSubmap) -> list:
    """Referential-integrity check. Returns a list of violation strings."""
    problems = []
    last = -1
    for seq, kf in submap.keyframes.items():
        if seq != kf.seq:
            problems.append(f"keyframe key {seq} != seq {kf.seq}")
        if seq <= last:
            problems.append(f"sequence not increasing at {seq}")
        last = seq
        if len(kf.descriptors) != len(kf.keypoints):
            problems.append(f"{kf.kf_id}: {len(kf.descriptors)} descriptors for {len(kf.keypoints)} keypoints")
        for idx, mp_id in kf.observations.items():
            if not 0 <= idx < len(kf.keypoints):
                problems.append(f"{kf.kf_id}: observation index {idx} out of range")
            mp = submap.map_points.get(mp_id)
            if mp is None:
                problems.append(f"{kf.kf_id}: dangling reference to map point {mp_id}")
            elif kf.kf_id not in mp.observers:
                problems.append(f"{kf.kf_id}: map point {mp_id} does not list it as observer")
        if not np.all(np.isfinite(kf.pose.t)):
            problems.append(f"{kf.kf_id}: non-finite pose")
    observed = {seq: set(kf.observations.values()) for seq, kf in submap.keyframes.items()}
    for mp_id, mp in submap.map_points.items():
        if not mp.observers:
            problems.append(f"map point {mp_id} has no observers")
        for obs in mp.observers:
            kf = submap.keyframes.get(obs[1]) if obs[0] == submap.origin_agent else None
            if kf is None or mp_id not in observed[kf.seq]:
                problems.append(f"map point {mp_id}: observer {obs} does not observe it")
        if not np.all(np.isfinite(mp.position)):
            problems.append(f"map point {mp_id}: non-finite position")
    return problems


def reference_keyframe(mp: MapPoint) -> tuple:
    """The earliest observer; points move rigidly with it."""
    return min(mp.observers)


def apply_drift(submap: ServerSubmap, from_sequence: int, drift: Se3) -> int:
    """Left-multiply every pose with ``seq >= from_sequence`` by ``drift``.

    Map points whose observers all lie in the corrected range move with
    them; points also seen by earlier keyframes stay anchored.
    """
    with submap.lock:
        seqs = [s for s in submap.keyframes if s >= from_sequence]
        if not seqs:
            return 0
        for s in seqs:
            kf = submap.keyframes[s]
            kf.pose = drift @ kf.pose
        moved = set()
        for s in seqs:
            for mp_id in submap.keyframes[s].observations.values():
                if mp_id in moved:
                    continue
                mp = submap.map_points[mp_id]
                if all(o[1] >= from_sequence for o in mp.observers):
                    mp.position = drift.act(mp.position)
                moved.add(mp_id)
        return len(seqs)


def transform_submap(submap: ServerSubmap, T: Se3):
    """Re-express every pose and point of ``submap`` through ``T``."""
    with submap.lock:
        for kf in submap.keyframes.values():
            kf.pose = T @ kf.pose
        if submap.map_points:
            ids = list(submap.map_points)
            P = T.act(np.array([submap.map_points[i].position for i in ids]))
            for i, p in zip(ids, P):
                submap.map_points[i].position = p
        submap.to_group = T @ submap.to_group


def set_poses(submap: ServerSubmap, new_poses: dict):
    """Overwrite poses by seq; points follow their reference keyframe."""
    with submap.lock:
        deltas = {}
        for seq, pose in new_poses.items():
            kf = submap.keyframes[seq]
            if pose == kf.pose:
                continue
            deltas[kf.kf_id] = pose @ kf.pose.inverse()
            kf.pose = pose
        moved: dict = {}
        for mp in submap.map_points.values():
            ref = min(mp.observers)
            if ref in deltas:
                moved.setdefault(ref, []).append(mp)
        for ref, mps in moved.items():
            X = deltas[ref].act(np.array([mp.position for mp in mps]))
            for mp, x in zip(mps, X):
                mp.position = x


class ServerMapContainer:
    """All submaps plus the partition of submap ids into fused groups."""

    def __init__(self):
        self.submaps: dict = {}
        self._group_of: dict = {}
        self._lock = threading.RLock()

    def add_submap(self, submap: ServerSubmap):
        with self._lock:
            if submap.submap_id in self.submaps:
                raise ValueError(f"submap {submap.submap_id} exists")
            self.submaps[submap.submap_id] = submap
            self._group_of[submap.submap_id] = submap.submap_id

    def group_root(self, submap_id: int) -> int:
        return self._group_of[submap_id]

    def group(self, submap_id: int) -> list:
        root = self._group_of[submap_id]
        return sorted(s for s, r in self._group_of.items() if r == root)

    @property
    def merge_groups(self) -> list:
        groups = {}
        for s, r in sorted(self._group_of.items()):
            groups.setdefault(r, []).append(s)
        return [groups[r] for r in sorted(groups)]

    def is_singleton(self, submap_id: int) -> bool:
        return len(self.group(submap_id)) == 1

    def same_group(self, a: int, b: int) -> bool:
        return self._group_of[a] == self._group_of[b]

    def merge(self, keep: int, absorb: int):
        """Join ``absorb``'s group into ``keep``'s. Root of ``keep`` survives."""
        with self._lock:
            rk, ra = self._group_of[keep], self._group_of[absorb]
            if rk == ra:
                return
            for s, r in list(self._group_of.items()):
                if r == ra:
                    self._group_of[s] = rk
            self.submaps[ra].set_merged_into(keep)

    def is_partition(self) -> bool:
        seen = [s for g in self.merge_groups for s in g]
        return sorted(seen) == sorted(self.submaps) and len(seen) == len(set(seen))

    @property
    def lock(self):
        return self._lock


# ---------------------------------------------------------------------------
# JSON-lines dump
# ---------------------------------------------------------------------------


def dump_jsonl(submap: ServerSubmap, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "submap", "submap_id": submap.submap_id,
                             "origin_agent": submap.origin_agent,
                             "merged_into": submap.merged_into,
                             "to_group": submap.to_group.to_tum()}) + "\n")
        for kf in submap.keyframes.values():
            fh.write(json.dumps({
                "type": "keyframe", "agent_id": kf.agent_id, "seq": kf.seq,
                "timestamp": kf.timestamp, "pose": kf.pose.to_tum(),
                "keypoints": kf.keypoints.tolist(),
                "descriptors": [d.tobytes().hex() for d in kf.descriptors],
                "observations": sorted([int(k), int(v)] for k, v in kf.observations.items()),
                "correction_epoch": kf.correction_epoch,
            }) + "\n")
        for mp in submap.map_points.values():
            fh.write(json.dumps({
                "type": "map_point", "mp_id": mp.mp_id,
                "position": [float(v) for v in mp.position],
                "descriptor": mp.descriptor.hex(),
                "observers": sorted(list(o) for o in mp.observers),
            }) + "\n")


def load_jsonl(path) -> ServerSubmap:
    submap = None
    kfs, mps = [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "submap":
                submap = ServerSubmap(rec["submap_id"], rec["origin_agent"], merged_into=rec["merged_into"],
                                      to_group=Se3.from_tum(rec["to_group"]))
            elif rec["type"] == "keyframe":
                kfs.append(KeyFrame(
                    rec["agent_id"], rec["seq"], rec["timestamp"], Se3.from_tum(rec["pose"]),
                    np.array(rec["keypoints"], dtype=np.float32).reshape(-1, 2),
                    np.frombuffer(bytes.fromhex("".join(rec["descriptors"])), dtype=np.uint8).reshape(-1, 32),
                    {k: v for k, v in rec["observations"]}, rec["correction_epoch"]))
            else:
                mps.append(MapPoint(rec["mp_id"], rec["position"], bytes.fromhex(rec["descriptor"]),
                                    {tuple(o) for o in rec["observers"]}))
    if submap is None:
        raise ValueError("missing submap header record")
    for kf in kfs:
        submap.keyframes[kf.seq] = kf
    for mp in mps:
        submap.map_points[mp.mp_id] = mp
    seqs = list(submap.keyframes)
    for a, b in zip(seqs, seqs[1:]):
        submap.odometry[b] = submap.keyframes[a].pose.inverse() @ submap.keyframes[b].pose
    return submap
