import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabslam.descriptors import random_descriptors
from collabslam.geometry import Se3
from collabslam.mapcore import (DuplicateKeyFrame, KeyFrame, MapPoint, OutOfOrderKeyFrame, ServerMapContainer,
                                ServerSubmap, apply_drift, dump_jsonl, insert_keyframe, load_jsonl,
                                transform_submap, validate)

from conftest import build_submap


def make_kf(seq, n_kp=10, obs=None, agent=1, pose=None, rng=None):
    rng = rng or np.random.default_rng(abs(seq))
    return KeyFrame(agent, seq, seq * 0.1, pose or Se3(t=[seq * 0.1, 0.0, 0.0]),
                    rng.uniform(0, 600, (n_kp, 2)), random_descriptors(n_kp, rng), obs or {})


def make_mp(mp_id, kf_id, rng):
    return MapPoint(mp_id, rng.normal(size=3), random_descriptors(1, rng)[0].tobytes(), {kf_id})


def test_first_keyframe():
    sub = ServerSubmap(1, 1)
    insert_keyframe(sub, make_kf(0))
    assert len(sub.keyframes) == 1 and validate(sub) == []


def test_full_sized_keyframe():
    rng = np.random.default_rng(0)
    sub = ServerSubmap(1, 1)
    pts = [make_mp(100 + i, (1, 0), rng) for i in range(70)]
    kf = make_kf(0, 700, {i * 10: 100 + i for i in range(70)}, rng=rng)
    insert_keyframe(sub, kf, pts)
    assert len(sub.map_points) == 70 and len(kf.keypoints) == 700 and len(kf.descriptors) == 700
    assert validate(sub) == []


def test_reinsert_is_rejected_and_submap_unchanged():
    sub = ServerSubmap(1, 1)
    rng = np.random.default_rng(1)
    insert_keyframe(sub, make_kf(0, obs={0: 5}), [make_mp(5, (1, 0), rng)])
    before = copy.deepcopy((sub.keyframes, sub.map_points))
    with pytest.raises(DuplicateKeyFrame):
        insert_keyframe(sub, make_kf(0, obs={0: 5}), [])
    with pytest.raises(OutOfOrderKeyFrame):
        insert_keyframe(sub, make_kf(-1))
    assert (sub.keyframes, sub.map_points) == before


def test_unknown_map_point_rejected():
    sub = ServerSubmap(1, 1)
    with pytest.raises(ValueError):
        insert_keyframe(sub, make_kf(0, obs={0: 99}))
    assert not sub.keyframes


def test_unobserved_or_clashing_new_point_rejected_without_side_effects():
    rng = np.random.default_rng(2)
    sub = ServerSubmap(1, 1)
    insert_keyframe(sub, make_kf(0, obs={0: 5}), [make_mp(5, (1, 0), rng)])
    before = copy.deepcopy((sub.keyframes, sub.map_points, sub.odometry))
    with pytest.raises(ValueError, match="not observed"):
        insert_keyframe(sub, make_kf(1, obs={0: 5}), [make_mp(6, (1, 1), rng)])
    with pytest.raises(ValueError, match="already present"):
        insert_keyframe(sub, make_kf(1, obs={0: 5}), [make_mp(5, (1, 1), rng)])
    assert (sub.keyframes, sub.map_points, sub.odometry) == before


def test_validate_reports_dangling_reference(small_submap):
    assert validate(small_submap) == []
    kf = next(iter(small_submap.keyframes.values()))
    victim = next(iter(kf.observations.values()))
    del small_submap.map_points[victim]
    problems = validate(small_submap)
    assert sum("dangling" in p for p in problems) >= 1
    assert all(str(victim) in p for p in problems if "dangling" in p)


def test_validate_reports_length_mismatch(small_submap):
    kf = next(iter(small_submap.keyframes.values()))
    kf.descriptors = kf.descriptors[:-1]
    assert any("descriptors for" in p for p in validate(small_submap))


def test_apply_drift_identity_is_bit_exact(small_submap):
    before = {s: kf.pose.matrix().copy() for s, kf in small_submap.keyframes.items()}
    n = apply_drift(small_submap, 3, Se3.identity())
    assert n == len(small_submap.keyframes) - 3
    for s, kf in small_submap.keyframes.items():
        assert np.array_equal(kf.pose.matrix(), before[s])


def test_apply_drift_translation_shifts_trailing(small_submap):
    seqs = list(small_submap.keyframes)
    cut = seqs[-5]
    before = {s: small_submap.keyframes[s].pose for s in seqs}
    assert apply_drift(small_submap, cut, Se3(t=[1.0, 0.0, 0.0])) == 5
    for s in seqs:
        delta = small_submap.keyframes[s].pose.t - before[s].t
        assert np.allclose(delta, [1.0, 0.0, 0.0] if s >= cut else 0.0, atol=0)
    tail = seqs[-5:]
    for a, b in zip(tail, tail[1:]):
        r0 = before[a].inverse() @ before[b]
        r1 = small_submap.keyframes[a].pose.inverse() @ small_submap.keyframes[b].pose
        assert r0.isclose(r1, 1e-12)
    assert validate(small_submap) == []


def test_apply_drift_moves_only_exclusively_trailing_points(small_submap):
    seqs = list(small_submap.keyframes)
    cut = seqs[6]
    pos = {i: mp.position.copy() for i, mp in small_submap.map_points.items()}
    apply_drift(small_submap, cut, Se3(t=[0.0, 0.0, 2.0]))
    for i, mp in small_submap.map_points.items():
        exclusive = all(o[1] >= cut for o in mp.observers)
        assert np.allclose(mp.position - pos[i], [0, 0, 2.0] if exclusive else 0.0)


def test_apply_drift_past_end_is_noop(small_submap):
    before = {s: kf.pose for s, kf in small_submap.keyframes.items()}
    assert apply_drift(small_submap, 10 ** 6, Se3(t=[1, 2, 3])) == 0
    assert all(small_submap.keyframes[s].pose == p for s, p in before.items())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 11), st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_apply_drift_preserves_relative_poses(field_seed, xi):
    sub = ServerSubmap(1, 1)
    rng = np.random.default_rng(field_seed)
    mp_id = 0
    for s in range(8):
        pts = [make_mp(mp_id + k, (1, s), rng) for k in range(3)]
        insert_keyframe(sub, make_kf(s, 5, {k: mp_id + k for k in range(3)},
                                     pose=Se3.exp(rng.normal(size=6)), rng=rng), pts)
        mp_id += 3
    before = {s: kf.pose for s, kf in sub.keyframes.items()}
    apply_drift(sub, 3, Se3.exp(np.array(xi)))
    for a in range(3, 8):
        for b in range(a, 8):
            r0 = before[a].inverse() @ before[b]
            r1 = sub.keyframes[a].pose.inverse() @ sub.keyframes[b].pose
            d = r0.inverse() @ r1
            assert d.angle() < 1e-12 and np.linalg.norm(d.t) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 30), st.integers(0, 5)), min_size=1, max_size=10))
def test_insert_then_validate_is_clean(spec):
    rng = np.random.default_rng(len(spec))
    sub = ServerSubmap(1, 1)
    known = []
    next_id = 0
    for seq, (n_kp, n_new) in enumerate(spec):
        n_new = min(n_new, n_kp)
        pts = [make_mp(next_id + k, (1, seq), rng) for k in range(n_new)]
        obs = {k: next_id + k for k in range(n_new)}
        for k, old in zip(range(n_new, n_kp), known[:2]):
            obs[k] = old
        insert_keyframe(sub, make_kf(seq, n_kp, obs, rng=rng), pts)
        known += [p.mp_id for p in pts]
        next_id += n_new
    assert validate(sub) == []


def test_transform_submap_updates_to_group(small_submap):
    T = Se3.from_yaw(0.4, [1.0, -2.0, 0.5])
    kf0 = small_submap.keyframes[0].pose
    transform_submap(small_submap, T)
    assert small_submap.to_group == T
    assert (T @ kf0).isclose(small_submap.keyframes[0].pose, 1e-12)
    assert validate(small_submap) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=20))
def test_merge_groups_stay_a_partition(merges):
    c = ServerMapContainer()
    for i in range(8):
        c.add_submap(ServerSubmap(i, i))
    for a, b in merges:
        c.merge(a, b)
        assert c.is_partition()
        assert c.same_group(a, b)
    for sid, sub in c.submaps.items():
        if sub.merged_into is not None:
            assert c.same_group(sid, sub.merged_into)


def test_merged_into_is_monotone():
    s = ServerSubmap(2, 2)
    s.set_merged_into(1)
    s.set_merged_into(1)
    with pytest.raises(ValueError):
        s.set_merged_into(3)


def test_jsonl_round_trip(tmp_path, small_submap):
    path = tmp_path / "sub.jsonl"
    dump_jsonl(small_submap, path)
    back = load_jsonl(path)
    assert back.keyframes == small_submap.keyframes
    assert back.map_points == small_submap.map_points
    assert validate(back) == []


def test_simulated_submap_validates(field):
    sub, _ = build_submap(field, 30, track_length=5)
    assert validate(sub) == []
