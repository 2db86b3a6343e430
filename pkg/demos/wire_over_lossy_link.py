"""Push a few keyframes through a lossy, reordering link and watch them arrive intact.

    python demos/wire_over_lossy_link.py
"""

from collabslam.agentsim import Agent, AgentConfig, DriftModel, TrajectorySpec, make_landmark_field
from collabslam.wire import Link, MsgType, decode_keyframe, encode_keyframe

field = make_landmark_field(n=3000, seed=0)
agent = Agent(AgentConfig(1, TrajectorySpec("circle", 2.0, 10.0, {"radius": 4.0, "laps": 0.1}),
                          DriftModel(0.002)), field)
keyframes = [agent.simulate_step(t) for t in agent.cfg.trajectory.keyframe_times]

link = Link(1, 0, loss_rate=0.15, reorder_rate=0.3, seed=1)
sent = {}
for kf, points in keyframes:
    payload = encode_keyframe(kf, points)
    sent[link.agent.send(MsgType.KeyFramePush, payload)] = payload

now, got = 0.0, []
while not (link.agent.idle and not link.up.pending):
    received, _ = link.step(now)
    got += received
    now += 0.01

print(f"{len(sent)} keyframes, {link.agent.frames_sent} frames sent, "
      f"{link.up.frames_dropped} dropped, {link.agent.retransmitted_frames} retransmitted")
print("arrival order:", [m.msg_seq for m in got])
print("all payloads bit-identical:", all(m.payload == sent[m.msg_seq] for m in got) and len(got) == len(sent))
kf, points = decode_keyframe(got[0].payload)
print(f"first keyframe: {len(kf.keypoints)} keypoints, {len(kf.observations)} observations, "
      f"{len(points)} new map points")
