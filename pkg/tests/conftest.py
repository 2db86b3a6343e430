import numpy as np
import pytest

from collabslam.agentsim import Agent, AgentConfig, DriftModel, TrajectorySpec, make_landmark_field
from collabslam.mapcore import ServerSubmap, insert_keyframe


@pytest.fixture(scope="session")
def field():
    return make_landmark_field(n=3000, seed=42)


def build_submap(field, n_kf=40, agent_id=1, drift=None, laps=0.25, duration=None, **cfg_kw):
    """Feed a simulated agent's keyframes into a fresh submap; returns (submap, agent)."""
    duration = duration or n_kf / 10.0
    spec = TrajectorySpec("circle", duration, 10.0, {"radius": 4.0, "laps": laps})
    agent = Agent(AgentConfig(agent_id, spec, drift or DriftModel(), seed=7, **cfg_kw), field)
    sub = ServerSubmap(agent_id, agent_id)
    for t in spec.keyframe_times:
        kf, pts = agent.simulate_step(t)
        insert_keyframe(sub, kf, pts)
    return sub, agent


@pytest.fixture
def small_submap(field):
    return build_submap(field, 12)[0]

