"""Scenario configuration files.

A scenario is a TOML document::

    name = "split"
    seed = 7
    duration = 60.0          # default per-agent duration, seconds
    kf_rate = 10.0

    [[fields]]               # landmark fields; agents observe all of them
    n = 5000
    seed = 1
    center = [0.0, 0.0, 0.0]

    [[agents]]
    id = 1
    start_offset = 0.0       # session seconds before the agent starts streaming
    trajectory = { kind = "circle", radius = 4.0, laps = 1.0 }
    drift = { yaw_rate_bias = 0.002, translation_bias = [0.0, 0.0, 0.0], random_walk_sigma = 0.0005 }
    world_offset = { yaw = 0.3, t = [1.0, -2.0, 0.0] }

    [channel]
    loss_rate = 0.0
    reorder_rate = 0.0
    latency = 0.01

    [server]                 # ServerConfig fields
    min_score = 0.3

    [fusion]                 # FusionConfig fields (angles in degrees)
    yaw_threshold_deg = 10.0

Trajectory tables take ``kind`` plus :class:`~collabslam.agentsim.TrajectorySpec`
params; ``duration``, ``t_start`` and ``path`` are recognised as fields.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .agentsim import AgentConfig, DriftModel, LandmarkField, TrajectorySpec, make_landmark_field
from .fusion import FusionConfig
from .geometry import Se3
from .placerec import Vocabulary, train_vocabulary
from .server import ServerConfig


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    seed: int = 0
    duration: float = 60.0
    kf_rate: float = 10.0
    fields: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    channel: dict = field(default_factory=dict)
    server: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)
    vocab: dict = field(default_factory=dict)
    expect: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {"name", "seed", "duration", "kf_rate", "fields", "agents", "channel", "server", "fusion",
                 "vocab", "expect"}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown scenario keys: {sorted(extra)}")
        if not d.get("agents"):
            raise ScenarioError("scenario needs at least one [[agents]] entry")
        ids = [a.get("id") for a in d["agents"]]
        if None in ids or len(set(ids)) != len(ids):
            raise ScenarioError("agent ids must be present and unique")
        sc = cls(name=d.get("name", "scenario"), raw=copy.deepcopy(d),
                 **{k: copy.deepcopy(d[k]) for k in known - {"name"} if k in d})
        if not sc.fields:
            sc.fields = [{"n": 5000, "seed": sc.seed}]
        return sc

    def with_seed(self, seed: int) -> "Scenario":
        d = copy.deepcopy(self.raw)
        d["seed"] = seed
        return Scenario.from_dict(d)

    def with_overrides(self, **kw) -> "Scenario":
        d = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if isinstance(v, dict):
                d.setdefault(k, {}).update(v)
            else:
                d[k] = v
        return Scenario.from_dict(d)

    def with_agent(self, agent_id: int, **kw) -> "Scenario":
        """Copy with keys of one ``[[agents]]`` entry replaced."""
        d = copy.deepcopy(self.raw)
        for a in d["agents"]:
            if a["id"] == agent_id:
                a.update(copy.deepcopy(kw))
                break
        else:
            raise KeyError(agent_id)
        return Scenario.from_dict(d)

    def without_drift(self) -> "Scenario":
        sc = self
        for a in self.agents:
            sc = sc.with_agent(a["id"], drift={})
        return sc

    # builders -------------------------------------------------------------
    def build_field(self) -> LandmarkField:
        parts = []
        for i, f in enumerate(self.fields):
            kw = dict(f)
            seed = kw.pop("seed", 0) + 1000 * self.seed + i
            parts.append(make_landmark_field(seed=seed, **kw))
        if len(parts) == 1:
            return parts[0]
        return LandmarkField(np.vstack([p.positions for p in parts]), np.vstack([p.descriptors for p in parts]),
                             parts[0].descriptor_flip_noise, np.concatenate([p.leaf_of for p in parts]))

    def trajectory(self, a: dict) -> TrajectorySpec:
        t = dict(a.get("trajectory", {}))
        kind = t.pop("kind", "circle")
        duration = t.pop("duration", a.get("duration", self.duration))
        t_start = t.pop("t_start", 0.0)
        path = t.pop("path", None)
        return TrajectorySpec(kind, duration, a.get("kf_rate", self.kf_rate), t, path, t_start)

    def drift(self, a: dict) -> DriftModel:
        d = dict(a.get("drift", {}))
        d.setdefault("seed", self.seed)
        if "translation_bias" in d:
            d["translation_bias"] = tuple(d["translation_bias"])
        return DriftModel(**d)

    def agent_configs(self) -> list:
        out = []
        for a in self.agents:
            wo = a.get("world_offset", {})
            offset = Se3.from_yaw(wo.get("yaw", 0.0), wo.get("t", (0.0, 0.0, 0.0)))
            extra = {k: a[k] for k in ("max_keypoints", "max_new_points", "pixel_noise", "point_noise", "max_depth",
                                                     "track_length")
                     if k in a}
            out.append(AgentConfig(a["id"], self.trajectory(a), self.drift(a), offset, seed=self.seed, **extra))
        return out

    def start_offset(self, agent_id: int) -> float:
        for a in self.agents:
            if a["id"] == agent_id:
                return float(a.get("start_offset", 0.0))
        raise KeyError(agent_id)

    def fusion_config(self) -> FusionConfig:
        f = dict(self.fusion)
        if "yaw_threshold_deg" in f:
            f["yaw_threshold"] = math.radians(f.pop("yaw_threshold_deg"))
        return FusionConfig(**f)

    def server_config(self) -> ServerConfig:
        return ServerConfig(fusion=self.fusion_config(), **self.server)


def load_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        return Scenario.from_dict(tomllib.load(fh))


def scenario_vocabulary(sc: Optional[Scenario], path=None, field: LandmarkField = None) -> Vocabulary:
    """Load ``path`` if it exists, else train on the scenario's landmark descriptors.

    A freshly trained vocabulary is saved to ``path`` when one is given.
    """
    if path and os.path.exists(path):
        return Vocabulary.load(path)
    if field is None:
        if sc is None:
            raise ScenarioError("need a vocabulary file or a scenario to train one")
        field = sc.build_field()
    v = dict(sc.vocab) if sc else {}
    vocab = train_vocabulary(field.descriptors, v.get("k", 10), v.get("L", 3), v.get("seed", 0))
    if path:
        vocab.save(path)
    return vocab
