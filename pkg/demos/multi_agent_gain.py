"""Second agent alone versus together with the first one.

    python demos/multi_agent_gain.py [scenarios/multi.toml]

Runs the scenario twice in process, once with only agent 2 and once with
both agents, and prints agent 2's ATE and the fusion events that merged
the two maps.
"""

import sys

from collabslam.eval import run_scenario
from collabslam.scenario import load_scenario, scenario_vocabulary

sc = load_scenario(sys.argv[1] if len(sys.argv) > 1 else "scenarios/multi.toml")
field = sc.build_field()
vocab = scenario_vocabulary(sc, field=field)

alone = run_scenario(sc, vocab, field=field, agents=[2])
together = run_scenario(sc, vocab, field=field)

print(f"agent 2 ATE alone    : {alone['agents']['2']['ate']:.4f} m")
print(f"agent 2 ATE together : {together['agents']['2']['ate']:.4f} m")
print(f"merges: {together['server']['merges']}, accepted: {together['server']['accepted']}")
accepted = [ev for ev in together["fusion_events"] if ev["accepted"]]
if accepted:
    ev = accepted[0]
    print(f"first merge at t={ev['t']:.1f}s: keyframe {ev['query']} matched {ev['match']} "
          f"with {ev['pnp_inliers']} PnP inliers (yaw check {ev['check_yaw_deg']:.2f} deg)")
    print(f"{len(accepted) - 1} more accepted alignments became loop edges of the merged graph")
for g in together["groups"]:
    print(f"group {g['submaps']}: ATE {g['ate']:.4f} m")
