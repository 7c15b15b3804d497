"""A freshly initialized planner returns the anchor bank untouched."""

import numpy as np

from anchorplan.anchors import build_anchor_bank
from anchorplan.config import ModelConfig, WorldConfig
from anchorplan.planner import AnchorPlanner
from anchorplan.scenes import generate_corpus

world = WorldConfig()
scenes = generate_corpus(7, 40)
bank, _ = build_anchor_bank(scenes, modes=6, seed=0)

# offset and score heads are zero-initialized, so decoding adds nothing:
# the plan IS the bank, every mode equally probable
planner = AnchorPlanner(world, ModelConfig(width=32, heads=4, hidden=32, agent_slots=8))
out = planner.plan(scenes[0], bank)
print("trajectories == bank:", np.array_equal(out.trajectories, bank.waypoints))
print("mode probabilities:  ", np.round(out.mode_probs, 4).tolist())
print("best mode:           ", out.best_mode)

# nudging the heads off zero breaks the identity — now perception steers
rng = np.random.default_rng(1)
for mlp in (planner.offset_head, planner.score_head, planner.maln_mlp):
    last = mlp.layers[-1]
    last.w.data[:] = rng.normal(0.0, 0.05, size=last.w.shape)
    if last.b is not None:
        last.b.data[:] = rng.normal(0.0, 0.05, size=last.b.shape)
out = planner.plan(scenes[0], bank)
drift = np.linalg.norm((out.trajectories - bank.waypoints)[:, :, :2], axis=2).max()
print(f"\nafter shaking the heads: max waypoint drift {drift:.2f} m,",
      f"mode probs {np.round(out.mode_probs, 3).tolist()}")
