"""Drive planned routes step by step and aggregate closed-loop scores."""

from anchorplan.anchors import build_anchor_bank
from anchorplan.closed_loop import RunConfig, simulate_closed_loop
from anchorplan.config import ModelConfig, WorldConfig
from anchorplan.metrics import closed_loop_scores
from anchorplan.planner import AnchorPlanner
from anchorplan.scenes import generate_corpus

world = WorldConfig()
scenes = generate_corpus(21, 12)
bank, _ = build_anchor_bank(scenes, modes=6, seed=0)

# the untrained planner drives the first anchor; collisions and off-road
# excursions multiply penalties into each route's driving score
planner = AnchorPlanner(world, ModelConfig(width=16, heads=2, hidden=16, agent_slots=8))
cfg = RunConfig(max_steps=16, replan_interval=2, seed=0)
routes = simulate_closed_loop(planner, scenes, bank, world, cfg)
for scene, r in zip(scenes, routes):
    flags = f"coll={r.n_collisions} offroad={r.n_offroad}"
    print(f"{scene.scene_id:<16} completion {r.completion:5.1f}%  "
          f"score {r.driving_score:5.1f}  {flags}  {'ok' if r.success else '--'}")

ds, sr = closed_loop_scores(routes)
print(f"\ndriving score {ds:.1f} / 100, success rate {sr:.0%} over {len(routes)} routes")
