"""Train a small planner for a few epochs and score it against the anchor baseline."""

from anchorplan.anchors import build_anchor_bank
from anchorplan.closed_loop import anchor_baseline_report, replay_open_loop
from anchorplan.config import ModelConfig, WorldConfig
from anchorplan.planner import AnchorPlanner
from anchorplan.scenes import generate_corpus
from anchorplan.training import TrainConfig, split_holdout, train

world = WorldConfig()
scenes = generate_corpus(0, 80)
train_scenes, holdout = split_holdout(scenes, 0.15, seed=0)
bank, _ = build_anchor_bank(train_scenes, modes=6, seed=0)

planner = AnchorPlanner(world, ModelConfig(width=16, heads=2, hidden=16, agent_slots=8))
cfg = TrainConfig(epochs=4, lr=5e-3, batch_size=8, seed=0)
print(f"training on {len(train_scenes)} scenes, holding out {len(holdout)}")
history = train(planner, train_scenes, bank, cfg)
for i in (0, len(history) // 2, len(history) - 1):
    bd = history[i]
    print(f"step {i:3d}: l_bev {bd.l_bev:.3f}  l_agent {bd.l_agent:.3f}  "
          f"l_reg {bd.l_reg:.3f}  l_cls {bd.l_cls:.3f}  total {bd.total:.3f}")

# a few toy-width epochs already fix the geometry (L2 toward the expert);
# beating the baseline's metric gates takes the full-length training run that
# the test suite exercises
baseline = anchor_baseline_report(holdout, bank, world)
trained = replay_open_loop(planner, holdout, bank)
print(f"\nanchor baseline: pdms {baseline['pdms']:.3f}  avg L2 {baseline['avg_l2']:.2f} m")
print(f"trained planner: pdms {trained['pdms']:.3f}  avg L2 {trained['avg_l2']:.2f} m")
