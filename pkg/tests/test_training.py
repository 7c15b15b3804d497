"""Four-term loss assembly, winner assignment, and the AdamW training loop."""

from __future__ import annotations

import csv
import dataclasses

import numpy as np
import pytest

from anchorplan.anchors import AnchorBank, build_anchor_bank
from anchorplan.autodiff import NumericError, Tensor
from anchorplan.config import CameraConfig, ModelConfig, RasterConfig, WorldConfig
from anchorplan.encoder import match_boxes_to_slots
from anchorplan.nn import AdamW
from anchorplan.planner import AnchorPlanner, PlanGraph
from anchorplan.scenes import bev_class_map, generate_corpus, generate_scenario, rasterize_scene
from anchorplan.training import (
    LossBreakdown,
    TrainConfig,
    assign_planning_targets,
    scene_loss,
    split_holdout,
    total_loss,
    train,
    train_step,
)

WORLD = WorldConfig(
    horizon=4,
    raster=RasterConfig(rows=16, cols=16, cell_m=2.0, x_min=-5.0, y_min=-17.0),
    camera=CameraConfig(width=12, height=8, focal=5.0, cx=5.5, cy=3.0),
)
MODEL = ModelConfig(
    width=16, heads=2, hidden=16, agent_slots=2, window_bev=1, window_img=2,
    rel_width=4, fourier_bands=2,
)

SCENES = generate_corpus(0, 12, cfg=WORLD)
BANK, _ = build_anchor_bank(SCENES, 3, seed=0)


def _planner(seed=0, rng_shake=None) -> AnchorPlanner:
    planner = AnchorPlanner(WORLD, dataclasses.replace(MODEL, seed=seed))
    if rng_shake is not None:
        for mlp in (planner.offset_head, planner.score_head):
            last = mlp.layers[-1]
            last.w.data[:] = rng_shake.normal(0.0, 0.05, size=last.w.shape)
            if last.b is not None:
                last.b.data[:] = rng_shake.normal(0.0, 0.05, size=last.b.shape)
    return planner


# ===========================================================================
# configuration and assignment
# ===========================================================================


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lambdas=(1.0, 2.0, 3.0))
        with pytest.raises(ValueError):
            TrainConfig(lambdas=(1.0, -1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(assign_by="hungarian")


class TestAssignPlanningTargets:
    def test_exact_anchor_wins_its_own_mode(self):
        for m in range(BANK.modes):
            winner, target = assign_planning_targets(BANK, BANK.waypoints[m])
            assert winner == m
            np.testing.assert_array_equal(target, BANK.waypoints[m])

    def test_degenerate_bank_ties_to_mode_zero(self, rng):
        flat = np.tile(BANK.waypoints[:1], (3, 1, 1))
        degenerate = dataclasses.replace(BANK, waypoints=flat)
        winner, _ = assign_planning_targets(degenerate, rng.normal(size=(4, 3)))
        assert winner == 0

    def test_matches_brute_force_scan(self, rng):
        for _ in range(50):
            gt = rng.normal(scale=5.0, size=(4, 3))
            winner, _ = assign_planning_targets(BANK, gt)
            d2 = [
                float(((BANK.waypoints[m, :, :2] - gt[:, :2]) ** 2).sum())
                for m in range(BANK.modes)
            ]
            assert winner == int(np.argmin(d2))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            assign_planning_targets(BANK, np.zeros((5, 3)))


# ===========================================================================
# the four-term loss
# ===========================================================================


def _oracle_terms(planner, scene, bank, cfg):
    """Independent numpy recomputation of all four raw loss terms."""
    bundle, graph = planner.forward(scene, bank)

    z = bundle.seg_logits.data
    labels = bev_class_map(rasterize_scene(scene, WORLD.raster)).reshape(-1)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    l_bev = float((lse - z[np.arange(len(labels)), labels]).mean())

    centers = np.array([[a.x, a.y] for a in scene.agents]).reshape(-1, 2)
    matches = match_boxes_to_slots(centers, planner.encoder.reference_points)
    obj_t = np.zeros(bundle.objectness_logits.shape[0])
    for s, _ in matches:
        obj_t[s] = 1.0
    x = bundle.objectness_logits.data
    l_agent = float((np.maximum(x, 0) - x * obj_t + np.log1p(np.exp(-np.abs(x)))).mean())
    if matches:
        pred = np.stack([bundle.boxes.data[s] for s, _ in matches])
        gt_boxes = np.array(
            [[a.x, a.y, a.heading, a.length, a.width] for a in (scene.agents[g] for _, g in matches)]
        )
        l_agent += float(np.abs(pred - gt_boxes).mean())

    gt = np.asarray(scene.gt)
    d2 = [float(((bank.waypoints[m, :, :2] - gt[:, :2]) ** 2).sum()) for m in range(bank.modes)]
    winner = int(np.argmin(d2))
    l_reg = float(np.abs(graph.trajectories[winner].data - gt).mean())

    s = graph.scores.data
    p = np.exp(s - s.max())
    p /= p.sum()
    l_cls = float(cfg.focal_alpha * (1.0 - p[winner]) ** cfg.focal_gamma * -np.log(p[winner]))
    return l_bev, l_agent, l_reg, l_cls


class TestTotalLoss:
    def test_matches_independent_recomputation(self, rng):
        cfg = TrainConfig()
        planner = _planner(rng_shake=rng)
        for scene in SCENES[:4]:
            _, bd = scene_loss(planner, scene, BANK, cfg)
            oracle = _oracle_terms(planner, scene, BANK, cfg)
            np.testing.assert_allclose(
                [bd.l_bev, bd.l_agent, bd.l_reg, bd.l_cls], oracle, rtol=1e-12, atol=1e-12
            )

    def test_total_is_linear_in_lambdas(self, rng):
        planner = _planner(rng_shake=rng)
        scene = SCENES[0]
        lambdas = (3.0, 0.5, 7.0, 0.25)
        _, bd = scene_loss(planner, scene, BANK, TrainConfig(lambdas=lambdas))
        expected = sum(w * v for w, v in zip(lambdas, (bd.l_bev, bd.l_agent, bd.l_reg, bd.l_cls)))
        assert abs(bd.total - expected) <= 1e-12
        assert bd.l_bev >= 0 and bd.l_agent >= 0 and bd.l_reg >= 0 and bd.l_cls >= 0

    def test_single_lambda_isolates_one_term(self, rng):
        planner = _planner(rng_shake=rng)
        _, bd = scene_loss(planner, SCENES[1], BANK, TrainConfig(lambdas=(1.0, 0.0, 0.0, 0.0)))
        assert bd.total == bd.l_bev

    def test_gt_on_an_anchor_zeroes_regression_at_init(self):
        planner = _planner()  # zero-initialized heads reproduce the anchors
        scene = generate_scenario(5, "straight", WORLD)
        scene.gt = BANK.waypoints[1].copy()
        _, bd = scene_loss(planner, scene, BANK, TrainConfig())
        assert bd.l_reg == 0.0

    def test_improving_non_winner_trajectories_leaves_l_reg_fixed(self, rng):
        cfg = TrainConfig()
        planner = _planner(rng_shake=rng)
        scene = SCENES[2]
        bundle, graph = planner.forward(scene, BANK)
        winner, gt = assign_planning_targets(BANK, scene.gt)
        _, base = total_loss(
            bundle, graph, scene, BANK, cfg, WORLD, planner.encoder.reference_points
        )
        improved = PlanGraph(
            [
                t if m == winner else Tensor(np.asarray(scene.gt, dtype=np.float64))
                for m, t in enumerate(graph.trajectories)
            ],
            graph.scores,
        )
        _, after = total_loss(
            bundle, improved, scene, BANK, cfg, WORLD, planner.encoder.reference_points
        )
        assert after.l_reg == base.l_reg

    def test_prediction_assignment_picks_closest_decoded_mode(self, rng):
        cfg = TrainConfig(assign_by="prediction")
        planner = _planner(rng_shake=rng)
        scene = SCENES[3]
        bundle, graph = planner.forward(scene, BANK)
        gt = np.asarray(scene.gt)
        d2 = [float(((t.data[:, :2] - gt[:, :2]) ** 2).sum()) for t in graph.trajectories]
        _, bd = total_loss(bundle, graph, scene, BANK, cfg, WORLD, planner.encoder.reference_points)
        expected = float(np.abs(graph.trajectories[int(np.argmin(d2))].data - gt).mean())
        np.testing.assert_allclose(bd.l_reg, expected, rtol=1e-12)

    def test_non_finite_parameters_name_the_failing_term(self):
        planner = _planner()
        planner.encoder.seg_head.w.data[0, 0] = np.nan
        with pytest.raises(NumericError, match="l_bev"):
            scene_loss(planner, SCENES[0], BANK, TrainConfig())


# ===========================================================================
# optimization loop
# ===========================================================================


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        planner = _planner()
        before = {k: v.copy() for k, v in planner.state_dict().items()}
        opt = AdamW(planner, lr=0.0, weight_decay=1e-4)
        train_step(planner, SCENES[:2], BANK, opt, TrainConfig())
        after = planner.state_dict()
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_batch_breakdown_is_the_mean_of_scene_losses(self, rng):
        cfg = TrainConfig()
        planner = _planner(rng_shake=rng)
        singles = [scene_loss(planner, s, BANK, cfg)[1] for s in SCENES[:3]]
        opt = AdamW(planner, lr=1e-9, weight_decay=0.0)
        bd = train_step(planner, SCENES[:3], BANK, opt, cfg)
        for name in ("l_bev", "l_agent", "l_reg", "l_cls", "total"):
            want = np.mean([getattr(s, name) for s in singles])
            np.testing.assert_allclose(getattr(bd, name), want, rtol=1e-12)

    def test_rejects_empty_batch(self):
        planner = _planner()
        with pytest.raises(ValueError):
            train_step(planner, [], BANK, AdamW(planner), TrainConfig())

    def test_loss_decreases_when_overfitting_one_scene(self):
        planner = _planner()
        cfg = TrainConfig(lr=1e-2, weight_decay=0.0)
        opt = AdamW(planner, lr=cfg.lr, weight_decay=cfg.weight_decay)
        scene = SCENES[0]
        first = train_step(planner, [scene], BANK, opt, cfg)
        last = first
        for _ in range(24):
            last = train_step(planner, [scene], BANK, opt, cfg)
        assert last.total < first.total


class TestTrainLoop:
    def test_two_runs_same_seed_are_bit_identical(self):
        cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4, seed=9)
        runs = []
        for _ in range(2):
            planner = _planner(seed=3)
            history = train(planner, SCENES[:8], BANK, cfg)
            runs.append((planner.state_dict(), history))
        params_a, hist_a = runs[0]
        params_b, hist_b = runs[1]
        for k in params_a:
            np.testing.assert_array_equal(params_a[k], params_b[k])
        assert [h.total for h in hist_a] == [h.total for h in hist_b]

    def test_metrics_csv_has_the_pinned_columns(self, tmp_path):
        planner = _planner()
        log = tmp_path / "metrics.csv"
        history = train(
            planner, SCENES[:4], BANK, TrainConfig(lr=1e-3, epochs=2, batch_size=2), log_path=log
        )
        with open(log, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "l_bev", "l_agent", "l_reg", "l_cls", "total"]
        assert len(rows) == 1 + len(history)
        assert [int(r[0]) for r in rows[1:]] == list(range(1, len(history) + 1))
        np.testing.assert_allclose(float(rows[1][5]), history[0].total, rtol=1e-12)

    def test_rejects_empty_corpus(self):
        with pytest.raises(ValueError):
            train(_planner(), [], BANK, TrainConfig())


class TestSplitHoldout:
    def test_sizes_partition_and_determinism(self):
        kept, held = split_holdout(SCENES, 0.25, seed=1)
        assert len(held) == 3 and len(kept) == 9
        ids = {s.scene_id for s in SCENES}
        assert {s.scene_id for s in kept} | {s.scene_id for s in held} == ids
        assert not ({s.scene_id for s in kept} & {s.scene_id for s in held})
        kept2, held2 = split_holdout(SCENES, 0.25, seed=1)
        assert [s.scene_id for s in held] == [s.scene_id for s in held2]

    def test_zero_fraction_keeps_everything(self):
        kept, held = split_holdout(SCENES, 0.0)
        assert held == [] and len(kept) == len(SCENES)

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            split_holdout(SCENES, 1.0)
