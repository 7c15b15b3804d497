"""Acceptance gate: one test per pinned end-to-end criterion, tolerances asserted.

Each test finishes by printing a single measured PASS line (visible under
``pytest -s``); a failed assertion is the corresponding FAIL. Criteria 6 and 7
train real models and together take roughly 25 minutes on one desktop CPU.
"""

from __future__ import annotations

import dataclasses
import json
import time

import numpy as np

from anchorplan.anchors import build_anchor_bank, cluster_anchors
from anchorplan.autodiff import Tensor, gradient_check
from anchorplan.cli import main as cli_main
from anchorplan.closed_loop import anchor_baseline_report, replay_open_loop
from anchorplan.config import CameraConfig, ModelConfig, RasterConfig, WorldConfig
from anchorplan.encoder import FeatureBundle
from anchorplan.geometry import wrap_angle
from anchorplan.metrics import RouteResult, SubScores, aggregate_pdms, closed_loop_scores
from anchorplan.nn import AdamW
from anchorplan.perception import HolisticPerception
from anchorplan.planner import AnchorPlanner
from anchorplan.scenes import generate_corpus
from anchorplan.training import TrainConfig, scene_loss, split_holdout, train, train_step

TINY_WORLD = WorldConfig(
    horizon=4,
    raster=RasterConfig(rows=16, cols=16, cell_m=2.0, x_min=-5.0, y_min=-17.0),
    camera=CameraConfig(width=12, height=8, focal=5.0, cx=5.5, cy=3.0),
)
TINY_SCENES = generate_corpus(0, 24, cfg=TINY_WORLD)


def _passline(criterion: int, detail: str) -> None:
    print(f"\n[criterion {criterion}] PASS — {detail}")


def _shake_heads(planner: AnchorPlanner, rng: np.random.Generator, scale=0.05) -> None:
    """Give the zero-initialized heads nonzero weights so outputs are nontrivial."""
    for mlp in (planner.offset_head, planner.score_head, planner.maln_mlp):
        last = mlp.layers[-1]
        last.w.data[:] = rng.normal(0.0, scale, size=last.w.shape)
        if last.b is not None:
            last.b.data[:] = rng.normal(0.0, scale, size=last.b.shape)


# ===========================================================================
# 1. identity at initialization
# ===========================================================================


class TestCriterion1IdentityAtInit:
    def test_untrained_planner_reproduces_the_anchor_bank(self):
        t0 = time.perf_counter()
        world = WorldConfig()
        scenes = generate_corpus(11, 100)
        bank, _ = build_anchor_bank(scenes, 6, seed=0)
        planner = AnchorPlanner(world, ModelConfig(width=16, heads=2, hidden=16, agent_slots=8))
        uniform = np.full(bank.modes, 1.0 / bank.modes)
        for scene in scenes:
            out = planner.plan(scene, bank)
            assert np.array_equal(out.trajectories, bank.waypoints)
            assert np.array_equal(out.mode_probs, uniform)
            assert out.best_mode == 0
        replayed = replay_open_loop(planner, scenes[:40], bank)
        baseline = anchor_baseline_report(scenes[:40], bank, world)
        assert replayed == baseline
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0
        _passline(1, f"bit-level identity on 100 scenes; replay == anchor baseline "
                     f"on 40 scenes; {elapsed:.1f}s < 10s")


# ===========================================================================
# 2. analytic gradients of the full loss
# ===========================================================================


class TestCriterion2GradientCheck:
    def test_four_term_loss_matches_finite_differences(self):
        t0 = time.perf_counter()
        model = ModelConfig(width=16, heads=2, hidden=16, agent_slots=2, window_bev=1,
                            window_img=2, rel_width=4, fourier_bands=2, activation="gelu")
        bank, _ = build_anchor_bank(TINY_SCENES, 3, seed=0)
        scene = next(s for s in TINY_SCENES if len(s.agents) >= 2)
        planner = AnchorPlanner(TINY_WORLD, model)
        rng = np.random.default_rng(7)
        for name, p in planner.named_parameters():
            if any(key in name for key in ("offset_head", "score_head", "maln")):
                p.data += rng.normal(0.0, 0.05, size=p.shape)
        cfg = TrainConfig()
        report = gradient_check(
            dict(planner.named_parameters()),
            lambda: scene_loss(planner, scene, bank, cfg)[0],
            tol=1e-4, h=1e-4, max_elements=500, seed=0,
        )
        elapsed = time.perf_counter() - t0
        assert report.n_checked >= 500
        assert report.max_rel_err < 1e-4
        assert elapsed < 120.0
        _passline(2, f"max rel err {report.max_rel_err:.2e} < 1e-4 over "
                     f"{report.n_checked} sampled elements; {elapsed:.1f}s < 120s")


# ===========================================================================
# 3. scoring formulas against brute force
# ===========================================================================


class TestCriterion3MetricFormulas:
    def test_pdms_and_route_aggregation_match_direct_formulas(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(10_000):
            s = rng.uniform(0.0, 1.0, size=5)  # nc, dac, ttc, comfort, ep
            w = tuple(rng.uniform(0.1, 10.0, size=3))  # (w_ep, w_ttc, w_comfort)
            got = aggregate_pdms(SubScores(*s), w)
            want = (s[0] * s[1]) * (w[0] * s[4] + w[1] * s[2] + w[2] * s[3]) / sum(w)
            worst = max(worst, abs(got - want))
        assert worst <= 1e-12

        rng = np.random.default_rng(7)
        for _ in range(500):
            s = rng.uniform(0.0, 1.0, size=5)
            s[int(rng.integers(0, 2))] = 0.0  # zero either multiplicative gate
            assert aggregate_pdms(SubScores(*s), tuple(rng.uniform(0.1, 10.0, size=3))) == 0.0

        rng = np.random.default_rng(9)
        for _ in range(1_000):
            s = rng.uniform(0.0, 1.0, size=5)
            w = tuple(rng.uniform(0.1, 10.0, size=3))
            raised = s.copy()
            i = int(rng.integers(0, 5))
            raised[i] = rng.uniform(s[i], 1.0)
            assert aggregate_pdms(SubScores(*raised), w) >= aggregate_pdms(SubScores(*s), w)

        rng = np.random.default_rng(12)
        worst_route = 0.0
        for _ in range(1_000):
            routes = []
            for _ in range(int(rng.integers(1, 20))):
                n_coll, n_off = int(rng.integers(0, 3)), int(rng.integers(0, 3))
                routes.append(RouteResult(
                    completion=float(rng.uniform(0.0, 100.0)),
                    success=bool(rng.integers(0, 2)),
                    penalties=(0.5,) * n_coll + (0.7,) * n_off,
                    n_collisions=n_coll, n_offroad=n_off,
                ))
            ds, sr = closed_loop_scores(routes)
            want_ds = sum(r.completion * 0.5**r.n_collisions * 0.7**r.n_offroad
                          for r in routes) / len(routes)
            want_sr = sum(1.0 for r in routes if r.success) / len(routes)
            worst_route = max(worst_route, abs(ds - want_ds), abs(sr - want_sr))
        assert worst_route <= 1e-12
        _passline(3, f"pdms brute force max |err| {worst:.1e} on 10,000 tuples; zero-gate "
                     f"exact; 1,000 monotone pairs; ds/sr max |err| {worst_route:.1e} "
                     f"on 1,000 route sets (all <= 1e-12)")


# ===========================================================================
# 4. clustering invariants
# ===========================================================================


class TestCriterion4Clustering:
    def test_objective_decreases_and_centroids_are_member_means(self):
        for run in range(50):
            rng = np.random.default_rng(100 + run)
            n = int(rng.integers(6, 40))
            m = int(rng.integers(2, min(n, 8)))
            horizon = int(rng.integers(2, 9))
            trajs = rng.normal(0.0, 5.0, size=(n, horizon, 3))
            anchors, history = cluster_anchors(trajs, m, seed=run)
            assert anchors.shape == (m, horizon, 3)
            assert all(later <= earlier + 1e-12 for earlier, later in zip(history, history[1:]))
            # reconstruct the converged assignment in flattened (x, y) space
            flat = trajs[:, :, :2].reshape(n, -1)
            cent = anchors[:, :, :2].reshape(m, -1)
            assign = ((flat[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
            for j in range(m):
                members = trajs[assign == j]
                if not len(members):
                    continue
                np.testing.assert_allclose(
                    cent[j], members[:, :, :2].reshape(len(members), -1).mean(axis=0),
                    atol=1e-9, rtol=0.0)
                for t in range(horizon):
                    angles = members[:, t, 2]
                    want = np.arctan2(np.sin(angles).mean(), np.cos(angles).mean())
                    assert abs(wrap_angle(anchors[j, t, 2] - want)) <= 1e-9

        # degenerate geometries are bit-exact with objective exactly zero
        for run in range(20):
            rng = np.random.default_rng(700 + run)
            pts = rng.normal(size=(int(rng.integers(2, 9)), 3, 3))
            anchors, history = cluster_anchors(pts, len(pts), seed=run)
            assert history[-1] == 0.0
            assert sorted(map(tuple, anchors.reshape(len(pts), -1))) == \
                sorted(map(tuple, pts.reshape(len(pts), -1)))
            one = rng.normal(size=(1, 4, 3))
            same = np.tile(one, (int(rng.integers(2, 12)), 1, 1))
            anchors, history = cluster_anchors(same, 1, seed=run)
            assert history[-1] == 0.0
            assert np.array_equal(anchors, one)
        _passline(4, "objective non-increasing and centroid == member mean (±1e-9) on 50 "
                     "runs; M=N and all-identical corpora bit-exact at objective 0")


# ===========================================================================
# 5. attention and perception structure
# ===========================================================================


def _random_model(rng: np.random.Generator, seed: int) -> ModelConfig:
    heads = int(rng.choice([1, 2, 4]))
    return ModelConfig(
        width=heads * int(rng.choice([4, 8])), heads=heads,
        hidden=int(rng.choice([8, 16])), agent_slots=int(rng.integers(1, 4)),
        window_bev=int(rng.integers(0, 3)), window_img=int(rng.integers(0, 4)),
        rel_width=int(rng.choice([2, 4])), fourier_bands=int(rng.integers(1, 4)),
        seed=seed,
    )


def _random_bundle(rng: np.random.Generator, world: WorldConfig, width: int, n_agents: int) -> FeatureBundle:
    def t(shape):
        return Tensor(rng.normal(size=shape))

    return FeatureBundle(
        f_img=t((world.camera.height * world.camera.width, width)),
        f_bev=t((world.raster.rows * world.raster.cols, width)),
        f_agent=t((n_agents, width)),
        seg_logits=t((world.raster.rows * world.raster.cols, 3)),
        boxes=t((n_agents, 5)),
        objectness_logits=t((n_agents,)),
    )


class TestCriterion5Structure:
    def test_permutation_locality_and_translation_properties(self):
        for k in range(100):
            rng = np.random.default_rng(200 + k)
            model = dataclasses.replace(
                _random_model(rng, seed=300 + k),
                decode_mode=str(rng.choice(["ar", "nar"])),
                chain_refined=bool(rng.integers(0, 2)),
            )
            planner = AnchorPlanner(TINY_WORLD, model)
            _shake_heads(planner, np.random.default_rng(k))
            scene = TINY_SCENES[k % len(TINY_SCENES)]
            modes = int(rng.integers(2, 6))
            bank, _ = build_anchor_bank(TINY_SCENES, modes, seed=k)
            perm = rng.permutation(modes)
            base = planner.plan(scene, bank)
            out = planner.plan(scene, dataclasses.replace(bank, waypoints=bank.waypoints[perm]))
            np.testing.assert_array_equal(out.trajectories, base.trajectories[perm])
            np.testing.assert_array_equal(out.scores, base.scores[perm])
            np.testing.assert_allclose(out.mode_probs, base.mode_probs[perm], atol=1e-12)

        for k in range(100):
            rng = np.random.default_rng(400 + k)
            model = _random_model(rng, seed=500 + k)
            hp = HolisticPerception(TINY_WORLD, model, np.random.default_rng(k))
            bundle = _random_bundle(rng, TINY_WORLD, model.width, int(rng.integers(1, 5)))
            points = rng.uniform([-4, -16, -1], [26, 14, 1], size=(int(rng.integers(1, 5)), 3))
            qs = [Tensor(rng.normal(size=(1, model.width))) for _ in points]
            base = hp.step(qs, points, points, bundle)
            # editing a BEV cell outside every window must not change any mode
            inside = set(hp.window_indices(points, "bev"))
            outside = next(i for i in range(TINY_WORLD.raster.rows * TINY_WORLD.raster.cols)
                           if i not in inside)
            edited = bundle.f_bev.data.copy()
            edited[outside] += 10.0
            out = hp.step(qs, points, points, dataclasses.replace(bundle, f_bev=Tensor(edited)))
            for u, v in zip(out, base):
                np.testing.assert_array_equal(u.data, v.data)

        for k in range(100):
            rng = np.random.default_rng(600 + k)
            model = _random_model(rng, seed=700 + k)
            hp = HolisticPerception(TINY_WORLD, model, np.random.default_rng(k))
            n_agents = int(rng.integers(2, 6))
            f_agent = rng.normal(size=(n_agents, model.width))
            boxes = rng.normal(size=(n_agents, 5))
            points = rng.normal(size=(int(rng.integers(1, 4)), 3))
            qs = [Tensor(rng.normal(size=(1, model.width))) for _ in points]
            base = hp.attend_agents(qs, points, Tensor(f_agent), Tensor(boxes))
            perm = rng.permutation(n_agents)
            out = hp.attend_agents(qs, points, Tensor(f_agent[perm]), Tensor(boxes[perm]))
            for u, v in zip(out, base):
                np.testing.assert_allclose(u.data, v.data, atol=1e-9)

        for k in range(100):
            rng = np.random.default_rng(800 + k)
            model = _random_model(rng, seed=900 + k)
            hp = HolisticPerception(TINY_WORLD, model, np.random.default_rng(k))
            point = rng.normal(size=3)
            boxes = rng.normal(size=(int(rng.integers(1, 6)), 5))
            base = hp.relative_distance_features(point, Tensor(boxes))
            shift = rng.uniform(-200.0, 200.0, size=2)
            moved = boxes.copy()
            moved[:, :2] += shift
            out = hp.relative_distance_features(
                np.array([point[0] + shift[0], point[1] + shift[1], point[2]]), Tensor(moved))
            np.testing.assert_allclose(out.data, base.data, atol=1e-9)
        _passline(5, "mode permutation bit-exact, out-of-window edits inert, agent "
                     "permutation and joint translation invariant (±1e-9) — 100 "
                     "random configurations each")


# ===========================================================================
# 6. training beats the anchor baseline
# ===========================================================================


class TestCriterion6Learning:
    def test_holdout_improvement_and_single_scene_overfit(self):
        t0 = time.perf_counter()
        world = WorldConfig()
        scenes = generate_corpus(0, 500)
        train_scenes, holdout = split_holdout(scenes, 0.1, seed=0)
        bank, _ = build_anchor_bank(train_scenes, 6, seed=0)
        model = ModelConfig(width=32, heads=4, hidden=32, agent_slots=8)

        planner = AnchorPlanner(world, model)
        train(planner, train_scenes, bank, TrainConfig(epochs=20, lr=5e-3, batch_size=8, seed=0))
        trained = replay_open_loop(planner, holdout, bank)
        baseline = anchor_baseline_report(holdout, bank, world)
        improvement = 1.0 - trained["avg_l2"] / baseline["avg_l2"]
        assert improvement >= 0.25
        assert trained["pdms"] > baseline["pdms"]

        fresh = AnchorPlanner(world, model)
        opt = AdamW(fresh, lr=6e-3, weight_decay=0.0)
        cfg = TrainConfig(lr=6e-3, weight_decay=0.0, seed=0)
        first = last = None
        for _ in range(200):
            last = train_step(fresh, [train_scenes[0]], bank, opt, cfg)
            first = first or last
        drop = 1.0 - last.l_reg / first.l_reg
        assert drop >= 0.90
        elapsed = time.perf_counter() - t0
        assert elapsed < 1800.0
        _passline(6, f"held-out avg L2 {baseline['avg_l2']:.3f} -> {trained['avg_l2']:.3f} "
                     f"({improvement:.1%} >= 25%), pdms {baseline['pdms']:.3f} -> "
                     f"{trained['pdms']:.3f}; single-scene l_reg drop {drop:.1%} >= 90% "
                     f"in 200 steps; {elapsed / 60:.1f}min < 30min")


# ===========================================================================
# 7. stepwise vs one-shot decoding under equal budgets
# ===========================================================================


class TestCriterion7DecodeModes:
    def test_paired_report_under_identical_budgets(self):
        world = WorldConfig()
        scenes = generate_corpus(1, 120)
        train_scenes, holdout = split_holdout(scenes, 0.15, seed=1)
        bank, _ = build_anchor_bank(train_scenes, 6, seed=1)
        reports = {}
        for mode in ("ar", "nar"):
            planner = AnchorPlanner(
                world, ModelConfig(width=32, heads=4, hidden=32, agent_slots=8, decode_mode=mode))
            train(planner, train_scenes, bank, TrainConfig(epochs=6, lr=5e-3, batch_size=8, seed=0))
            reports[mode] = replay_open_loop(planner, holdout, bank)
        for rep in reports.values():
            assert 0.0 <= rep["pdms"] <= 1.0
            assert np.isfinite(rep["avg_l2"])
        favored = max(reports, key=lambda m: reports[m]["pdms"])
        _passline(7, f"ar pdms {reports['ar']['pdms']:.3f} avg_l2 {reports['ar']['avg_l2']:.3f} "
                     f"| nar pdms {reports['nar']['pdms']:.3f} avg_l2 "
                     f"{reports['nar']['avg_l2']:.3f} | pdms favors {favored} "
                     f"(reported, not asserted)")


# ===========================================================================
# 8. end-to-end determinism
# ===========================================================================


CLI_CONFIG = {
    "world": {"horizon": 4,
              "raster": {"rows": 16, "cols": 16, "cell_m": 2.0, "x_min": -5.0, "y_min": -17.0},
              "camera": {"width": 12, "height": 8, "focal": 5.0, "cx": 5.5, "cy": 3.0}},
    "model": {"width": 16, "heads": 2, "hidden": 16, "agent_slots": 2,
              "window_bev": 1, "window_img": 2, "rel_width": 4, "fourier_bands": 2},
    "train": {"epochs": 1, "batch_size": 4, "lr": 0.005},
    "score": {"horizons": [0.5, 1.0, 2.0]},
    "run": {"max_steps": 8},
}


class TestCriterion8Determinism:
    def test_two_full_pipeline_runs_are_bit_identical(self, tmp_path):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(CLI_CONFIG))
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            base = ["--config", str(cfg)]
            assert cli_main(["generate", *base, "--seed", "5", "--count", "10",
                             "--out", str(d / "corpus.jsonl")]) == 0
            assert cli_main(["cluster", *base, "--corpus", str(d / "corpus.jsonl"),
                             "--modes", "3", "--out", str(d / "anchors.json")]) == 0
            assert cli_main(["train", *base, "--seed", "1",
                             "--corpus", str(d / "corpus.jsonl"),
                             "--anchors", str(d / "anchors.json"),
                             "--out", str(d / "ckpt.json")]) == 0
            assert cli_main(["plan", *base, "--corpus", str(d / "corpus.jsonl"),
                             "--anchors", str(d / "anchors.json"),
                             "--ckpt", str(d / "ckpt.json"),
                             "--out", str(d / "plans.jsonl")]) == 0
            assert cli_main(["score", *base, "--plans", str(d / "plans.jsonl"),
                             "--corpus", str(d / "corpus.jsonl"),
                             "--out", str(d / "report.json")]) == 0
            assert cli_main(["simulate", *base, "--seed", "2",
                             "--corpus", str(d / "corpus.jsonl"),
                             "--anchors", str(d / "anchors.json"),
                             "--ckpt", str(d / "ckpt.json"),
                             "--out", str(d / "sim.json")]) == 0
        artifacts = ["corpus.jsonl", "anchors.json", "ckpt.json",
                     "plans.jsonl", "report.json", "sim.json"]
        for name in artifacts:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        _passline(8, f"two pipeline runs bit-identical across {len(artifacts)} artifacts "
                     f"(corpus, anchors, checkpoint, plans, report, simulation)")
