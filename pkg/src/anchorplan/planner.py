"""Anchored trajectory decoding: stepwise targeted perception with offset refinement."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorBank
from .autodiff import Tensor, concat, no_grad
from .config import ModelConfig, WorldConfig, config_from_dict, config_to_dict
from .encoder import POSE_SCALE, FeatureBundle, SceneEncoder, fourier_features
from .nn import LayerNorm, Mlp, Module, read_checkpoint_file, save_checkpoint
from .perception import HolisticPerception, guiding_points_at
from .scenes import Scene

PLAN_SCHEMA = "anchorplan.plan/1"

__all__ = [
    "AnchorPlanner",
    "PLAN_SCHEMA",
    "PlanGraph",
    "PlanOutput",
    "plan_from_dict",
    "plan_to_dict",
    "planner_from_checkpoint",
    "save_planner",
]


@dataclass
class PlanOutput:
    """Refined trajectories with per-mode scores, as plain arrays."""

    trajectories: np.ndarray  # [M, T, 3]
    scores: np.ndarray  # [M]
    mode_probs: np.ndarray  # [M]

    @property
    def best_mode(self) -> int:
        return int(np.argmax(self.mode_probs))

    @property
    def best_trajectory(self) -> np.ndarray:
        return self.trajectories[self.best_mode]


@dataclass
class PlanGraph:
    """Differentiable planning outputs: per-mode trajectory tensors plus scores."""

    trajectories: list[Tensor]  # M tensors of shape [T, 3]
    scores: Tensor  # [M]

    def output(self) -> PlanOutput:
        traj = np.stack([t.data for t in self.trajectories])
        scores = self.scores.data.copy()
        shifted = np.exp(scores - scores.max())
        return PlanOutput(traj, scores, shifted / shifted.sum())


class AnchorPlanner(Module):
    """End-to-end planner over anchored trajectory priors.

    Scene encoding feeds a per-step loop: motion-aware normalization carries
    each mode's query to the next guiding point, targeted perception attends
    around that point, and a zero-initialized head decodes a waypoint offset,
    so the untrained planner reproduces the anchors exactly. A one-shot
    decode mode replaces the loop with a single pass over unioned windows.
    Every mode runs as its own [1, C] row, keeping mode permutation exact.
    """

    def __init__(
        self, world: WorldConfig, model: ModelConfig, rng: np.random.Generator | None = None
    ):
        super().__init__()
        if model.decode_mode not in ("ar", "nar"):
            raise ValueError(f"decode_mode must be 'ar' or 'nar', got {model.decode_mode!r}")
        if rng is None:
            rng = np.random.default_rng(model.seed)
        c, hidden, t_steps = model.width, model.hidden, world.horizon
        self.world = world
        self.model = model
        self.encoder = SceneEncoder(world, model, rng)
        self.perception = HolisticPerception(world, model, rng)
        self.query_init = Mlp(3 * t_steps, [hidden], c, rng, activation=model.activation)
        self.query_norm = LayerNorm(c)
        fdim = 3 * 2 * model.fourier_bands
        self.maln_mlp = Mlp(fdim, [hidden], 2 * c, rng, activation=model.activation, zero_last=True)
        offset_dim = 3 if model.decode_mode == "ar" else 3 * t_steps
        self.offset_head = Mlp(
            c, [hidden], offset_dim, rng, activation=model.activation, zero_last=True
        )
        # No final bias: a shared score offset cancels in the mode softmax.
        self.score_head = Mlp(
            c, [hidden], 1, rng, activation=model.activation, zero_last=True, last_bias=False
        )

    # -- building blocks ----------------------------------------------------

    def init_queries(self, bank: AnchorBank) -> list[Tensor]:
        """One [1, C] query per mode from its flattened anchor waypoints."""
        return [
            self.query_norm(self.query_init(Tensor(bank.waypoints[m].reshape(1, -1))))
            for m in range(bank.modes)
        ]

    def maln_step(self, qm: Tensor, point: np.ndarray) -> Tensor:
        """Layer norm whose affine is predicted from the next guiding point.

        The conditioning MLP's last layer starts at zero, so gamma = 1 and
        beta = 0 at init and this is exactly a plain unit-affine layer norm.
        """
        pose = np.asarray(point, dtype=np.float64)[:3] / POSE_SCALE
        modulation = self.maln_mlp(Tensor(fourier_features(pose[None, :], self.model.fourier_bands)))
        c = self.model.width
        gamma = modulation[:, :c] + 1.0
        beta = modulation[:, c:]
        return qm.normalize_rows() * gamma + beta

    # -- decoding -----------------------------------------------------------

    def decode(self, bundle: FeatureBundle, bank: AnchorBank) -> PlanGraph:
        if bank.horizon != self.world.horizon:
            raise ValueError(
                f"anchor horizon {bank.horizon} does not match world horizon {self.world.horizon}"
            )
        if self.model.decode_mode == "ar":
            return self._decode_autoregressive(bundle, bank)
        return self._decode_one_shot(bundle, bank)

    def _decode_autoregressive(self, bundle: FeatureBundle, bank: AnchorBank) -> PlanGraph:
        anchors = bank.waypoints
        n_modes, t_steps = anchors.shape[0], anchors.shape[1]
        q = self.init_queries(bank)
        rows: list[list[Tensor]] = [[] for _ in range(n_modes)]
        prev_delta = np.zeros((n_modes, 3))
        for t in range(t_steps):
            points = guiding_points_at(anchors, t).copy()
            if self.model.chain_refined:
                points += prev_delta
            if t > 0:
                q = [self.maln_step(q[m], points[m]) for m in range(n_modes)]
            q = self.perception.step(q, points, points, bundle)
            for m in range(n_modes):
                delta = self.offset_head(q[m])
                rows[m].append(delta + points[m][None, :])
                if self.model.chain_refined:
                    prev_delta[m] = delta.data[0]
        trajectories = [concat(rows[m], axis=0) for m in range(n_modes)]
        scores = concat([self.score_head(q[m]).reshape(1) for m in range(n_modes)], axis=0)
        return PlanGraph(trajectories, scores)

    def _decode_one_shot(self, bundle: FeatureBundle, bank: AnchorBank) -> PlanGraph:
        anchors = bank.waypoints
        n_modes, t_steps = anchors.shape[0], anchors.shape[1]
        q = self.init_queries(bank)
        q = self.perception.step(q, anchors, guiding_points_at(anchors, 0), bundle)
        trajectories = [
            self.offset_head(q[m]).reshape(t_steps, 3) + anchors[m] for m in range(n_modes)
        ]
        scores = concat([self.score_head(q[m]).reshape(1) for m in range(n_modes)], axis=0)
        return PlanGraph(trajectories, scores)

    # -- entry points -------------------------------------------------------

    def forward(self, scene: Scene, bank: AnchorBank) -> tuple[FeatureBundle, PlanGraph]:
        bundle = self.encoder.encode_scene(scene)
        return bundle, self.decode(bundle, bank)

    def plan(self, scene: Scene, bank: AnchorBank) -> PlanOutput:
        with no_grad():
            _, graph = self.forward(scene, bank)
        return graph.output()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def plan_to_dict(plan: PlanOutput, scene_id: str = "") -> dict:
    """Encode a plan as a versioned, JSON-ready record keyed by scene id."""
    return {
        "schema_version": PLAN_SCHEMA,
        "scene_id": scene_id,
        "trajectories": plan.trajectories.tolist(),
        "scores": plan.scores.tolist(),
        "mode_probs": plan.mode_probs.tolist(),
        "best_mode": plan.best_mode,
    }


def plan_from_dict(d: dict) -> tuple[PlanOutput, str]:
    """Decode a plan record; returns the plan and its scene id."""
    if d.get("schema_version") != PLAN_SCHEMA:
        raise ValueError(f"not an {PLAN_SCHEMA} record: {d.get('schema_version')!r}")
    plan = PlanOutput(
        trajectories=np.asarray(d["trajectories"], dtype=np.float64),
        scores=np.asarray(d["scores"], dtype=np.float64),
        mode_probs=np.asarray(d["mode_probs"], dtype=np.float64),
    )
    if plan.trajectories.ndim != 3 or plan.trajectories.shape[2] != 3:
        raise ValueError("plan trajectories must have shape [M, T, 3]")
    return plan, d.get("scene_id", "")


def save_planner(path: str | Path, planner: AnchorPlanner) -> None:
    """Write parameters plus the world/model configs needed to rebuild."""
    config = {
        "world": config_to_dict(planner.world),
        "model": config_to_dict(planner.model),
    }
    save_checkpoint(path, planner, config)


def planner_from_checkpoint(path: str | Path) -> AnchorPlanner:
    """Rebuild a planner from a checkpoint written by save_planner."""
    params, config = read_checkpoint_file(path)
    if "world" not in config or "model" not in config:
        raise ValueError("checkpoint lacks the world/model configs")
    world = config_from_dict(WorldConfig, config["world"])
    model = config_from_dict(ModelConfig, config["model"])
    planner = AnchorPlanner(world, model)
    planner.load_state_dict(params)
    return planner
