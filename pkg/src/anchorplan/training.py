"""Planning loss and training loop: target assignment, four-term objective, AdamW."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorBank, assign_nearest_anchor
from .autodiff import NumericError, Tensor, bce_with_logits
from .config import WorldConfig
from .encoder import FeatureBundle, match_boxes_to_slots
from .nn import AdamW, focal_loss, l1_loss, softmax_cross_entropy
from .planner import AnchorPlanner, PlanGraph
from .scenes import Scene, bev_class_map, rasterize_scene

__all__ = [
    "LossBreakdown",
    "TrainConfig",
    "assign_planning_targets",
    "total_loss",
    "train_step",
    "train",
    "split_holdout",
]


# ---------------------------------------------------------------------------
# configuration and reporting types
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization settings; loss weights default to the all-tens mixture."""

    lambdas: tuple[float, float, float, float] = (10.0, 10.0, 10.0, 10.0)
    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    assign_by: str = "anchor"  # winner mode from the fixed priors, or "prediction"

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ValueError("lambdas must be four non-negative weights")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.assign_by not in ("anchor", "prediction"):
            raise ValueError(f"assign_by must be 'anchor' or 'prediction', got {self.assign_by!r}")


@dataclass
class LossBreakdown:
    """The four raw loss terms plus their weighted total."""

    l_bev: float
    l_agent: float
    l_reg: float
    l_cls: float
    total: float
    lambdas: tuple[float, float, float, float] = (10.0, 10.0, 10.0, 10.0)

    def as_row(self, step: int) -> list:
        return [step, self.l_bev, self.l_agent, self.l_reg, self.l_cls, self.total]


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------


def assign_planning_targets(bank: AnchorBank, gt: np.ndarray) -> tuple[int, np.ndarray]:
    """Winner mode (nearest anchor, ties to lowest index) and its regression target."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != (bank.horizon, 3):
        raise ValueError(f"expected gt of shape {(bank.horizon, 3)}, got {gt.shape}")
    return assign_nearest_anchor(gt, bank), gt


def _prediction_winner(graph: PlanGraph, gt: np.ndarray) -> int:
    d2 = [
        float(((t.data[:, :2] - gt[:, :2]) ** 2).sum()) for t in graph.trajectories
    ]
    return int(np.argmin(d2))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _check_finite(term: Tensor, name: str) -> Tensor:
    if not np.isfinite(term.data).all():
        raise NumericError(f"loss term {name} is non-finite")
    return term


def total_loss(
    bundle: FeatureBundle,
    graph: PlanGraph,
    scene: Scene,
    bank: AnchorBank,
    cfg: TrainConfig,
    world: WorldConfig,
    reference_points: np.ndarray,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of BEV segmentation, agent detection, winner regression, and mode focal terms."""
    labels = bev_class_map(rasterize_scene(scene, world.raster)).reshape(-1)
    l_bev = _check_finite(softmax_cross_entropy(bundle.seg_logits, labels).mean(), "l_bev")

    centers = np.array([[a.x, a.y] for a in scene.agents], dtype=np.float64).reshape(-1, 2)
    matches = match_boxes_to_slots(centers, reference_points)
    obj_targets = np.zeros(bundle.objectness_logits.shape[0])
    for slot, _ in matches:
        obj_targets[slot] = 1.0
    l_agent = bce_with_logits(bundle.objectness_logits, obj_targets).mean()
    if matches:
        slots = np.array([s for s, _ in matches], dtype=np.intp)
        gt_boxes = np.array(
            [[a.x, a.y, a.heading, a.length, a.width] for a in (scene.agents[g] for _, g in matches)]
        )
        l_agent = l_agent + l1_loss(bundle.boxes[slots], gt_boxes)
    l_agent = _check_finite(l_agent, "l_agent")

    if cfg.assign_by == "prediction":
        winner = _prediction_winner(graph, np.asarray(scene.gt, dtype=np.float64))
        gt = np.asarray(scene.gt, dtype=np.float64)
    else:
        winner, gt = assign_planning_targets(bank, scene.gt)
    l_reg = _check_finite(l1_loss(graph.trajectories[winner], gt), "l_reg")
    l_cls = _check_finite(
        focal_loss(graph.scores, winner, gamma=cfg.focal_gamma, alpha=cfg.focal_alpha), "l_cls"
    )

    w1, w2, w3, w4 = cfg.lambdas
    total = l_bev * w1 + l_agent * w2 + l_reg * w3 + l_cls * w4
    breakdown = LossBreakdown(
        l_bev=float(l_bev.data),
        l_agent=float(l_agent.data),
        l_reg=float(l_reg.data),
        l_cls=float(l_cls.data),
        total=float(total.data),
        lambdas=cfg.lambdas,
    )
    return total, breakdown


def scene_loss(
    planner: AnchorPlanner, scene: Scene, bank: AnchorBank, cfg: TrainConfig
) -> tuple[Tensor, LossBreakdown]:
    """Full forward pass of one scene followed by the four-term loss."""
    bundle, graph = planner.forward(scene, bank)
    return total_loss(
        bundle, graph, scene, bank, cfg, planner.world, planner.encoder.reference_points
    )


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def train_step(
    planner: AnchorPlanner,
    batch: list[Scene],
    bank: AnchorBank,
    optimizer: AdamW,
    cfg: TrainConfig,
) -> LossBreakdown:
    """One AdamW update on the batch-mean loss; returns the mean breakdown."""
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    optimizer.zero_grad()
    totals = []
    sums = np.zeros(5)
    for scene in batch:
        total, bd = scene_loss(planner, scene, bank, cfg)
        totals.append(total)
        sums += (bd.l_bev, bd.l_agent, bd.l_reg, bd.l_cls, bd.total)
    mean_total = totals[0] if len(totals) == 1 else sum(totals[1:], totals[0])
    mean_total = mean_total * (1.0 / len(batch))
    mean_total.backward()
    for name, p in optimizer.params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    optimizer.step()
    sums /= len(batch)
    return LossBreakdown(*(float(v) for v in sums), lambdas=cfg.lambdas)


def train(
    planner: AnchorPlanner,
    scenes: list[Scene],
    bank: AnchorBank,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> list[LossBreakdown]:
    """Epoch loop with a seeded shuffle; optionally logs one CSV row per step."""
    if not scenes:
        raise ValueError("train needs at least one scene")
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamW(planner, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[LossBreakdown] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        for start in range(0, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in order[start : start + cfg.batch_size]]
            history.append(train_step(planner, batch, bank, optimizer, cfg))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_bev", "l_agent", "l_reg", "l_cls", "total"])
            for step, bd in enumerate(history, start=1):
                writer.writerow(bd.as_row(step))
    return history


def split_holdout(
    scenes: list[Scene], fraction: float, seed: int = 0
) -> tuple[list[Scene], list[Scene]]:
    """Deterministic train/held-out split; the held-out set gets ceil(fraction * n) scenes."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    n_hold = int(np.ceil(fraction * len(scenes)))
    order = np.random.default_rng(seed).permutation(len(scenes))
    held = sorted(order[:n_hold].tolist())
    kept = sorted(order[n_hold:].tolist())
    return [scenes[i] for i in kept], [scenes[i] for i in held]
