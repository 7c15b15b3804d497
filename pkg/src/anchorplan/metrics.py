"""Driving scores: PDM subscores and aggregation, open-loop L2/collision, route DS/SR."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import WorldConfig
from .geometry import box_corners, boxes_overlap, points_in_any_polygon, trajectory_progress, wrap_angle
from .jsonio import read_json, write_json
from .scenes import Scene

__all__ = [
    "REPORT_SCHEMA",
    "ScoreConfig",
    "SubScores",
    "MetricReport",
    "OpenLoopMetrics",
    "RouteResult",
    "compute_subscores",
    "aggregate_pdms",
    "open_loop_metrics",
    "score_scene",
    "closed_loop_scores",
    "summarize_reports",
    "write_report",
    "read_report",
    "report_csv_rows",
]

REPORT_SCHEMA = "anchorplan.report/1"


# ---------------------------------------------------------------------------
# configuration and result types
# ---------------------------------------------------------------------------


@dataclass
class ScoreConfig:
    """Thresholds and weights for all scoring formulas."""

    ttc_tau: float = 1.0  # seconds both ego and agents are projected forward
    max_long_accel: float = 4.0  # m/s^2 comfort bound
    max_yaw_rate: float = 1.0  # rad/s comfort bound
    pdms_weights: tuple[float, float, float] = (5.0, 5.0, 2.0)  # (ep, ttc, comfort)
    horizons: tuple[float, ...] = (1.0, 2.0, 3.0)  # seconds for open-loop L2
    collision_penalty: float = 0.5  # per collision event in closed-loop DS
    offroad_penalty: float = 0.7  # per off-drivable episode in closed-loop DS


@dataclass
class SubScores:
    """The five per-scene subscores, each in [0, 1]."""

    nc: float
    dac: float
    ttc: float
    comfort: float
    ep: float

    def __post_init__(self):
        for name in ("nc", "dac", "ttc", "comfort", "ep"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"subscore {name}={v} outside [0, 1]")
            setattr(self, name, v)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("nc", "dac", "ttc", "comfort", "ep")}


@dataclass
class OpenLoopMetrics:
    """Per-horizon displacement errors and cumulative collision flags."""

    l2: dict[float, float]
    collision: dict[float, float]

    @property
    def avg_l2(self) -> float:
        return float(np.mean(list(self.l2.values())))

    @property
    def any_collision(self) -> float:
        return max(self.collision.values()) if self.collision else 0.0


@dataclass
class MetricReport:
    """One scene's scores; ds/sr are filled only for closed-loop route sets."""

    subscores: SubScores
    pdms: float
    l2: dict[float, float]
    collision_rate: float
    ds: float | None = None
    sr: float | None = None
    weights: tuple[float, float, float] = (5.0, 5.0, 2.0)

    def recomputed_pdms(self) -> float:
        return aggregate_pdms(self.subscores, self.weights)


@dataclass
class RouteResult:
    """Outcome of one closed-loop route."""

    completion: float  # percent in [0, 100]
    success: bool
    penalties: tuple[float, ...] = ()
    n_collisions: int = 0
    n_offroad: int = 0

    def __post_init__(self):
        if not 0.0 <= self.completion <= 100.0:
            raise ValueError(f"completion {self.completion} outside [0, 100]")
        if any(not 0.0 < p <= 1.0 for p in self.penalties):
            raise ValueError("penalty factors must lie in (0, 1]")

    @property
    def driving_score(self) -> float:
        return self.completion * float(np.prod(self.penalties)) if self.penalties else self.completion


# ---------------------------------------------------------------------------
# subscores
# ---------------------------------------------------------------------------


def _ego_box(point: np.ndarray, world: WorldConfig) -> tuple:
    return (float(point[0]), float(point[1]), float(point[2]), world.ego_length, world.ego_width)


def compute_subscores(
    planned: np.ndarray,
    scene: Scene,
    world: WorldConfig,
    cfg: ScoreConfig | None = None,
    start_xy: tuple[float, float] = (0.0, 0.0),
) -> SubScores:
    """Binary NC/DAC/TTC/Comfort plus the clamped progress ratio EP.

    Agents roll out at constant velocity with frozen headings; the ego follows
    the planned waypoints, one per dt starting at time dt from `start_xy`.
    """
    cfg = cfg or ScoreConfig()
    planned = np.asarray(planned, dtype=np.float64)
    if planned.ndim != 2 or planned.shape[1] != 3:
        raise ValueError("expected a [T, 3] planned trajectory")
    if not np.isfinite(planned).all():
        raise NumericError("planned trajectory contains non-finite values")
    dt = scene.dt
    t_steps = planned.shape[0]
    start = np.asarray(start_xy, dtype=np.float64)

    nc = 1.0
    dac = 1.0
    ttc = 1.0
    comfort = 1.0
    prev_xy = start.copy()
    prev_speed = scene.ego.speed
    prev_heading = 0.0
    for k in range(t_steps):
        t_k = (k + 1) * dt
        ego = _ego_box(planned[k], world)
        corners = box_corners(*ego)
        vel = (planned[k, :2] - prev_xy) / dt

        if nc and any(boxes_overlap(ego, a.box_at(t_k)) for a in scene.agents):
            nc = 0.0
        if dac and not points_in_any_polygon(corners, scene.drivable).all():
            dac = 0.0
        if ttc:
            ego_proj = (
                ego[0] + vel[0] * cfg.ttc_tau, ego[1] + vel[1] * cfg.ttc_tau,
                ego[2], ego[3], ego[4],
            )
            if any(boxes_overlap(ego_proj, a.box_at(t_k + cfg.ttc_tau)) for a in scene.agents):
                ttc = 0.0
        speed = float(np.hypot(*vel))
        accel = (speed - prev_speed) / dt
        yaw_rate = float(wrap_angle(planned[k, 2] - prev_heading)) / dt
        if abs(accel) > cfg.max_long_accel or abs(yaw_rate) > cfg.max_yaw_rate:
            comfort = 0.0

        prev_xy = planned[k, :2]
        prev_speed = speed
        prev_heading = planned[k, 2]

    gt_progress = trajectory_progress(np.asarray(scene.gt, dtype=np.float64)[:, :2] - start)
    plan_progress = trajectory_progress(planned[:, :2] - start)
    ep = 1.0 if gt_progress < 1e-6 else float(np.clip(plan_progress / gt_progress, 0.0, 1.0))
    return SubScores(nc=nc, dac=dac, ttc=ttc, comfort=comfort, ep=ep)


def aggregate_pdms(s: SubScores, weights: tuple[float, float, float] = (5.0, 5.0, 2.0)) -> float:
    """Multiplicative NC/DAC penalty times the weighted mean of EP, TTC, Comfort."""
    w_ep, w_ttc, w_c = (float(w) for w in weights)
    if w_ep < 0 or w_ttc < 0 or w_c < 0:
        raise ValueError("pdms weights must be non-negative")
    denom = w_ep + w_ttc + w_c
    if denom == 0.0:
        raise ValueError("pdms weights must not all be zero")
    return (s.nc * s.dac) * (w_ep * s.ep + w_ttc * s.ttc + w_c * s.comfort) / denom


# ---------------------------------------------------------------------------
# open-loop metrics
# ---------------------------------------------------------------------------


def open_loop_metrics(
    planned: np.ndarray,
    gt: np.ndarray,
    scene: Scene,
    world: WorldConfig,
    cfg: ScoreConfig | None = None,
) -> OpenLoopMetrics:
    """L2 displacement at each horizon plus cumulative ego/agent collision flags."""
    cfg = cfg or ScoreConfig()
    planned = np.asarray(planned, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if planned.shape != gt.shape:
        raise ValueError("planned and gt trajectories must share a shape")
    dt = scene.dt
    t_steps = planned.shape[0]

    collided_upto = np.zeros(t_steps)
    hit = 0.0
    for k in range(t_steps):
        t_k = (k + 1) * dt
        if not hit and any(
            boxes_overlap(_ego_box(planned[k], world), a.box_at(t_k)) for a in scene.agents
        ):
            hit = 1.0
        collided_upto[k] = hit

    l2: dict[float, float] = {}
    collision: dict[float, float] = {}
    for h in cfg.horizons:
        k = int(round(h / dt)) - 1
        if not 0 <= k < t_steps:
            raise ValueError(f"horizon {h}s is outside the {t_steps * dt}s trajectory")
        l2[h] = float(np.linalg.norm(planned[k, :2] - gt[k, :2]))
        collision[h] = float(collided_upto[k])
    return OpenLoopMetrics(l2=l2, collision=collision)


def score_scene(
    planned: np.ndarray,
    scene: Scene,
    world: WorldConfig,
    cfg: ScoreConfig | None = None,
) -> MetricReport:
    """Full per-scene report for one planned trajectory against the scene's record."""
    cfg = cfg or ScoreConfig()
    subs = compute_subscores(planned, scene, world, cfg)
    ol = open_loop_metrics(planned, scene.gt, scene, world, cfg)
    return MetricReport(
        subscores=subs,
        pdms=aggregate_pdms(subs, cfg.pdms_weights),
        l2=ol.l2,
        collision_rate=ol.any_collision,
        weights=cfg.pdms_weights,
    )


# ---------------------------------------------------------------------------
# closed-loop aggregation
# ---------------------------------------------------------------------------


def closed_loop_scores(routes: list[RouteResult]) -> tuple[float, float]:
    """(driving score, success rate) over a route set."""
    if not routes:
        raise ValueError("closed_loop_scores needs at least one route")
    ds = float(np.mean([r.driving_score for r in routes]))
    sr = float(np.mean([1.0 if r.success else 0.0 for r in routes]))
    return ds, sr


# ---------------------------------------------------------------------------
# report aggregation and serialization
# ---------------------------------------------------------------------------


def summarize_reports(
    reports: list[MetricReport], ds: float | None = None, sr: float | None = None
) -> dict:
    """Mean scores over per-scene reports as a versioned, JSON-ready summary."""
    if not reports:
        raise ValueError("summarize_reports needs at least one report")
    horizons = sorted(reports[0].l2)
    summary = {
        "schema": REPORT_SCHEMA,
        "n_scenes": len(reports),
        "pdms": float(np.mean([r.pdms for r in reports])),
        "subscores": {
            k: float(np.mean([getattr(r.subscores, k) for r in reports]))
            for k in ("nc", "dac", "ttc", "comfort", "ep")
        },
        "l2": {str(h): float(np.mean([r.l2[h] for r in reports])) for h in horizons},
        "avg_l2": float(np.mean([[r.l2[h] for h in horizons] for r in reports])),
        "collision_rate": float(np.mean([r.collision_rate for r in reports])),
    }
    if ds is not None:
        summary["ds"] = float(ds)
    if sr is not None:
        summary["sr"] = float(sr)
    return summary


def write_report(path: str | Path, summary: dict) -> None:
    if summary.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"report summary must carry schema {REPORT_SCHEMA!r}")
    write_json(path, summary)


def read_report(path: str | Path) -> dict:
    summary = read_json(path)
    if summary.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"not a recognized report file: {path}")
    return summary


def report_csv_rows(summary: dict) -> list[list]:
    """Flatten a report summary into (metric, value) rows for plotting."""
    rows: list[list] = [["metric", "value"]]
    for key, value in summary.items():
        if key == "schema":
            continue
        if isinstance(value, dict):
            for sub, v in value.items():
                name = f"l2@{sub}s" if key == "l2" else f"{key}.{sub}"
                rows.append([name, v])
        else:
            rows.append([key, value])
    return rows
