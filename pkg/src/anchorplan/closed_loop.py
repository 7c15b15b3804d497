"""Open-loop replay over a corpus and a closed-loop kinematic simulation harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorBank
from .autodiff import NumericError
from .config import WorldConfig
from .geometry import boxes_overlap, box_corners, points_in_any_polygon, wrap_angle
from .metrics import (
    MetricReport,
    RouteResult,
    ScoreConfig,
    score_scene,
    summarize_reports,
)
from .scenes import AgentBox, EgoState, Scene

__all__ = [
    "RunConfig",
    "SimState",
    "replay_scene",
    "replay_open_loop",
    "anchor_baseline_report",
    "simulate_route",
    "simulate_closed_loop",
]


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Evaluation settings shared by replay and simulation."""

    mode: str = "open_loop"  # or "closed_loop"
    replan_interval: int = 1  # waypoints executed per plan
    max_steps: int = 32
    success_completion: float = 0.95
    stop_on_collision: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("open_loop", "closed_loop"):
            raise ValueError(f"mode must be 'open_loop' or 'closed_loop', got {self.mode!r}")
        if self.replan_interval < 1:
            raise ValueError("replan_interval must be at least 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class SimState:
    """One tick of the closed-loop world, in the route's fixed map frame."""

    step: int
    x: float
    y: float
    heading: float
    speed: float
    agents: list[AgentBox]
    n_collisions: int
    n_offroad: int
    completion: float


# ---------------------------------------------------------------------------
# open-loop replay
# ---------------------------------------------------------------------------


def replay_scene(planner, scene: Scene, bank: AnchorBank, score_cfg: ScoreConfig | None = None) -> MetricReport:
    """Score the argmax-probability mode of one scene's plan."""
    out = planner.plan(scene, bank)
    return score_scene(out.best_trajectory, scene, planner.world, score_cfg)


def replay_open_loop(
    planner,
    scenes: list[Scene],
    bank: AnchorBank,
    score_cfg: ScoreConfig | None = None,
) -> dict:
    """Mean open-loop report over a corpus; scenes are never modified."""
    reports = [replay_scene(planner, scene, bank, score_cfg) for scene in scenes]
    return summarize_reports(reports)


def anchor_baseline_report(
    scenes: list[Scene],
    bank: AnchorBank,
    world: WorldConfig,
    score_cfg: ScoreConfig | None = None,
) -> dict:
    """Report for always driving anchor 0 — the untrained planner's behaviour,
    computed without touching any model code."""
    reports = [score_scene(bank.waypoints[0], scene, world, score_cfg) for scene in scenes]
    return summarize_reports(reports)


# ---------------------------------------------------------------------------
# closed-loop simulation
# ---------------------------------------------------------------------------


def _arc_step(dx: float, dy: float) -> tuple[float, float, float, float]:
    """(new_dx, new_dy, dheading, arc_length) for one exact-arc unicycle move.

    The ego starts at the origin facing +x and ends at (dx, dy) having followed
    the circular arc tangent to its heading; dy ~ 0 degenerates to a straight
    segment (dx may be negative for reverse motion).
    """
    chord2 = dx * dx + dy * dy
    if chord2 < 1e-18:
        return 0.0, 0.0, 0.0, 0.0
    if abs(dy) < 1e-9:
        return dx, 0.0, 0.0, abs(dx)
    kappa = 2.0 * dy / chord2
    dheading = 2.0 * np.arctan2(dy, dx)
    arc = abs(dheading / kappa)
    return dx, dy, dheading, arc


def _to_ego_frame(px: float, py: float, pose: tuple[float, float, float]) -> tuple[float, float]:
    ex, ey, eh = pose
    c, s = np.cos(eh), np.sin(eh)
    rx, ry = px - ex, py - ey
    return c * rx + s * ry, -s * rx + c * ry


def _route_arcs(gt: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each route waypoint, measured from the origin."""
    pts = np.vstack([[0.0, 0.0], np.asarray(gt, dtype=np.float64)[:, :2]])
    return np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))


def render_sim_scene(state: SimState, scene: Scene, executed_arc: float) -> Scene:
    """Re-render the rolling world as a Scene in the current ego frame."""
    pose = (state.x, state.y, state.heading)
    c, s = np.cos(state.heading), np.sin(state.heading)
    agents = []
    for a in state.agents:
        ax, ay = _to_ego_frame(a.x, a.y, pose)
        avx, avy = c * a.vx + s * a.vy, -s * a.vx + c * a.vy
        agents.append(
            AgentBox(ax, ay, float(wrap_angle(a.heading - state.heading)), a.length, a.width, avx, avy, a.cls)
        )
    drivable = []
    for poly in scene.drivable:
        pts = np.array([_to_ego_frame(px, py, pose) for px, py in np.asarray(poly)[:, :2]])
        drivable.append(pts)

    gt = np.asarray(scene.gt, dtype=np.float64)
    arcs = _route_arcs(gt)
    remaining = [k for k in range(len(gt)) if arcs[k] > executed_arc + 1e-9]
    horizon = len(gt)
    rows = []
    for i in range(horizon):
        k = remaining[i] if i < len(remaining) else (remaining[-1] if remaining else len(gt) - 1)
        wx, wy = _to_ego_frame(gt[k, 0], gt[k, 1], pose)
        rows.append([wx, wy, float(wrap_angle(gt[k, 2] - state.heading))])
    return Scene(
        scene_id=scene.scene_id,
        profile=scene.profile,
        ego=EgoState(speed=state.speed),
        agents=agents,
        drivable=drivable,
        gt=np.array(rows),
        dt=scene.dt,
    )


def simulate_route(
    planner,
    scene: Scene,
    bank: AnchorBank,
    world: WorldConfig,
    cfg: RunConfig | None = None,
    score_cfg: ScoreConfig | None = None,
) -> tuple[RouteResult, list[SimState]]:
    """Drive one route with replanning; returns the outcome and the state trace.

    The map frame is the route's initial ego frame. Agents roll out at constant
    velocity; a collision is one event per agent per route, an off-drivable
    episode one event per continuous excursion. Completion is the executed arc
    length over the ground-truth route's arc length, clamped to 1.
    """
    cfg = cfg or RunConfig()
    score_cfg = score_cfg or ScoreConfig()
    dt = scene.dt
    route_arc = float(_route_arcs(scene.gt)[-1]) if len(scene.gt) else 0.0
    state = SimState(
        step=0, x=0.0, y=0.0, heading=0.0, speed=scene.ego.speed,
        agents=list(scene.agents), n_collisions=0, n_offroad=0, completion=0.0,
    )
    trace = [state]
    executed_arc = 0.0
    collided_with: set[int] = set()
    offroad_now = False
    done = False

    while not done and state.step < cfg.max_steps and state.completion < 1.0:
        view = render_sim_scene(state, scene, executed_arc)
        out = planner.plan(view, bank)
        traj = np.asarray(out.best_trajectory, dtype=np.float64)
        if len(traj) == 0:
            raise ValueError("planner returned an empty trajectory")
        plan_pose = (state.x, state.y, state.heading)
        c0, s0 = np.cos(plan_pose[2]), np.sin(plan_pose[2])

        for i in range(min(cfg.replan_interval, len(traj))):
            # target waypoint in the map frame, then relative to the live pose
            tx = plan_pose[0] + c0 * traj[i, 0] - s0 * traj[i, 1]
            ty = plan_pose[1] + s0 * traj[i, 0] + c0 * traj[i, 1]
            dx, dy = _to_ego_frame(tx, ty, (state.x, state.y, state.heading))
            _, _, dheading, arc = _arc_step(dx, dy)
            ch, sh = np.cos(state.heading), np.sin(state.heading)
            new_x = state.x + ch * dx - sh * dy
            new_y = state.y + sh * dx + ch * dy
            new_heading = float(wrap_angle(state.heading + dheading))
            if not np.isfinite((new_x, new_y, new_heading)).all():
                raise NumericError("ego state became non-finite during simulation")

            executed_arc += arc
            agents = [
                AgentBox(a.x + a.vx * dt, a.y + a.vy * dt, a.heading, a.length, a.width, a.vx, a.vy, a.cls)
                for a in state.agents
            ]
            completion = min(1.0, executed_arc / route_arc) if route_arc > 1e-9 else 1.0
            n_coll, n_off = state.n_collisions, state.n_offroad
            ego_box = (new_x, new_y, new_heading, world.ego_length, world.ego_width)
            for j, a in enumerate(agents):
                if j not in collided_with and boxes_overlap(ego_box, (a.x, a.y, a.heading, a.length, a.width)):
                    collided_with.add(j)
                    n_coll += 1
            corners = box_corners(*ego_box)
            outside = not points_in_any_polygon(corners, scene.drivable).all()
            if outside and not offroad_now:
                n_off += 1
            offroad_now = outside

            state = SimState(
                step=state.step + 1, x=float(new_x), y=float(new_y), heading=new_heading,
                speed=arc / dt, agents=agents, n_collisions=n_coll, n_offroad=n_off,
                completion=completion,
            )
            trace.append(state)
            if (cfg.stop_on_collision and n_coll > 0) or state.step >= cfg.max_steps or completion >= 1.0:
                done = True
                break

    penalties = (score_cfg.collision_penalty,) * state.n_collisions
    penalties += (score_cfg.offroad_penalty,) * state.n_offroad
    result = RouteResult(
        completion=float(100.0 * state.completion),
        success=bool(state.completion >= cfg.success_completion and state.n_collisions == 0),
        penalties=penalties,
        n_collisions=state.n_collisions,
        n_offroad=state.n_offroad,
    )
    return result, trace


def simulate_closed_loop(
    planner,
    scenes: list[Scene],
    bank: AnchorBank,
    world: WorldConfig,
    cfg: RunConfig | None = None,
    score_cfg: ScoreConfig | None = None,
) -> list[RouteResult]:
    """Run every scene as an independent route."""
    return [simulate_route(planner, s, bank, world, cfg, score_cfg)[0] for s in scenes]
