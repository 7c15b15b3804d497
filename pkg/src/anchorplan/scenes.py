"""Synthetic driving scenes: generation, rasterization, projection, serialization.

A scene is expressed in the ego frame: the ego sits at the origin with heading 0
(+x forward, +y left) and moves with a scalar initial speed. Ground truth is a
future trajectory of `horizon` waypoints (x, y, heading) at times dt, 2*dt, ...
Agents move at constant velocity. Drivable area is a union of simple CCW
polygons.

Scene JSON schema (`anchorplan.scene/1`), one object per corpus line:
    schema_version  str
    scene_id        str
    profile         str, one of PROFILES
    dt              float seconds
    ego             {speed m/s, length m, width m}
    agents          [{x, y m; heading rad; length, width m; vx, vy m/s; class}]
    drivable        [[[x, y], ...], ...] polygons, meters, CCW
    gt              [[x, y, heading], ...] horizon rows
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CameraConfig, RasterConfig, WorldConfig
from .geometry import (
    box_corners,
    boxes_overlap,
    ensure_ccw,
    points_in_any_polygon,
    points_in_oriented_box,
    polygon_is_simple,
    polygon_signed_area,
)
from .jsonio import read_jsonl, write_jsonl

SCENE_SCHEMA = "anchorplan.scene/1"

PROFILES = ("straight", "left_turn", "right_turn", "lane_change", "yield")

AGENT_CLASSES = ("vehicle", "pedestrian", "cyclist", "static")

# class -> (length m, width m, silhouette height m, max speed m/s)
CLASS_SPECS = {
    "vehicle": (4.4, 1.8, 1.6, 7.0),
    "pedestrian": (0.6, 0.6, 1.8, 1.5),
    "cyclist": (1.8, 0.7, 1.7, 4.0),
    "static": (1.0, 1.0, 1.0, 0.0),
}

__all__ = [
    "SCENE_SCHEMA",
    "PROFILES",
    "AGENT_CLASSES",
    "CLASS_SPECS",
    "EgoState",
    "AgentBox",
    "Scene",
    "BevRaster",
    "generate_scenario",
    "generate_corpus",
    "validate_scene",
    "rasterize_scene",
    "bev_class_map",
    "project_points",
    "render_front_view",
    "ego_cell",
    "scene_to_dict",
    "scene_from_dict",
    "write_corpus",
    "read_corpus",
]


@dataclass
class EgoState:
    """Ego at the frame origin with heading 0; only speed and box dims vary."""

    speed: float
    length: float = 4.6
    width: float = 1.9

    def box(self) -> tuple[float, float, float, float, float]:
        return (0.0, 0.0, 0.0, self.length, self.width)


@dataclass
class AgentBox:
    x: float
    y: float
    heading: float
    length: float
    width: float
    vx: float
    vy: float
    cls: str

    def box_at(self, t: float) -> tuple[float, float, float, float, float]:
        """Constant-velocity pose at time t (heading frozen)."""
        return (self.x + self.vx * t, self.y + self.vy * t, self.heading, self.length, self.width)


@dataclass
class Scene:
    scene_id: str
    profile: str
    ego: EgoState
    agents: list[AgentBox]
    drivable: list[np.ndarray]
    gt: np.ndarray  # [horizon, 3]
    dt: float


@dataclass
class BevRaster:
    occupancy: np.ndarray  # [rows, cols] in {0,1}
    drivable: np.ndarray  # [rows, cols] in {0,1}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _gt_from_controls(speeds: np.ndarray, yaw_rates: np.ndarray, dt: float) -> np.ndarray:
    """Integrate per-step (speed, yaw rate) controls from the origin."""
    t = len(speeds)
    gt = np.zeros((t, 3))
    x, y, th = 0.0, 0.0, 0.0
    for k in range(t):
        th = th + yaw_rates[k] * dt
        x += speeds[k] * dt * np.cos(th)
        y += speeds[k] * dt * np.sin(th)
        gt[k] = (x, y, th)
    return gt


def _profile_controls(
    profile: str, speed: float, horizon: int, dt: float, rng, conflict: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    jitter = rng.uniform(0.95, 1.05, size=horizon)
    if profile == "straight":
        if conflict:
            # brake smoothly for the crossing hazard while holding the lane
            floor = rng.uniform(0.35, 0.55)
            return speed * jitter * np.linspace(1.0, floor, horizon), np.zeros(horizon)
        return speed * jitter, np.zeros(horizon)
    if profile == "left_turn":
        w = rng.uniform(0.12, 0.28)
        return speed * jitter, np.full(horizon, w)
    if profile == "right_turn":
        w = rng.uniform(0.12, 0.28)
        return speed * jitter, np.full(horizon, -w)
    if profile == "lane_change":
        # sine-bump heading schedule; ends parallel to the road, offset laterally
        lateral = rng.uniform(2.5, 3.8) * (1.0 if rng.uniform() < 0.5 else -1.0)
        duration = horizon * dt
        theta_max = lateral * np.pi / (2.0 * speed * duration)
        tgrid = (np.arange(horizon) + 1) * dt
        theta = theta_max * np.sin(np.pi * tgrid / duration)
        theta_prev = np.concatenate([[0.0], theta[:-1]])
        return speed * jitter, (theta - theta_prev) / dt
    if profile == "yield":
        # decelerate toward a near stop in front of crossing traffic
        decel = np.maximum(0.12, 1.0 - (np.arange(horizon) + 1) / (0.8 * horizon))
        return speed * decel, np.zeros(horizon)
    raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def _corridor_polygon(gt: np.ndarray, half_width: float, overhang: float = 5.6) -> np.ndarray:
    """Road corridor: the GT path buffered laterally and extended past both ends
    so the full ego footprint stays on-road along the expert trajectory."""
    h_end = gt[-1, 2]
    tail = gt[-1, :2] + overhang * np.array([np.cos(h_end), np.sin(h_end)])
    path = np.vstack([[-overhang, 0.0], [0.0, 0.0], gt[:, :2], tail])
    headings = np.concatenate([[0.0, 0.0], gt[:, 2], [h_end]])
    normals = np.stack([-np.sin(headings), np.cos(headings)], axis=1)
    left = path + half_width * normals
    right = path - half_width * normals
    return ensure_ccw(np.vstack([left, right[::-1]]))


def _sample_agent(rng, cls: str, x_range=(3.0, 24.0), y_range=(-12.0, 12.0)) -> AgentBox:
    length, width, _, v_max = CLASS_SPECS[cls]
    heading = rng.uniform(-np.pi, np.pi)
    speed = rng.uniform(0.0, v_max)
    return AgentBox(
        x=float(rng.uniform(*x_range)),
        y=float(rng.uniform(*y_range)),
        heading=float(heading),
        length=length,
        width=width,
        vx=float(speed * np.cos(heading)),
        vy=float(speed * np.sin(heading)),
        cls=cls,
    )


def _expert_boxes(gt: np.ndarray, ego: EgoState, dt: float) -> list[tuple[float, tuple]]:
    """(time, oriented box) pairs the expert occupies at the sampled steps."""
    boxes = [(0.0, ego.box())]
    for k, (x, y, heading) in enumerate(gt):
        boxes.append(((k + 1) * dt, (x, y, heading, ego.length, ego.width)))
    return boxes


def _hits_expert(agent: AgentBox, expert_boxes: list[tuple[float, tuple]]) -> bool:
    return any(boxes_overlap(agent.box_at(t), box) for t, box in expert_boxes)


def _conflict_agent(rng, ego_speed: float, ego_length: float, allow_static: bool = True) -> AgentBox:
    """An agent a constant-velocity ego is guaranteed to hit within the horizon.

    Moving classes cross the path from the side, timed to meet the ego; a
    static agent is parked directly on the path. The class is drawn uniformly
    so conflict injection barely skews the corpus class balance.
    """
    classes = AGENT_CLASSES if allow_static else tuple(c for c in AGENT_CLASSES if c != "static")
    cls = classes[int(rng.integers(0, len(classes)))]
    length, width, _, _ = CLASS_SPECS[cls]
    t_hit = rng.uniform(1.5, 3.2)
    # keep the meeting point clear of the ego's footprint at t=0
    t_hit = max(t_hit, (0.5 * (ego_length + length) + 0.5) / ego_speed + 0.2)
    x_hit = ego_speed * t_hit
    if cls == "static":
        return AgentBox(
            x=float(x_hit),
            y=float(rng.uniform(-0.4, 0.4)),
            heading=0.0,
            length=length,
            width=width,
            vx=0.0,
            vy=0.0,
            cls=cls,
        )
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    d = rng.uniform(4.0, 9.0)
    return AgentBox(
        x=float(x_hit),
        y=float(side * d),
        heading=float(-side * np.pi / 2.0),
        length=length,
        width=width,
        vx=0.0,
        vy=float(-side * d / t_hit),
        cls=cls,
    )


def _add_conflict(
    agents: list[AgentBox], rng, ego_speed: float, ego_length: float,
    expert_boxes: list[tuple[float, tuple]], allow_static: bool,
) -> None:
    """Place a hazard the expert trajectory avoids but a non-reacting ego hits."""
    for _attempt in range(40):
        cand = _conflict_agent(rng, ego_speed, ego_length, allow_static)
        if _hits_expert(cand, expert_boxes):
            continue
        if any(boxes_overlap(cand.box_at(0.0), a.box_at(0.0)) for a in agents):
            continue
        agents.append(cand)
        return


def generate_scenario(seed: int, profile: str, cfg: WorldConfig | None = None) -> Scene:
    """Deterministic per (seed, profile). The expert future stays collision-free
    and on-road; seeds divisible by 3 add an agent that a non-reacting
    constant-velocity ego would hit, keeping NC/TTC non-trivial."""
    cfg = cfg or WorldConfig()
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    rng = np.random.default_rng([seed, PROFILES.index(profile)])
    speed = float(rng.uniform(2.5, 6.5))
    wants_conflict = seed % 3 == 0
    speeds, yaw_rates = _profile_controls(
        profile, speed, cfg.horizon, cfg.dt, rng, conflict=wants_conflict
    )
    gt = _gt_from_controls(speeds, yaw_rates, cfg.dt)

    half_width = 6.0 if profile == "lane_change" else 4.0
    drivable = [_corridor_polygon(gt, half_width, overhang=cfg.ego_length + 1.0)]

    ego = EgoState(speed=speed, length=cfg.ego_length, width=cfg.ego_width)
    expert = _expert_boxes(gt, ego, cfg.dt)
    agents: list[AgentBox] = []
    if wants_conflict:
        # the braked straight expert dodges crossers by timing, never by parking
        _add_conflict(agents, rng, speed, cfg.ego_length, expert, profile != "straight")
    if profile == "yield":
        _add_conflict(agents, rng, speed, cfg.ego_length, expert, True)
    n_extra = int(rng.integers(1, 4))
    for _ in range(n_extra):
        cls = AGENT_CLASSES[int(rng.integers(0, len(AGENT_CLASSES)))]
        for _attempt in range(20):
            cand = _sample_agent(rng, cls)
            if _hits_expert(cand, expert):
                continue
            if any(boxes_overlap(cand.box_at(0.0), a.box_at(0.0)) for a in agents):
                continue
            agents.append(cand)
            break

    return Scene(
        scene_id=f"s{seed:08d}-{profile}",
        profile=profile,
        ego=ego,
        agents=agents,
        drivable=drivable,
        gt=gt,
        dt=cfg.dt,
    )


def generate_corpus(
    seed: int, count: int, profiles: tuple[str, ...] = PROFILES, cfg: WorldConfig | None = None
) -> list[Scene]:
    """Round-robin over profiles so the corpus stays balanced."""
    scenes = []
    for i in range(count):
        profile = profiles[i % len(profiles)]
        scene = generate_scenario(seed + i, profile, cfg)
        scene.scene_id = f"s{seed + i:08d}-{i:05d}-{profile}"
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_scene(scene: Scene, cfg: WorldConfig | None = None) -> list[str]:
    """Returns human-readable invariant violations (empty list means valid)."""
    cfg = cfg or WorldConfig()
    problems: list[str] = []
    if scene.profile not in PROFILES:
        problems.append(f"unknown profile {scene.profile!r}")
    if not (scene.dt > 0):
        problems.append("dt must be positive")
    if scene.ego.speed < 0 or scene.ego.length <= 0 or scene.ego.width <= 0:
        problems.append("ego speed/extent out of range")
    gt = np.asarray(scene.gt)
    if gt.shape != (cfg.horizon, 3):
        problems.append(f"gt shape {gt.shape} != {(cfg.horizon, 3)}")
    if not np.all(np.isfinite(gt)):
        problems.append("gt contains non-finite values")
    elif np.linalg.norm(gt[0, :2]) > scene.ego.speed * scene.dt * 1.5 + 1e-9:
        problems.append("first gt waypoint farther than speed*dt*1.5 from the ego")
    for i, poly in enumerate(scene.drivable):
        if len(poly) < 3 or not polygon_is_simple(poly):
            problems.append(f"drivable polygon {i} is not simple")
        elif polygon_signed_area(poly) <= 0:
            problems.append(f"drivable polygon {i} is not CCW")
    for i, agent in enumerate(scene.agents):
        if agent.cls not in AGENT_CLASSES:
            problems.append(f"agent {i} has unknown class {agent.cls!r}")
        if agent.length <= 0 or agent.width <= 0:
            problems.append(f"agent {i} has non-positive extent")
        if not np.all(np.isfinite([agent.x, agent.y, agent.heading, agent.vx, agent.vy])):
            problems.append(f"agent {i} has non-finite state")
        elif boxes_overlap(agent.box_at(0.0), scene.ego.box()):
            problems.append(f"agent {i} overlaps the ego at t=0")
    return problems


# ---------------------------------------------------------------------------
# BEV rasterization and projection
# ---------------------------------------------------------------------------


def _cell_centers(rcfg: RasterConfig) -> np.ndarray:
    xs = rcfg.x_min + (np.arange(rcfg.rows) + 0.5) * rcfg.cell_m
    ys = rcfg.y_min + (np.arange(rcfg.cols) + 0.5) * rcfg.cell_m
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def rasterize_scene(scene: Scene, rcfg: RasterConfig | None = None) -> BevRaster:
    """Cell-center sampling: a cell belongs to a box/polygon iff its center does."""
    rcfg = rcfg or RasterConfig()
    centers = _cell_centers(rcfg)
    occ = np.zeros(len(centers), dtype=bool)
    for agent in scene.agents:
        occ |= points_in_oriented_box(centers, *agent.box_at(0.0))
    drv = points_in_any_polygon(centers, scene.drivable)
    shape = (rcfg.rows, rcfg.cols)
    return BevRaster(
        occupancy=occ.reshape(shape).astype(np.float64),
        drivable=drv.reshape(shape).astype(np.float64),
    )


def bev_class_map(raster: BevRaster) -> np.ndarray:
    """Per-cell labels: 0 background, 1 drivable, 2 occupied (occupied wins)."""
    labels = np.zeros(raster.occupancy.shape, dtype=np.int64)
    labels[raster.drivable > 0.5] = 1
    labels[raster.occupancy > 0.5] = 2
    return labels


def ego_cell(rcfg: RasterConfig | None = None) -> tuple[int, int]:
    rcfg = rcfg or RasterConfig()
    coords, valid = project_points(np.zeros((1, 2)), "bev", rcfg=rcfg)
    if not valid[0]:
        raise ValueError("raster config does not cover the ego origin")
    return int(round(coords[0, 0])), int(round(coords[0, 1]))


def project_points(
    points: np.ndarray,
    target: str,
    rcfg: RasterConfig | None = None,
    cam: CameraConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Project world (x, y) points into continuous grid coordinates.

    target "bev": (row, col) cell coordinates; cell centers land on integers.
    target "camera": (u, v) pixel coordinates of the ground point (z=0).
    Returns (coords [N,2], valid [N]); invalid rows hold NaN.
    """
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    if target == "bev":
        rcfg = rcfg or RasterConfig()
        rows = (pts[:, 0] - rcfg.x_min) / rcfg.cell_m - 0.5
        cols = (pts[:, 1] - rcfg.y_min) / rcfg.cell_m - 0.5
        coords = np.stack([rows, cols], axis=1)
        r = np.rint(rows)
        c = np.rint(cols)
        valid = (r >= 0) & (r < rcfg.rows) & (c >= 0) & (c < rcfg.cols)
    elif target == "camera":
        cam = cam or CameraConfig()
        depth = pts[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.cx - cam.focal * pts[:, 1] / depth
            v = cam.cy + cam.focal * cam.height_m / depth
        coords = np.stack([u, v], axis=1)
        valid = (
            (depth > cam.min_depth)
            & (np.rint(u) >= 0)
            & (np.rint(u) < cam.width)
            & (np.rint(v) >= 0)
            & (np.rint(v) < cam.height)
        )
    else:
        raise ValueError(f"unknown projection target {target!r}")
    coords = coords.copy()
    coords[~valid] = np.nan
    return coords, valid


# ---------------------------------------------------------------------------
# toy front-view render
# ---------------------------------------------------------------------------


def render_front_view(scene: Scene, cam: CameraConfig | None = None) -> np.ndarray:
    """[H, W, 3] channels: agent silhouette, normalized inverse depth, drivable ground.

    Ground pixels below the horizon are ray-cast onto the z=0 plane and tested
    against the drivable union; agent boxes are painted far-to-near as upright
    rectangles spanning their class height.
    """
    cam = cam or CameraConfig()
    img = np.zeros((cam.height, cam.width, 3))

    # drivable-ground channel: ray-cast every below-horizon pixel onto z=0
    vs = np.arange(cam.height, dtype=np.float64)
    us = np.arange(cam.width, dtype=np.float64)
    below = np.nonzero(vs > cam.cy + 1e-9)[0]
    if below.size:
        depth = cam.focal * cam.height_m / (vs[below] - cam.cy)
        gd, gu = np.meshgrid(depth, us, indexing="ij")
        gy = (cam.cx - gu) * gd / cam.focal
        pts = np.stack([gd.reshape(-1), gy.reshape(-1)], axis=1)
        hit = points_in_any_polygon(pts, scene.drivable).reshape(below.size, cam.width)
        img[below, :, 2] = hit.astype(np.float64)

    # agent silhouettes, painter's algorithm far-to-near
    for agent in sorted(scene.agents, key=lambda a: -a.x):
        if agent.x <= cam.min_depth:
            continue
        corners = _agent_ground_corners(agent)
        front = corners[corners[:, 0] > cam.min_depth]
        if len(front) == 0:
            continue
        u = cam.cx - cam.focal * front[:, 1] / front[:, 0]
        z_top = CLASS_SPECS[agent.cls][2]
        v_top = cam.cy + cam.focal * (cam.height_m - z_top) / agent.x
        v_bot = cam.cy + cam.focal * cam.height_m / agent.x
        u0 = int(np.clip(np.floor(u.min()), 0, cam.width))
        u1 = int(np.clip(np.ceil(u.max()) + 1, 0, cam.width))
        v0 = int(np.clip(np.floor(v_top), 0, cam.height))
        v1 = int(np.clip(np.ceil(v_bot) + 1, 0, cam.height))
        if u0 >= u1 or v0 >= v1:
            continue
        img[v0:v1, u0:u1, 0] = 1.0
        img[v0:v1, u0:u1, 1] = cam.min_depth / agent.x  # normalized inverse depth
    return img


def _agent_ground_corners(agent: AgentBox) -> np.ndarray:
    return box_corners(agent.x, agent.y, agent.heading, agent.length, agent.width)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema_version": SCENE_SCHEMA,
        "scene_id": scene.scene_id,
        "profile": scene.profile,
        "dt": scene.dt,
        "ego": {"speed": scene.ego.speed, "length": scene.ego.length, "width": scene.ego.width},
        "agents": [
            {
                "x": a.x,
                "y": a.y,
                "heading": a.heading,
                "length": a.length,
                "width": a.width,
                "vx": a.vx,
                "vy": a.vy,
                "class": a.cls,
            }
            for a in scene.agents
        ],
        "drivable": [np.asarray(p).tolist() for p in scene.drivable],
        "gt": np.asarray(scene.gt).tolist(),
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("schema_version") != SCENE_SCHEMA:
        raise ValueError(f"not an {SCENE_SCHEMA} record: {d.get('schema_version')!r}")
    ego = EgoState(speed=d["ego"]["speed"], length=d["ego"]["length"], width=d["ego"]["width"])
    agents = [
        AgentBox(
            x=a["x"],
            y=a["y"],
            heading=a["heading"],
            length=a["length"],
            width=a["width"],
            vx=a["vx"],
            vy=a["vy"],
            cls=a["class"],
        )
        for a in d["agents"]
    ]
    return Scene(
        scene_id=d["scene_id"],
        profile=d["profile"],
        ego=ego,
        agents=agents,
        drivable=[np.asarray(p, dtype=np.float64) for p in d["drivable"]],
        gt=np.asarray(d["gt"], dtype=np.float64),
        dt=d["dt"],
    )


def write_corpus(path: str | Path, scenes: list[Scene]) -> None:
    write_jsonl(path, [scene_to_dict(s) for s in scenes])


def read_corpus(path: str | Path) -> list[Scene]:
    return [scene_from_dict(d) for d in read_jsonl(path)]
