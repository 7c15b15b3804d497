"""Position-guided perception: windowed grid attention and distance-aware agent attention."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat
from .config import ModelConfig, WorldConfig
from .encoder import FeatureBundle
from .geometry import wrap_angle
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadCrossAttention, Parameter
from .scenes import project_points

__all__ = ["HolisticPerception", "grid_window_indices", "guiding_points_at"]


def guiding_points_at(waypoints: np.ndarray, t: int) -> np.ndarray:
    """[M, 3] slice of an [M, T, 3] waypoint array at step t."""
    waypoints = np.asarray(waypoints)
    if waypoints.ndim != 3 or waypoints.shape[2] != 3:
        raise ValueError("expected waypoints of shape [M, T, 3]")
    if not 0 <= t < waypoints.shape[1]:
        raise IndexError(f"step {t} outside horizon {waypoints.shape[1]}")
    return waypoints[:, t, :]


def grid_window_indices(
    coords: np.ndarray, valid: np.ndarray, window: int, n_rows: int, n_cols: int
) -> list[int]:
    """Flat row-major indices of the (2w+1)^2 cells around each projected point.

    Invalid projections contribute nothing; cells beyond the borders are
    dropped. Indices from several points are unioned in first-encounter order.
    """
    out: list[int] = []
    seen: set[int] = set()
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    for rc, ok in zip(coords, np.atleast_1d(valid)):
        if not ok:
            continue
        r0, c0 = int(round(rc[0])), int(round(rc[1]))
        for dr in range(-window, window + 1):
            r = r0 + dr
            if r < 0 or r >= n_rows:
                continue
            for dc in range(-window, window + 1):
                c = c0 + dc
                if c < 0 or c >= n_cols:
                    continue
                flat = r * n_cols + c
                if flat not in seen:
                    seen.add(flat)
                    out.append(flat)
    return out


class HolisticPerception(Module):
    """Per-step targeted perception for a set of mode queries.

    Each mode's query row attends to grid features gathered in a fixed window
    around its projected guiding point (image first, then BEV), then to agent
    features keyed by query content, agent content, and relative-distance
    encodings. Every mode is processed as its own [1, C] row end to end, so
    permuting modes permutes outputs bit-exactly.
    """

    def __init__(self, world: WorldConfig, model: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = model.width
        self.world = world
        self.model = model
        self.img_attn = MultiHeadCrossAttention(c, model.heads, rng)
        self.img_norm = LayerNorm(c)
        self.bev_attn = MultiHeadCrossAttention(c, model.heads, rng)
        self.bev_norm = LayerNorm(c)
        self.agent_attn = MultiHeadCrossAttention(c, model.heads, rng)
        self.agent_norm = LayerNorm(c)
        self.null_img = Parameter(rng.normal(0.0, 0.02, size=(1, c)))
        self.null_bev = Parameter(rng.normal(0.0, 0.02, size=(1, c)))
        self.rel_mlp = Mlp(4, [model.hidden], model.rel_width, rng, activation=model.activation)
        self.agent_key_proj = Linear(2 * c + model.rel_width, c, rng)

    # -- window gathering ---------------------------------------------------

    def window_indices(self, points: np.ndarray, branch: str) -> list[int]:
        """Union of gather windows for one mode's guiding points ([3] or [K, 3])."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, :2]
        if branch == "img":
            cam = self.world.camera
            uv, valid = project_points(pts, "camera", cam=cam)
            coords = uv[:, ::-1]  # (u, v) -> pixel (row=v, col=u)
            return grid_window_indices(coords, valid, self.model.window_img, cam.height, cam.width)
        if branch == "bev":
            rcfg = self.world.raster
            rc, valid = project_points(pts, "bev", rcfg=rcfg)
            return grid_window_indices(rc, valid, self.model.window_bev, rcfg.rows, rcfg.cols)
        raise ValueError(f"unknown grid branch {branch!r}")

    # -- attention ops ------------------------------------------------------

    def attend_grid(
        self, q_rows: list[Tensor], points: np.ndarray, grid: Tensor, branch: str
    ) -> list[Tensor]:
        """Residual windowed cross-attention of each mode over one feature grid.

        points: [M, 3] guiding points, or [M, K, 3] to union K windows per mode.
        A mode whose projections are all invalid attends to the branch's
        learned null token instead.
        """
        attn, norm, null = {
            "img": (self.img_attn, self.img_norm, self.null_img),
            "bev": (self.bev_attn, self.bev_norm, self.null_bev),
        }[branch]
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[:, None, :]
        indices = [self.window_indices(pts[m], branch) for m in range(len(q_rows))]
        # One shared gather, then per-mode views: each mode still attends to
        # exactly its own rows, but the grid sees a single gradient scatter.
        flat = [i for idx in indices for i in idx]
        gathered = grid[np.asarray(flat, dtype=np.intp)] if flat else None
        out = []
        start = 0
        for qm, idx in zip(q_rows, indices):
            if idx:
                keys = gathered[start : start + len(idx)]
                start += len(idx)
            else:
                keys = null
            out.append(norm(qm + attn(qm, keys, keys)))
        return out

    def relative_distance_features(self, point: np.ndarray, boxes: Tensor) -> Tensor:
        """[A, C_d] MLP encoding of (dx, dy, range, relative heading) to each agent.

        Displacements are taken from the guiding point to the decoded agent
        centers, so the result is invariant under joint translation.
        """
        px, py, ph = (float(v) for v in np.asarray(point, dtype=np.float64)[:3])
        dx = boxes[:, 0:1] - px
        dy = boxes[:, 1:2] - py
        dist = (dx * dx + dy * dy + 1e-12).sqrt()
        raw = boxes[:, 2:3] - ph
        # wrap the heading difference while keeping unit gradient through raw
        dheading = raw + (wrap_angle(raw.data) - raw.data)
        return self.rel_mlp(concat([dx, dy, dist, dheading], axis=1))

    def attend_agents(
        self, q_rows: list[Tensor], points: np.ndarray, f_agent: Tensor, boxes: Tensor
    ) -> list[Tensor]:
        """Residual cross-attention over agent slots with distance-aware keys.

        Keys concatenate (query, agent feature, relative-distance feature) and
        project back to C. Zero agent slots leave the queries untouched.
        """
        if f_agent.shape[0] == 0:
            return list(q_rows)
        n_agents = f_agent.shape[0]
        pts = np.asarray(points, dtype=np.float64)
        ones_col = np.ones((n_agents, 1))
        out = []
        for m, qm in enumerate(q_rows):
            disrel = self.relative_distance_features(pts[m], boxes)
            q_rep = qm * ones_col  # broadcast [1, C] to one row per agent
            keys = self.agent_key_proj(concat([q_rep, f_agent, disrel], axis=1))
            out.append(self.agent_norm(qm + self.agent_attn(qm, keys, keys)))
        return out

    def step(
        self,
        q_rows: list[Tensor],
        grid_points: np.ndarray,
        agent_points: np.ndarray,
        bundle: FeatureBundle,
    ) -> list[Tensor]:
        """One perception pass: image, then BEV, then agent attention.

        grid_points may carry one or several guiding points per mode; agent
        distances always use the single [M, 3] agent_points.
        """
        q = self.attend_grid(q_rows, grid_points, bundle.f_img, "img")
        q = self.attend_grid(q, grid_points, bundle.f_bev, "bev")
        return self.attend_agents(q, agent_points, bundle.f_agent, bundle.boxes)
