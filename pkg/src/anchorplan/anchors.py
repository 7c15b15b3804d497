"""Anchor bank: multi-mode trajectory priors from K-Means over GT trajectories.

Clustering runs on trajectories flattened to concatenated (x, y) vectors with
squared-Euclidean distance; headings never enter the distance. Each converged
anchor carries, per waypoint, the circular mean of its members' headings.
Seeding is k-means++ under an explicit numpy Generator, so a (corpus, modes,
seed) triple is fully reproducible.

Anchor file schema (`anchorplan.anchors/1`): schema_version, modes, horizon,
waypoints [M][T][3], and provenance {seed, corpus_sha256}.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .jsonio import canonical_json, read_json, sha256_hex, write_json
from .scenes import Scene

ANCHOR_SCHEMA = "anchorplan.anchors/1"

__all__ = [
    "ANCHOR_SCHEMA",
    "AnchorBank",
    "cluster_anchors",
    "build_anchor_bank",
    "assign_nearest_anchor",
    "corpus_trajectory_hash",
    "write_anchor_bank",
    "read_anchor_bank",
]


@dataclass
class AnchorBank:
    waypoints: np.ndarray  # [M, T, 3] = (x, y, heading)
    seed: int
    corpus_sha256: str

    @property
    def modes(self) -> int:
        return self.waypoints.shape[0]

    @property
    def horizon(self) -> int:
        return self.waypoints.shape[1]


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; degenerate all-zero distance mass falls back to index order."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            remaining = [i for i in range(n) if i not in set(chosen)]
            chosen.append(remaining[0] if remaining else chosen[-1])
        else:
            idx = int(rng.choice(n, p=d2 / total))
            chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[chosen[-1]]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _circular_mean(angles: np.ndarray) -> float:
    # identical angles are their own mean; skipping the trig round-trip keeps
    # the fixed point exact for degenerate clusters
    if np.all(angles == angles.flat[0]):
        return float(angles.flat[0])
    return float(np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()))


def _member_mean(rows: np.ndarray) -> np.ndarray:
    # the mean of coinciding members is that member, bit for bit
    if (rows == rows[0]).all():
        return rows[0]
    return rows.mean(axis=0)


def cluster_anchors(
    trajectories: np.ndarray,
    modes: int,
    seed: int = 0,
    max_iter: int = 200,
) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm over [N, T, 3] trajectories; returns (anchors [M,T,3], objective history).

    The history holds the summed squared distance at every assignment step and
    is non-increasing. Ties in assignment go to the lowest anchor index. A
    cluster that loses all members is reseeded with the point farthest from its
    current center (deterministic argmax). A cluster still empty at convergence
    (possible only for degenerate corpora) takes the corpus-wide circular mean
    heading at each waypoint.
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    n, horizon = traj.shape[0], traj.shape[1]
    if traj.ndim != 3 or traj.shape[2] != 3:
        raise ValueError("trajectories must have shape [N, T, 3]")
    if not 1 <= modes <= n:
        raise ValueError(f"modes must be in [1, {n}], got {modes}")
    x = traj[:, :, :2].reshape(n, 2 * horizon)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(x, modes, rng)

    history: list[float] = []
    prev_assign: np.ndarray | None = None
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        point_cost = d2[np.arange(n), assign]
        history.append(float(point_cost.sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for m in range(modes):
            members = assign == m
            if members.any():
                centers[m] = _member_mean(x[members])
        empty = [m for m in range(modes) if not (assign == m).any()]
        if empty:
            cost = point_cost.copy()
            for m in empty:
                far = int(cost.argmax())
                centers[m] = x[far]
                cost[far] = -np.inf

    anchors = np.zeros((modes, horizon, 3))
    anchors[:, :, :2] = centers.reshape(modes, horizon, 2)
    for m in range(modes):
        members = traj[assign == m]
        source = members if len(members) else traj
        for t in range(horizon):
            anchors[m, t, 2] = _circular_mean(source[:, t, 2])
    return anchors, history


def corpus_trajectory_hash(scenes: list[Scene]) -> str:
    return sha256_hex(canonical_json([np.asarray(s.gt).tolist() for s in scenes]))


def build_anchor_bank(scenes: list[Scene], modes: int, seed: int = 0) -> tuple[AnchorBank, list[float]]:
    trajectories = np.stack([np.asarray(s.gt, dtype=np.float64) for s in scenes])
    anchors, history = cluster_anchors(trajectories, modes, seed)
    return AnchorBank(waypoints=anchors, seed=seed, corpus_sha256=corpus_trajectory_hash(scenes)), history


def assign_nearest_anchor(trajectory: np.ndarray, bank: AnchorBank) -> int:
    """Index of the anchor with least summed squared (x, y) distance; ties -> lowest index."""
    traj = np.asarray(trajectory, dtype=np.float64)
    d2 = ((bank.waypoints[:, :, :2] - traj[None, :, :2]) ** 2).sum(axis=(1, 2))
    return int(d2.argmin())


def write_anchor_bank(path: str | Path, bank: AnchorBank) -> None:
    write_json(
        path,
        {
            "schema_version": ANCHOR_SCHEMA,
            "modes": bank.modes,
            "horizon": bank.horizon,
            "waypoints": bank.waypoints.tolist(),
            "provenance": {"seed": bank.seed, "corpus_sha256": bank.corpus_sha256},
        },
    )


def read_anchor_bank(path: str | Path) -> AnchorBank:
    d = read_json(path)
    if d.get("schema_version") != ANCHOR_SCHEMA:
        raise ValueError(f"not an {ANCHOR_SCHEMA} file: {path}")
    waypoints = np.asarray(d["waypoints"], dtype=np.float64)
    if waypoints.shape != (d["modes"], d["horizon"], 3):
        raise ValueError("anchor waypoint shape disagrees with header")
    return AnchorBank(
        waypoints=waypoints,
        seed=int(d["provenance"]["seed"]),
        corpus_sha256=d["provenance"]["corpus_sha256"],
    )
