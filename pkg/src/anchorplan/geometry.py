"""Planar geometry: oriented boxes, polygons, overlap tests, arc lengths.

All coordinates are meters in a right-handed frame (x forward, y left),
headings in radians measured from +x toward +y.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "wrap_angle",
    "box_corners",
    "boxes_overlap",
    "points_in_oriented_box",
    "points_in_polygon",
    "points_in_any_polygon",
    "polygon_signed_area",
    "ensure_ccw",
    "polygon_is_simple",
    "polyline_length",
    "trajectory_progress",
]


def wrap_angle(a):
    """Wrap angle(s) into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def box_corners(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    """Corners [4,2] in order front-left, front-right, rear-right, rear-left."""
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _project_extent(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    p = corners @ axis
    return float(p.min()), float(p.max())


def boxes_overlap(a: tuple | np.ndarray, b: tuple | np.ndarray) -> bool:
    """Separating-axis test on two oriented rectangles (cx, cy, heading, length, width).

    Overlap means the interiors intersect; boxes that only touch along an edge
    or at a corner do not count.
    """
    ca = box_corners(*a)
    cb = box_corners(*b)
    axes = []
    for c in (ca, cb):
        e1 = c[1] - c[0]
        e2 = c[3] - c[0]
        axes.append(e1 / np.linalg.norm(e1))
        axes.append(e2 / np.linalg.norm(e2))
    for axis in axes:
        lo_a, hi_a = _project_extent(ca, axis)
        lo_b, hi_b = _project_extent(cb, axis)
        if hi_a <= lo_b or hi_b <= lo_a:
            return False
    return True


def points_in_oriented_box(
    points: np.ndarray, cx: float, cy: float, heading: float, length: float, width: float
) -> np.ndarray:
    """Boundary-inclusive membership of points [N,2] in an oriented box."""
    d = np.asarray(points, dtype=np.float64) - np.array([cx, cy])
    c, s = np.cos(heading), np.sin(heading)
    local_x = d[:, 0] * c + d[:, 1] * s
    local_y = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(local_x) <= 0.5 * length) & (np.abs(local_y) <= 0.5 * width)


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd (crossing number) membership of points [N,2] in a simple polygon [V,2]."""
    pts = np.asarray(points, dtype=np.float64)
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    v = len(poly)
    for i in range(v):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % v]
        crosses = (y1 <= y) != (y2 <= y)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < x_at)
    return inside


def points_in_any_polygon(points: np.ndarray, polygons: list[np.ndarray]) -> np.ndarray:
    hits = np.zeros(len(points), dtype=bool)
    for poly in polygons:
        hits |= points_in_polygon(points, poly)
    return hits


def polygon_signed_area(polygon: np.ndarray) -> float:
    p = np.asarray(polygon, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def ensure_ccw(polygon: np.ndarray) -> np.ndarray:
    p = np.asarray(polygon, dtype=np.float64)
    return p if polygon_signed_area(p) >= 0 else p[::-1].copy()


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def polygon_is_simple(polygon: np.ndarray) -> bool:
    """No two non-adjacent edges intersect (O(V^2); polygons here are small)."""
    p = np.asarray(polygon, dtype=np.float64)
    v = len(p)
    if v < 3:
        return False
    for i in range(v):
        for j in range(i + 1, v):
            if j == i or (j + 1) % v == i or (i + 1) % v == j:
                continue
            if _segments_properly_intersect(p[i], p[(i + 1) % v], p[j], p[(j + 1) % v]):
                return False
    return True


def polyline_length(points: np.ndarray) -> float:
    p = np.asarray(points, dtype=np.float64)[:, :2]
    if len(p) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def trajectory_progress(traj: np.ndarray) -> float:
    """Arc length of a future trajectory, including the leg from the origin to waypoint 0."""
    p = np.asarray(traj, dtype=np.float64)[:, :2]
    return polyline_length(np.vstack([[0.0, 0.0], p]))
