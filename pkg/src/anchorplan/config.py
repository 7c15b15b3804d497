"""World and model configuration dataclasses.

All distances are meters, angles radians, times seconds. Configs are frozen;
`to_dict` / `from_dict` round-trip them through checkpoint and CLI JSON.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any

__all__ = [
    "RasterConfig",
    "CameraConfig",
    "WorldConfig",
    "ModelConfig",
    "config_to_dict",
    "config_from_dict",
]


@dataclass(frozen=True)
class RasterConfig:
    """Bird's-eye grid; rows index x (forward), cols index y (left).

    Cell (i, j) has its center at (x_min + (i+0.5)*cell_m, y_min + (j+0.5)*cell_m).
    The defaults put the ego origin exactly at the center of cell (8, 32):
    near the bottom (rear) edge, centered laterally.
    """

    rows: int = 64
    cols: int = 64
    cell_m: float = 0.5
    x_min: float = -4.25
    y_min: float = -16.25

    @property
    def x_max(self) -> float:
        return self.x_min + self.rows * self.cell_m

    @property
    def y_max(self) -> float:
        return self.y_min + self.cols * self.cell_m


@dataclass(frozen=True)
class CameraConfig:
    """Toy forward pinhole at the ego origin, optical axis along +x.

    u grows to the right (-y), v grows downward; cy is the horizon row.
    Ground points (z=0) project to v = cy + focal*height_m/depth.
    """

    width: int = 48
    height: int = 24
    focal: float = 20.0
    cx: float = 23.5
    cy: float = 8.0
    height_m: float = 1.5
    min_depth: float = 0.2


@dataclass(frozen=True)
class WorldConfig:
    """Synthetic scenario generation and sensor stand-ins."""

    horizon: int = 8
    dt: float = 0.5
    ego_length: float = 4.6
    ego_width: float = 1.9
    raster: RasterConfig = field(default_factory=RasterConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions; the anchor bank supplies the mode count at run time."""

    width: int = 64
    heads: int = 4
    hidden: int = 64
    agent_slots: int = 8
    window_bev: int = 2
    window_img: int = 4
    rel_width: int = 16  # C_d, width of relative-distance features (C/4 by default)
    fourier_bands: int = 4
    activation: str = "relu"
    decode_mode: str = "ar"  # "ar" | "nar"
    chain_refined: bool = False
    seed: int = 0


def config_to_dict(cfg: Any) -> dict:
    return asdict(cfg)


def config_from_dict(cls: type, d: dict) -> Any:
    """Rebuild a (possibly nested) config dataclass, tolerating missing fields."""
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        val = d[f.name]
        if f.name == "raster" and isinstance(val, dict):
            val = config_from_dict(RasterConfig, val)
        elif f.name == "camera" and isinstance(val, dict):
            val = config_from_dict(CameraConfig, val)
        elif isinstance(val, list) and isinstance(getattr(cls, f.name, None), tuple):
            val = tuple(val)
        kwargs[f.name] = val
    return cls(**kwargs)
