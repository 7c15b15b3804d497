"""Scene feature encoding: BEV grid and front-view features plus agent slot heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .config import ModelConfig, RasterConfig, WorldConfig
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadCrossAttention, Parameter
from .scenes import Scene, rasterize_scene, render_front_view

__all__ = [
    "FeatureBundle",
    "SceneEncoder",
    "fourier_features",
    "match_boxes_to_slots",
    "sinusoidal_grid_encoding",
    "slot_reference_points",
    "POSE_SCALE",
]

# Coordinate scales used to normalize (x, y, heading) before Fourier encoding:
# positions by the BEV extent, headings by their natural period.
POSE_SCALE = np.array([32.0, 32.0, np.pi])


# ---------------------------------------------------------------------------
# fixed encodings and slot geometry
# ---------------------------------------------------------------------------


def sinusoidal_grid_encoding(rows: int, cols: int, width: int) -> np.ndarray:
    """[rows*cols, width] 2-D sinusoidal encoding, half the channels per axis.

    Within each half, even channels are sin and odd channels are cos of the
    index scaled by 10000^(-2i/half). Flattening is row-major: cell (r, c)
    lives at flat index r*cols + c.
    """
    if width % 4 != 0:
        raise ValueError("encoding width must be a multiple of 4")
    half = width // 2

    def axis_encoding(n: int, d: int) -> np.ndarray:
        pos = np.arange(n, dtype=np.float64)[:, None]
        freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
        ang = pos * freq[None, :]
        out = np.zeros((n, d))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    enc_r = axis_encoding(rows, half)
    enc_c = axis_encoding(cols, half)
    out = np.zeros((rows, cols, width))
    out[:, :, :half] = enc_r[:, None, :]
    out[:, :, half:] = enc_c[None, :, :]
    return out.reshape(rows * cols, width)


def fourier_features(values: np.ndarray, bands: int) -> np.ndarray:
    """[..., D] -> [..., D*2*bands] sin/cos features at octave frequencies.

    Per input coordinate v the output block is
    (sin(pi*v), .., sin(pi*2^(bands-1)*v), cos(pi*v), .., cos(pi*2^(bands-1)*v));
    callers normalize coordinates to order one before encoding.
    """
    v = np.asarray(values, dtype=np.float64)
    freqs = np.pi * (2.0 ** np.arange(bands, dtype=np.float64))
    ang = v[..., :, None] * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*v.shape[:-1], v.shape[-1] * 2 * bands)


def slot_reference_points(n_slots: int, rcfg: RasterConfig | None = None) -> np.ndarray:
    """[A, 2] fixed reference points for the box head, gridded over the raster.

    Slots are laid out row-major on the smallest near-square grid covering the
    raster extent with half-spacing margins; extra grid points are dropped.
    """
    rcfg = rcfg or RasterConfig()
    if n_slots == 0:
        return np.zeros((0, 2))
    n_x = int(np.ceil(np.sqrt(n_slots)))
    n_y = int(np.ceil(n_slots / n_x))
    xs = rcfg.x_min + (rcfg.x_max - rcfg.x_min) * (np.arange(n_x) + 0.5) / n_x
    ys = rcfg.y_min + (rcfg.y_max - rcfg.y_min) * (np.arange(n_y) + 0.5) / n_y
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    return grid[:n_slots]


def match_boxes_to_slots(gt_centers: np.ndarray, refs: np.ndarray) -> list[tuple[int, int]]:
    """Greedy globally-nearest matching of ground-truth centers to slot references.

    All (slot, box) pairs are ranked by squared center distance (ties broken by
    slot then box index) and taken greedily, so the result does not depend on
    the order ground-truth boxes are listed in. Returns (slot, box) pairs
    sorted by slot index; each slot and each box is used at most once.
    """
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 2)
    if len(gt_centers) == 0 or len(refs) == 0:
        return []
    d2 = ((refs[:, None, :] - gt_centers[None, :, :]) ** 2).sum(axis=2)
    ranked = sorted(
        (d2[s, g], s, g) for s in range(len(refs)) for g in range(len(gt_centers))
    )
    used_slots: set[int] = set()
    used_boxes: set[int] = set()
    matches: list[tuple[int, int]] = []
    for _, s, g in ranked:
        if s in used_slots or g in used_boxes:
            continue
        matches.append((s, g))
        used_slots.add(s)
        used_boxes.add(g)
    return sorted(matches)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class FeatureBundle:
    """Per-scene features plus auxiliary head outputs, all sharing channel width C."""

    f_img: Tensor  # [H*W, C], row-major over (v, u)
    f_bev: Tensor  # [rows*cols, C], row-major over (row, col)
    f_agent: Tensor  # [A, C]
    seg_logits: Tensor  # [rows*cols, 3] classes (background, drivable, occupied)
    boxes: Tensor  # [A, 5] decoded (x, y, heading, length, width)
    objectness_logits: Tensor  # [A]


class SceneEncoder(Module):
    """Convolution-free scene encoder over rasterized BEV and a toy front view.

    BEV and image features are per-cell/per-pixel MLPs plus fixed sinusoidal
    positional encodings. Agent features are learned slot queries (seeded with
    an encoding of their fixed reference points) refined by one cross-attention
    block over the BEV features, then decoded into boxes and objectness.
    """

    def __init__(self, world: WorldConfig, model: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c, hidden = model.width, model.hidden
        self.world = world
        self.model = model
        self.bev_mlp = Mlp(2, [hidden], c, rng, activation=model.activation)
        self.img_mlp = Mlp(3, [hidden], c, rng, activation=model.activation)
        self.agent_embed = Parameter(rng.normal(0.0, 0.02, size=(model.agent_slots, c)))
        self.ref_proj = Linear(2 * 2 * model.fourier_bands, c, rng)
        self.agent_attn = MultiHeadCrossAttention(c, model.heads, rng)
        self.agent_norm_attn = LayerNorm(c)
        self.agent_ffn = Mlp(c, [hidden], c, rng, activation=model.activation)
        self.agent_norm_ffn = LayerNorm(c)
        self.seg_head = Linear(c, 3, rng)
        self.box_head = Mlp(c, [hidden], 6, rng, activation=model.activation)
        self._bev_pe = sinusoidal_grid_encoding(world.raster.rows, world.raster.cols, c)
        self._img_pe = sinusoidal_grid_encoding(world.camera.height, world.camera.width, c)
        self.reference_points = slot_reference_points(model.agent_slots, world.raster)

    def encode_scene(self, scene: Scene) -> FeatureBundle:
        raster = rasterize_scene(scene, self.world.raster)
        image = render_front_view(scene, self.world.camera)
        bev_in = Tensor(
            np.stack([raster.occupancy, raster.drivable], axis=-1).reshape(-1, 2).astype(np.float64)
        )
        f_bev = self.bev_mlp(bev_in) + self._bev_pe
        f_img = self.img_mlp(Tensor(image.reshape(-1, 3))) + self._img_pe
        f_agent = self._refine_agent_queries(f_bev)
        boxes, objectness_logits = self.decode_agent_boxes(f_agent)
        return FeatureBundle(
            f_img=f_img,
            f_bev=f_bev,
            f_agent=f_agent,
            seg_logits=self.seg_head(f_bev),
            boxes=boxes,
            objectness_logits=objectness_logits,
        )

    def _refine_agent_queries(self, f_bev: Tensor) -> Tensor:
        prior = fourier_features(self.reference_points / POSE_SCALE[:2], self.model.fourier_bands)
        q = self.agent_embed + self.ref_proj(Tensor(prior))
        if q.shape[0] == 0:
            return q
        q = self.agent_norm_attn(q + self.agent_attn(q, f_bev, f_bev))
        return self.agent_norm_ffn(q + self.agent_ffn(q))

    def decode_bev_segmentation(self, f_bev: Tensor) -> Tensor:
        """[rows*cols, 3] per-cell probabilities over (background, drivable, occupied)."""
        return self.seg_head(f_bev).softmax(axis=-1)

    def decode_agent_boxes(self, f_agent: Tensor) -> tuple[Tensor, Tensor]:
        """[A, 5] boxes (x, y, heading, length, width) and [A] objectness logits.

        Box centers are regressed as offsets from the slot reference points.
        """
        raw = self.box_head(f_agent)
        centers = raw[:, 0:2] + self.reference_points
        boxes = concat([centers, raw[:, 2:5]], axis=1)
        return boxes, raw[:, 5]
