"""Anchored multi-mode trajectory planning with position-guided perception.

A desk-scale, fully synthetic, end-to-end testable planning stack: anchored
trajectory priors steer where the perception modules look, an autoregressive
decoder refines the anchors step by step, and exact metric/score formulas
close the loop.
"""

from .anchors import AnchorBank, build_anchor_bank, cluster_anchors
from .autodiff import GradCheckReport, NumericError, Tensor, gradient_check, no_grad
from .closed_loop import RunConfig, anchor_baseline_report, replay_open_loop, simulate_closed_loop
from .config import CameraConfig, ModelConfig, RasterConfig, WorldConfig
from .metrics import ScoreConfig, aggregate_pdms, closed_loop_scores, score_scene, summarize_reports
from .planner import AnchorPlanner, PlanOutput
from .scenes import Scene, generate_corpus, generate_scenario
from .training import TrainConfig, split_holdout, train

__version__ = "0.1.0"

__all__ = [
    "AnchorBank",
    "AnchorPlanner",
    "CameraConfig",
    "GradCheckReport",
    "ModelConfig",
    "NumericError",
    "PlanOutput",
    "RasterConfig",
    "RunConfig",
    "Scene",
    "ScoreConfig",
    "Tensor",
    "TrainConfig",
    "WorldConfig",
    "aggregate_pdms",
    "anchor_baseline_report",
    "build_anchor_bank",
    "closed_loop_scores",
    "cluster_anchors",
    "generate_corpus",
    "generate_scenario",
    "gradient_check",
    "no_grad",
    "replay_open_loop",
    "score_scene",
    "simulate_closed_loop",
    "split_holdout",
    "summarize_reports",
    "train",
    "__version__",
]
