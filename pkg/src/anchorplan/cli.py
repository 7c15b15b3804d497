"""Command-line pipeline: generate scenes, cluster anchors, train, plan, and score.

Every command reads an optional JSON config file holding `world`, `model`,
`train`, `score`, and `run` sections (each a dict of dataclass field
overrides) plus a `--seed` override, and exits 0 on success, 2 on validation
failure, and 3 on numeric failure. All file formats carry versioned schemas.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

from .anchors import build_anchor_bank, read_anchor_bank, write_anchor_bank
from .autodiff import NumericError
from .closed_loop import RunConfig, anchor_baseline_report, replay_open_loop, simulate_closed_loop
from .config import ModelConfig, WorldConfig, config_from_dict
from .jsonio import read_json, read_jsonl, write_json, write_jsonl
from .metrics import (
    ScoreConfig,
    closed_loop_scores,
    report_csv_rows,
    score_scene,
    summarize_reports,
    write_report,
)
from .planner import AnchorPlanner, plan_from_dict, plan_to_dict, planner_from_checkpoint, save_planner
from .scenes import PROFILES, generate_corpus, read_corpus, scene_from_dict, write_corpus
from .training import TrainConfig, train

SIMULATION_SCHEMA = "anchorplan.simulation/1"

_SECTIONS = {
    "world": WorldConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "score": ScoreConfig,
    "run": RunConfig,
}

__all__ = ["SIMULATION_SCHEMA", "main"]


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    d = read_json(path)
    if not isinstance(d, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config sections {unknown}; expected {sorted(_SECTIONS)}")
    return d


def _section(cfg: dict, name: str):
    """Build one config dataclass from its section, rejecting unknown fields."""
    cls = _SECTIONS[name]
    d = cfg.get(name, {})
    extra = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
    if extra:
        raise ValueError(f"unknown fields in {name!r} config section: {extra}")
    return config_from_dict(cls, d)


def _write_csv(path: str | Path, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


def _check_decode_mode(planner: AnchorPlanner, mode: str) -> None:
    """The ar/nar decoders have different offset-head shapes, so a checkpoint
    can only be planned in the mode it was trained with."""
    if mode != planner.model.decode_mode:
        raise ValueError(
            f"checkpoint was trained with decode_mode={planner.model.decode_mode!r}, "
            f"not {mode!r}; retrain with a model config set to the requested mode"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_generate(args: argparse.Namespace, cfg: dict) -> int:
    world = _section(cfg, "world")
    profiles = tuple(args.profiles.split(",")) if args.profiles else PROFILES
    bad = sorted(set(profiles) - set(PROFILES))
    if bad:
        raise ValueError(f"unknown profiles {bad}; available: {list(PROFILES)}")
    seed = args.seed if args.seed is not None else 0
    scenes = generate_corpus(seed, args.count, profiles=profiles, cfg=world)
    write_corpus(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_cluster(args: argparse.Namespace, cfg: dict) -> int:
    scenes = read_corpus(args.corpus)
    seed = args.seed if args.seed is not None else 0
    bank, history = build_anchor_bank(scenes, args.modes, seed=seed)
    write_anchor_bank(args.out, bank)
    print(f"clustered {len(scenes)} trajectories into {bank.modes} anchors "
          f"(objective {history[-1]:.6f})")
    return 0


def _cmd_train(args: argparse.Namespace, cfg: dict) -> int:
    world = _section(cfg, "world")
    model = _section(cfg, "model")
    tcfg = _section(cfg, "train")
    if args.seed is not None:
        model = dataclasses.replace(model, seed=args.seed)
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    scenes = read_corpus(args.corpus)
    bank = read_anchor_bank(args.anchors)
    planner = AnchorPlanner(world, model)
    history = train(planner, scenes, bank, tcfg, log_path=args.log)
    save_planner(args.out, planner)
    print(f"trained {tcfg.epochs} epoch(s) on {len(scenes)} scenes; "
          f"final loss {history[-1].total:.6f}; checkpoint {args.out}")
    return 0


def _cmd_plan(args: argparse.Namespace, cfg: dict) -> int:
    planner = planner_from_checkpoint(args.ckpt)
    if args.mode is not None:
        _check_decode_mode(planner, args.mode)
    bank = read_anchor_bank(args.anchors)
    if args.scene is not None:
        scene = scene_from_dict(read_json(args.scene))
        write_json(args.out, plan_to_dict(planner.plan(scene, bank), scene.scene_id))
        print(f"planned scene {scene.scene_id} to {args.out}")
        return 0
    scenes = read_corpus(args.corpus)
    rows = [plan_to_dict(planner.plan(s, bank), s.scene_id) for s in scenes]
    write_jsonl(args.out, rows)
    print(f"planned {len(rows)} scenes to {args.out}")
    return 0


def _cmd_score(args: argparse.Namespace, cfg: dict) -> int:
    world = _section(cfg, "world")
    scfg = _section(cfg, "score")
    plans = [plan_from_dict(d) for d in read_jsonl(args.plans)]
    if not plans:
        raise ValueError(f"no plans in {args.plans}")
    scenes = {s.scene_id: s for s in read_corpus(args.corpus)}
    reports = []
    for plan, scene_id in plans:
        if scene_id not in scenes:
            raise ValueError(f"plan references scene {scene_id!r} not present in the corpus")
        reports.append(score_scene(plan.best_trajectory, scenes[scene_id], world, scfg))
    summary = summarize_reports(reports)
    write_report(args.out, summary)
    if args.csv is not None:
        _write_csv(args.csv, report_csv_rows(summary))
    print(f"scored {len(reports)} plans: pdms {summary['pdms']:.4f}, "
          f"avg_l2 {summary['avg_l2']:.4f}")
    return 0


def _cmd_replay(args: argparse.Namespace, cfg: dict) -> int:
    scfg = _section(cfg, "score")
    scenes = read_corpus(args.corpus)
    bank = read_anchor_bank(args.anchors)
    if args.baseline:
        world = _section(cfg, "world")
        summary = anchor_baseline_report(scenes, bank, world, scfg)
    else:
        if args.ckpt is None:
            raise ValueError("replay needs --ckpt (or --baseline for the anchor-only baseline)")
        planner = planner_from_checkpoint(args.ckpt)
        summary = replay_open_loop(planner, scenes, bank, scfg)
    write_report(args.out, summary)
    if args.csv is not None:
        _write_csv(args.csv, report_csv_rows(summary))
    print(f"replayed {summary['n_scenes']} scenes: pdms {summary['pdms']:.4f}")
    return 0


def _cmd_simulate(args: argparse.Namespace, cfg: dict) -> int:
    rcfg = _section(cfg, "run")
    scfg = _section(cfg, "score")
    if args.seed is not None:
        rcfg = dataclasses.replace(rcfg, seed=args.seed)
    planner = planner_from_checkpoint(args.ckpt)
    scenes = read_corpus(args.corpus)
    bank = read_anchor_bank(args.anchors)
    results = simulate_closed_loop(planner, scenes, bank, planner.world, rcfg, scfg)
    ds, sr = closed_loop_scores(results)
    payload = {
        "schema_version": SIMULATION_SCHEMA,
        "n_routes": len(results),
        "ds": ds,
        "sr": sr,
        "routes": [
            {
                "scene_id": scene.scene_id,
                "completion": r.completion,
                "success": r.success,
                "n_collisions": r.n_collisions,
                "n_offroad": r.n_offroad,
                "driving_score": r.driving_score,
            }
            for scene, r in zip(scenes, results)
        ],
    }
    write_json(args.out, payload)
    print(f"simulated {len(results)} routes: ds {ds:.2f}, sr {sr:.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorplan",
        description="Desk-scale anchored trajectory planning pipeline.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="JSON",
                        help="config file with world/model/train/score/run sections")
    common.add_argument("--seed", type=int, default=None,
                        help="seed override for the command's randomness")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic scene corpus")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--profiles", default=None,
                   help=f"comma-separated subset of {','.join(PROFILES)}")
    p.add_argument("--out", required=True, help="corpus JSONL path")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("cluster", parents=[common], help="cluster corpus futures into anchors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--modes", type=int, required=True, help="number of anchor modes")
    p.add_argument("--out", required=True, help="anchor JSON path")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("train", parents=[common], help="train a planner on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-step loss CSV path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("plan", parents=[common], help="plan one scene or a whole corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", default=None, help="single scene JSON path")
    src.add_argument("--corpus", default=None, help="corpus JSONL path")
    p.add_argument("--anchors", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["ar", "nar"], default=None,
                   help="assert the checkpoint's decode mode (errors on mismatch)")
    p.add_argument("--out", required=True, help="plan JSON (scene) or JSONL (corpus) path")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("score", parents=[common], help="score stored plans against a corpus")
    p.add_argument("--plans", required=True, help="plans JSONL path")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="flattened metric,value CSV path")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("replay", parents=[common], help="plan and score a corpus in one pass")
    p.add_argument("--corpus", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--baseline", action="store_true",
                   help="score the raw first anchor instead of a checkpoint")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="flattened metric,value CSV path")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("simulate", parents=[common], help="drive each scene closed-loop")
    p.add_argument("--corpus", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="simulation report JSON path")
    p.set_defaults(func=_cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
