"""Command-line entry point: synth, train, render, eval and edit subcommands."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config, evaluation as ev, experiment, pipeline, scenesynth
from .checkpoint import CheckpointError
from .rendering import write_depth, write_rgb, write_rgba

log = logging.getLogger("canonflow")

PRESETS = {"rotation": scenesynth.rotation_scene, "static": scenesynth.static_scene,
           "translation": scenesynth.translation_scene}


class UsageError(Exception):
    """Bad input from the command line; reported with exit status 2."""


# ---------------------------------------------------------------- helpers

def _read_json(path: Path, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    return data


def scene_spec(data: dict) -> scenesynth.SyntheticSceneSpec:
    """A scene spec from JSON: either full fields, or ``preset`` plus field overrides."""
    data = dict(data)
    try:
        preset = data.pop("preset", None)
        if preset is None:
            return scenesynth.SyntheticSceneSpec.from_json(data)
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        spec = PRESETS[preset](int(data.pop("timestamps", 10)))
        rig = data.pop("rig", {})
        for k, v in rig.items():
            if not hasattr(spec.rig, k):
                raise UsageError(f"unknown rig key {k!r}")
            setattr(spec.rig, k, tuple(v) if isinstance(v, list) else v)
        for k, v in data.items():
            if k == "primitives" or not hasattr(spec, k):
                raise UsageError(f"unknown spec key {k!r}")
            setattr(spec, k, tuple(v) if isinstance(v, list) else v)
        return spec
    except (TypeError, KeyError, ValueError) as exc:
        raise UsageError(f"invalid scene spec: {exc}") from None


def run_config(args) -> config.RunConfig:
    if args.config is not None:
        cfg = config.load(args.config, args.profile)
    else:
        cfg = config.profile(args.profile or "desk")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return config.merge(cfg, overrides) if overrides else cfg


def _view(run_dir: Path, dataset_dir: Path | None = None) -> experiment.RunView:
    if not (run_dir / "run.json").exists():
        raise UsageError(f"{run_dir}: not a run directory (run.json missing)")
    state, norm, ds = pipeline.load_run(run_dir)
    if dataset_dir is not None:
        ds = pipeline.load_dataset(dataset_dir)
    return experiment.RunView(state, norm, ds)


def _check_target(view: experiment.RunView, camera: int, ts: list[int]) -> None:
    if not 0 <= camera < len(view.cameras):
        raise UsageError(f"camera {camera} outside 0..{len(view.cameras) - 1}")
    for t in ts:
        if t not in view.timestamps:
            raise UsageError(f"timestamp {t} not available (have {view.timestamps[0]}..{view.timestamps[-1]})")


def edit_from_json(data: dict, norm: pipeline.SceneNormalization | None = None) -> tuple[ev.Region, ev.Edit]:
    """Region and edit from JSON. Regions are in world units unless ``"frame": "unit"``."""
    try:
        r = data["region"]
        center = np.asarray(r["center"], dtype=np.float64)
        size = np.asarray(r["size"], dtype=np.float64)
        if size.size == 1:
            size = np.array([float(size.reshape(-1)[0]), 0.0, 0.0])
        if data.get("frame", "world") == "world":
            if norm is None:
                raise UsageError("world-frame edit needs a scene normalization")
            center, size = norm.to_unit(center), size * norm.scale
        region = ev.Region(r["kind"], tuple(float(v) for v in center), tuple(float(v) for v in size))
        e = data.get("edit", {})
        edit = ev.Edit(e.get("mode", "recolor"), tuple(e.get("color", (1.0, 0.0, 0.0))), float(e.get("alpha", 1.0)))
        if region.kind not in ("sphere", "box") or edit.mode not in ("recolor", "blend", "transparent"):
            raise UsageError(f"unsupported region {region.kind!r} or edit {edit.mode!r}")
        return region, edit
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid edit spec: {exc}") from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    spec = scene_spec(_read_json(args.spec, "spec file"))
    seed = args.seed if args.seed is not None else 0
    scenesynth.generate(spec, args.out, seed=seed)
    print(args.out / "scene.json")
    return 0


def cmd_train(args) -> int:
    cfg = run_config(args)
    torch.set_num_threads(cfg.threads)
    ds = pipeline.load_dataset(args.dataset)
    state = pipeline.run_sequence(ds, cfg, args.out, resume=args.resume, stop_after=args.stop_after)
    config.save(cfg, args.out / "config.json")
    print(f"trained t=1..{state.timestamps[-1]}; canonical checksum {state.canonical_checksum()}")
    return 0


def cmd_render(args) -> int:
    view = _view(args.run)
    _check_target(view, args.camera, [args.t])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "rgb":
        rgb, _ = view.render(args.camera, args.t, stride=args.stride)
        write_rgb(args.out, rgb)
    elif args.mode == "depth":
        _, depth = view.render(args.camera, args.t, stride=args.stride)
        write_depth(args.out, depth)
    else:
        rgb, alpha = view.correspondence(args.camera, args.t)
        write_rgba(args.out, rgb, alpha)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    view = _view(args.run, args.dataset)
    if view.markers_unit() is None:
        log.warning("markers.json missing; MPJPE omitted")
    report = experiment.evaluate_run(view, use_fine=not args.no_fine, cameras=args.cameras)
    out = args.out or args.run / "eval.csv"
    report.write_csv(out)
    for t, v in report.psnr_by_t().items():
        print(f"t={t} psnr={v:.3f}")
    if report.mpjpe is not None:
        print(f"mpjpe={report.mpjpe:.6f} (unit cube) {report.mpjpe_world:.6f} (world)")
    return 0


def cmd_edit(args) -> int:
    view = _view(args.run)
    ts = args.t or view.timestamps
    _check_target(view, args.camera, ts)
    region, edit = edit_from_json(_read_json(args.edit, "edit spec"), view.norm)
    edited = ev.edit_canonical(view.state.canonical, region, edit)
    for t in ts:
        rgb, _ = view.render(args.camera, t, canonical=edited, stride=args.stride)
        path = args.out / f"edit_cam{args.camera}_t{t}.png"
        write_rgb(path, rgb)
        print(path)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config, layered over its profile")
    common.add_argument("--profile", choices=sorted(config.PROFILES), help="default profile (desk)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="torch/numba thread cap")
    ap = argparse.ArgumentParser(prog="canonflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("spec", type=Path, help="scene spec JSON")
    p.add_argument("out", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="canonical model then frame-wise tracking")
    p.add_argument("dataset", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--resume", action="store_true", help="continue after the last finalized checkpoint")
    p.add_argument("--stop-after", type=int, help="stop once this timestamp is finalized")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render one view of a trained run")
    p.add_argument("run", type=Path)
    p.add_argument("--camera", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--mode", choices=["rgb", "depth", "correspondence"], default="rgb")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="held-out PSNR/SSIM and marker MPJPE")
    p.add_argument("run", type=Path)
    p.add_argument("--dataset", type=Path, help="dataset directory (default: the one trained on)")
    p.add_argument("--cameras", type=int, nargs="*", help="camera ids (default: held-out cameras)")
    p.add_argument("--no-fine", action="store_true", help="evaluate with coarse deformations only")
    p.add_argument("--out", type=Path, help="report CSV (default: RUN/eval.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", parents=[common], help="render a canonical-space edit")
    p.add_argument("run", type=Path)
    p.add_argument("edit", type=Path, help="edit spec JSON")
    p.add_argument("--camera", type=int, required=True)
    p.add_argument("--t", type=int, nargs="*", help="timestamps (default: all)")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_edit)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("SNFK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, config.ConfigError, pipeline.DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
