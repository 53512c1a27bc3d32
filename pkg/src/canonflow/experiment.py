"""Rendering, evaluation and editing of trained runs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .pipeline import Dataset, SceneNormalization, TrackState, foreground_mask, space_carve, voxel_lookup
from .rendering import render_image

Tensor = torch.Tensor
log = logging.getLogger(__name__)


class RunView:
    """A trained state plus everything needed to render it in the unit-cube frame."""

    def __init__(self, state: TrackState, norm: SceneNormalization, dataset: Dataset):
        self.state, self.norm, self.dataset = state, norm, dataset
        self.cfg = state.cfg
        self.cameras = [norm.camera(c) for c in dataset.cameras]
        self._grids: dict[int, np.ndarray] = {}

    @property
    def timestamps(self) -> list[int]:
        return self.state.timestamps

    def pruning_grid(self, t: int) -> np.ndarray:
        if t not in self._grids:
            tc = self.cfg.train
            masks = [foreground_mask(self.dataset.image(t, c), self.cameras[c].background, tc.mask_threshold,
                                     tc.mask_dilation) for c in self.dataset.train]
            self._grids[t] = space_carve([self.cameras[c] for c in self.dataset.train], masks,
                                         tc.carve_resolution, tc.voxel_dilation)
        return self._grids[t]

    def keep_fn(self, t: int):
        if t == 1:
            return None
        grid = torch.from_numpy(self.pruning_grid(t))
        return lambda pts: voxel_lookup(grid, pts)

    def _check_t(self, t: int) -> None:
        if t not in self.timestamps:
            raise KeyError(f"timestamp {t} not available (have {self.timestamps[0]}..{self.timestamps[-1]})")

    def render(self, c: int, t: int, use_fine: bool = True, canonical=None, stride: int = 1):
        self._check_t(t)
        cfg = self.cfg
        q = self.state.query(t, use_fine, canonical)
        return render_image(self.cameras[c], q, cfg.render.samples, stride, self.state.vignetting,
                            cfg.render.vignette_mode, self.keep_fn(t))

    def warp(self, t: int, use_fine: bool = True):
        self._check_t(t)
        return self.state.warp(t, use_fine)

    def surface(self, c: int, t: int, use_fine: bool = True):
        return ev.surface_positions(self.cameras[c], self.warp(t, use_fine), self.state.canonical,
                                    self.cfg.render.samples, self.keep_fn(t))

    def correspondence(self, c: int, t: int, cube_size: int | None = None):
        return ev.correspondence_render(self.cameras[c], self.warp(t), self.state.canonical, self.cfg.render.samples,
                                        cube_size or self.cfg.eval.cube_size, self.keep_fn(t))

    def markers_unit(self) -> np.ndarray | None:
        """Ground-truth trajectories [T, J, 3] in the unit-cube frame."""
        if not self.dataset.markers:
            return None
        pos = np.stack([np.asarray(m["positions"], dtype=np.float64) for m in self.dataset.markers], axis=1)
        return self.norm.to_unit(pos)

    def track(self, use_fine: bool = True) -> ev.MarkerTrajectory:
        truth = self.markers_unit()
        if truth is None:
            raise FileNotFoundError("dataset has no markers")
        T = min(truth.shape[0], self.timestamps[-1])
        warps = {t: self.warp(t, use_fine) for t in range(2, T + 1)}
        e = self.cfg.eval
        return ev.track_markers(warps, truth[:T], e.inversion_resolution, e.inversion_side)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    mpjpe: float | None = None
    mpjpe_world: float | None = None

    def psnr_by_t(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["t"], []).append(r["psnr"])
        return {t: float(np.mean(v)) for t, v in out.items()}

    def write_csv(self, path: str | Path) -> None:
        keys = ["t", "camera", "psnr", "ssim", "psnr_masked", "ssim_masked"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind"] + keys + ["value"])
            for r in self.rows:
                w.writerow(["view"] + [_fmt(r[k]) for k in keys] + [""])
            for t, v in self.psnr_by_t().items():
                w.writerow(["mean_psnr", t, "", "", "", "", "", _fmt(v)])
            if self.mpjpe is not None:
                w.writerow(["mpjpe_unit", "", "", "", "", "", "", _fmt(self.mpjpe)])
                w.writerow(["mpjpe_world", "", "", "", "", "", "", _fmt(self.mpjpe_world)])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def evaluate_run(view: RunView, use_fine: bool = True, cameras: list[int] | None = None,
                 timestamps: list[int] | None = None, markers: bool = True) -> EvalReport:
    """Held-out view metrics (plain and masked) per timestamp, plus marker MPJPE."""
    cams = cameras if cameras is not None else list(view.dataset.test)
    ts = timestamps or view.timestamps
    e = view.cfg.eval
    report = EvalReport()
    for t in ts:
        for c in cams:
            pred, _ = view.render(c, t, use_fine)
            gt = view.dataset.image(t, c)
            bg = view.cameras[c].background
            mask = ev.eval_foreground_mask(gt, bg, e.mask_delta, e.mask_sigma, e.mask_opening, e.mask_dilation)
            pm, sm = ev.masked_metrics(pred, gt, mask, bg)
            report.rows.append({"t": t, "camera": c, "psnr": ev.psnr(pred, gt), "ssim": ev.ssim(pred, gt),
                                "psnr_masked": pm, "ssim_masked": sm})
    if markers:
        if view.markers_unit() is None:
            log.warning("markers.json missing; MPJPE omitted")
        elif len(view.timestamps) >= 2:
            traj = view.track(use_fine)
            report.mpjpe = ev.mpjpe(traj)
            report.mpjpe_world = report.mpjpe / view.norm.scale
    return report
