"""Dataset I/O, scene normalization, carving, batching, and the training phases.

Everything downstream of ``normalize_scene`` works in the normalized unit
cube: cameras are re-expressed there and all fields are queried there.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import checkpoint
from .autodiff import gradient, vjp_with_output
from .config import RunConfig
from .fields import CanonicalModel, DeformationField, parameter_checksum
from .losses import (loss_canon, loss_norm_weighted, loss_rec, loss_time, random_unit_vectors,
                     smoothness_weights)
from .optim import LazyAdamW, LrSchedule, ParamGroup
from .rendering import (Camera, Rays, SampleSet, composite_background, generate_rays, pixel_grid, read_rgb,
                        render_ray, sample_points, stratified_samples, vignette, vignette_radius)

Tensor = torch.Tensor
log = logging.getLogger(__name__)

METRIC_FIELDS = ["t", "phase", "iter", "total", "rec", "back", "hard", "norm_coarse", "norm_fine", "lr", "kept"]


class DatasetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    train: list[int]
    test: list[int]
    timestamps: int
    image_pattern: str = "images/t{t}/cam_{c}.png"
    markers: list[dict] | None = None
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def image(self, t: int, c: int) -> np.ndarray:
        if not 1 <= t <= self.timestamps:
            raise DatasetError(f"timestamp {t} outside 1..{self.timestamps}")
        key = (t, c)
        if key not in self._cache:
            path = self.root / self.image_pattern.format(t=t, c=c)
            img = read_rgb(path)
            cam = self.cameras[c]
            if img.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"{path}: size {img.shape[:2]} does not match camera {c}")
            self._cache[key] = img
        return self._cache[key]


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    try:
        scene = json.loads((root / "scene.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: scene.json not found") from None
    bg_pattern = scene.get("backgrounds", "background/cam_{c}.png")
    cams = []
    for c, d in enumerate(scene["cameras"]):
        try:
            bg = read_rgb(root / bg_pattern.format(c=c))
            cams.append(Camera.from_json(d, background=bg))
        except (ValueError, KeyError, FileNotFoundError) as exc:
            raise DatasetError(f"camera {c} ({d.get('name', '')}): {exc}") from exc
    markers = None
    mpath = root / scene.get("markers", "markers.json")
    if mpath.exists():
        markers = json.loads(mpath.read_text())
    n = len(cams)
    train = scene.get("train_cameras", list(range(n)))
    test = scene.get("test_cameras", [])
    return Dataset(root=root, cameras=cams, train=train, test=test, timestamps=int(scene["timestamps"]),
                   image_pattern=scene.get("images", "images/t{t}/cam_{c}.png"), markers=markers, meta=scene)


# ---------------------------------------------------------------- normalization

@dataclass
class SceneNormalization:
    box_min: np.ndarray
    box_max: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)

    @property
    def scale(self) -> float:
        return 1.0 / float(np.max(self.box_max - self.box_min))

    def to_unit(self, x):
        if isinstance(x, Tensor):
            return (x - torch.as_tensor(self.center, dtype=x.dtype)) * self.scale + 0.5
        return (np.asarray(x) - self.center) * self.scale + 0.5

    def from_unit(self, x):
        if isinstance(x, Tensor):
            return (x - 0.5) / self.scale + torch.as_tensor(self.center, dtype=x.dtype)
        return (np.asarray(x) - 0.5) / self.scale + self.center

    def camera(self, cam: Camera) -> Camera:
        c = self.to_unit(cam.center)
        return Camera(rotation=cam.rotation, translation=-cam.rotation @ c, fx=cam.fx, fy=cam.fy, cx=cam.cx,
                      cy=cam.cy, width=cam.width, height=cam.height, near=cam.near * self.scale,
                      far=cam.far * self.scale, background=cam.background, name=cam.name)

    def to_json(self) -> dict:
        return {"box_min": self.box_min.tolist(), "box_max": self.box_max.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SceneNormalization":
        return cls(np.array(d["box_min"], dtype=np.float64), np.array(d["box_max"], dtype=np.float64))


def normalize_scene(cameras: list[Camera]) -> SceneNormalization:
    """Tight box around every near- and far-plane point of every pixel ray."""
    if not cameras:
        raise ValueError("need at least one camera")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    with torch.no_grad():
        for cam in cameras:
            rows, cols = pixel_grid(cam)
            rays = generate_rays(cam, rows, cols)
            o = rays.origins.double().numpy()
            d = rays.directions.double().numpy()
            for s in (cam.near, cam.far):
                p = o + s * d
                lo = np.minimum(lo, p.min(0))
                hi = np.maximum(hi, p.max(0))
    return SceneNormalization(lo, hi)


# ---------------------------------------------------------------- masks and carving

def _square(r: int, ndim: int) -> np.ndarray:
    return np.ones((2 * r + 1,) * ndim, dtype=bool)


def foreground_mask(image: np.ndarray, background: np.ndarray, threshold: float, dilation: int = 0) -> np.ndarray:
    if image.shape != background.shape:
        raise ValueError(f"image {image.shape} vs background {background.shape}")
    m = np.abs(image - background).max(-1) > threshold
    if dilation > 0:
        m = ndimage.binary_dilation(m, structure=_square(dilation, 2))
    return m


def voxel_centers(resolution: int) -> np.ndarray:
    c = (np.arange(resolution) + 0.5) / resolution
    g = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1)
    return g.reshape(-1, 3)


def project_to_pixels(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(row, col, visible) of the pixel whose square contains each projected point."""
    uv, z = cam.project(points)
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0] + 0.5)
        row = np.floor(uv[:, 1] + 0.5)
        vis = (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    col = np.where(vis, col, 0).astype(np.int64)
    row = np.where(vis, row, 0).astype(np.int64)
    return row, col, vis


def space_carve(cameras: list[Camera], masks: list[np.ndarray], resolution: int, dilation: int = 0) -> np.ndarray:
    """Boolean grid [G, G, G] (x, y, z index order) over the unit cube; cameras in unit-cube frame."""
    pts = voxel_centers(resolution)
    occ = np.ones(len(pts), dtype=bool)
    for cam, mask in zip(cameras, masks):
        row, col, vis = project_to_pixels(cam, pts)
        occ &= ~vis | mask[row, col]
    grid = occ.reshape(resolution, resolution, resolution)
    if dilation > 0:
        grid = ndimage.binary_dilation(grid, structure=_square(dilation, 3))
    return grid


def voxel_lookup(grid: np.ndarray | Tensor, points: Tensor) -> Tensor:
    g = torch.as_tensor(grid)
    G = g.shape[0]
    idx = (points.detach() * G).floor().long().clamp(0, G - 1)
    return g[idx[..., 0], idx[..., 1], idx[..., 2]]


def prune_samples(points: Tensor, grid: np.ndarray | Tensor) -> Tensor:
    return voxel_lookup(grid, points)


# ---------------------------------------------------------------- batching

def _pick(counts: Tensor, offsets: Tensor, pool: Tensor, n: int, gen: torch.Generator) -> tuple[Tensor, Tensor]:
    cams = (counts > 0).nonzero().squeeze(-1)
    cam = cams[torch.randint(len(cams), (n,), generator=gen)]
    k = (torch.rand(n, generator=gen, dtype=torch.float64) * counts[cam]).long()
    k = torch.minimum(k, counts[cam] - 1)
    return cam, pool[offsets[cam] + k]


def sample_batch(masks: Tensor, R: int, gen: torch.Generator, fg_fraction: float = 0.8) -> tuple[Tensor, Tensor]:
    """(camera index, flat pixel index) for R rays; floor(fg_fraction * R) from the foreground.

    Each ray picks a camera uniformly among those with pixels of its class,
    then a pixel uniformly within that camera's class.
    """
    C, P = masks.shape
    fg_counts = masks.sum(-1)
    bg_counts = P - fg_counts
    n_fg = int(math.floor(fg_fraction * R)) if fg_counts.sum() > 0 else 0
    if bg_counts.sum() == 0:
        n_fg = R
    order = torch.argsort((~masks).to(torch.int8), dim=-1, stable=True)  # foreground first per camera
    flat = order + torch.arange(C).unsqueeze(-1) * P
    # foreground pool: first fg_counts entries of each row; background: the rest
    fg_off = torch.arange(C) * P
    cam_f, pix_f = _pick(fg_counts, fg_off, flat.reshape(-1), n_fg, gen) if n_fg else (torch.empty(0, dtype=torch.long),) * 2
    cam_b, pix_b = _pick(bg_counts, fg_off + fg_counts, flat.reshape(-1), R - n_fg, gen) if R - n_fg else (torch.empty(0, dtype=torch.long),) * 2
    cam = torch.cat([cam_f, cam_b])
    pix = torch.cat([pix_f, pix_b]) - cam * P
    return cam, pix


# ---------------------------------------------------------------- training problem

class Problem:
    """Training views of one sequence, in the unit-cube frame, as flat tensors."""

    def __init__(self, dataset: Dataset, cfg: RunConfig, norm: SceneNormalization | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.norm = norm or normalize_scene(dataset.cameras)
        self.cameras = [self.norm.camera(c) for c in dataset.cameras]
        self.train = list(dataset.train)
        dtype = torch.get_default_dtype()
        o, d, bg, rows, cols = [], [], [], [], []
        for c in self.train:
            cam = self.cameras[c]
            r, cc = pixel_grid(cam)
            rays = generate_rays(cam, r, cc)
            o.append(rays.origins)
            d.append(rays.directions)
            bg.append(torch.as_tensor(cam.background.reshape(-1, 3), dtype=dtype))
            rows.append(r)
            cols.append(cc)
        self.origins, self.dirs, self.bg = torch.stack(o), torch.stack(d), torch.stack(bg)
        self.rows, self.cols = torch.stack(rows), torch.stack(cols)
        self.near = torch.tensor([self.cameras[c].near for c in self.train], dtype=dtype)
        self.far = torch.tensor([self.cameras[c].far for c in self.train], dtype=dtype)
        self._images: dict[int, Tensor] = {}
        self._masks: dict[int, Tensor] = {}
        self._grids: dict[int, np.ndarray] = {}

    def images(self, t: int) -> Tensor:
        if t not in self._images:
            dtype = torch.get_default_dtype()
            self._images[t] = torch.stack([torch.as_tensor(self.dataset.image(t, c).reshape(-1, 3), dtype=dtype)
                                           for c in self.train])
        return self._images[t]

    def mask_images(self, t: int) -> list[np.ndarray]:
        tc = self.cfg.train
        return [foreground_mask(self.dataset.image(t, c), self.cameras[c].background, tc.mask_threshold,
                                tc.mask_dilation) for c in self.train]

    def masks(self, t: int) -> Tensor:
        if t not in self._masks:
            self._masks[t] = torch.from_numpy(np.stack([m.reshape(-1) for m in self.mask_images(t)]))
        return self._masks[t]

    def pruning_grid(self, t: int) -> np.ndarray:
        if t not in self._grids:
            tc = self.cfg.train
            self._grids[t] = space_carve([self.cameras[c] for c in self.train], self.mask_images(t),
                                         tc.carve_resolution, tc.voxel_dilation)
        return self._grids[t]

    def batch(self, t: int, gen: torch.Generator) -> tuple[Rays, Tensor, Tensor]:
        """Rays, target colors, background colors."""
        cam, pix = sample_batch(self.masks(t), self.cfg.train.rays, gen, self.cfg.train.foreground_fraction)
        rays = Rays(origins=self.origins[cam, pix], directions=self.dirs[cam, pix], rows=self.rows[cam, pix],
                    cols=self.cols[cam, pix], camera_ids=torch.as_tensor(self.train)[cam],
                    near=self.near[cam], far=self.far[cam])
        return rays, self.images(t)[cam, pix], self.bg[cam, pix]


# ---------------------------------------------------------------- state

class TrackState(nn.Module):
    """Frozen canonical model and vignetting plus one coarse/fine pair per finished timestamp."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.canonical = CanonicalModel(cfg.model.canonical_grid, cfg.model.hidden, cfg.model.feature_dim)
        self.vignetting = nn.Parameter(torch.zeros(3))
        self.coarse = nn.ModuleDict()
        self.fine = nn.ModuleDict()
        torch.manual_seed(cfg.seed + 1)
        self.coarse["1"] = DeformationField(cfg.model.coarse, cfg.model.hidden, "coarse")
        torch.manual_seed(cfg.seed + 2)
        self.fine["1"] = DeformationField(cfg.model.deformation_grid, cfg.model.hidden, "fine")

    @property
    def timestamps(self) -> list[int]:
        return sorted(int(k) for k in self.fine.keys())

    def fields(self, t: int) -> tuple[DeformationField, DeformationField]:
        return self.coarse[str(t)], self.fine[str(t)]

    def query(self, t: int, use_fine: bool = True, canonical=None) -> Callable[[Tensor], tuple[Tensor, Tensor]]:
        coarse, fine = self.fields(t)
        model = canonical if canonical is not None else self.canonical

        def q(x: Tensor):
            x = coarse(x)
            if use_fine:
                x = fine(x)
            return model(x)
        return q

    def warp(self, t: int, use_fine: bool = True) -> Callable[[Tensor], Tensor]:
        coarse, fine = self.fields(t)
        return (lambda x: fine(coarse(x))) if use_fine else coarse

    def canonical_checksum(self) -> str:
        return parameter_checksum(self.canonical) + parameter_checksum(_Wrap(self.vignetting))


class _Wrap(nn.Module):
    def __init__(self, p):
        super().__init__()
        self.p = p


def _named(module: nn.Module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _freeze(module: nn.Module | Tensor, frozen: bool = True) -> None:
    params = [module] if isinstance(module, Tensor) else list(module.parameters())
    for p in params:
        p.requires_grad_(not frozen)


# ---------------------------------------------------------------- forward passes

@dataclass
class TrackOutput:
    color: Tensor
    weights: Tensor
    norm_coarse: Tensor | None
    norm_fine: Tensor | None
    kept: float


def _scatter(idx: Tensor, values: Tensor, n: int, S: int) -> Tensor:
    shape = (n * S,) + tuple(values.shape[1:])
    return torch.zeros(shape, dtype=values.dtype).index_put((idx,), values).reshape((n, S) + tuple(values.shape[1:]))


def render_tracked(state: TrackState, rays: Rays, samples: SampleSet, backgrounds: Tensor, cameras: list[Camera],
                   coarse: DeformationField, fine: DeformationField | None, train_coarse: bool, train_fine: bool,
                   gen: torch.Generator | None, canonical=None) -> TrackOutput:
    """Render through d_f(d_c(x)) and compute the weighted norm losses of the trained fields."""
    cfg = state.cfg
    n, S = samples.depths.shape
    pts = sample_points(rays, samples).reshape(-1, 3)
    keep = samples.keep
    idx = keep.reshape(-1).nonzero().squeeze(-1) if keep is not None else torch.arange(n * S)
    x = pts.index_select(0, idx)
    m = x.shape[0]
    res_c = res_f = None
    if train_coarse:
        x1, jte = vjp_with_output(coarse, x, random_unit_vectors(m, gen, x.dtype))
        res_c = (jte.norm(dim=-1) - 1.0).abs()
    else:
        with torch.no_grad():
            x1 = coarse(x)
    off_c = x1 - x
    if fine is None:
        x2 = x1
        off_f = None
    elif train_fine:
        x2, jte = vjp_with_output(fine, x1, random_unit_vectors(m, gen, x.dtype))
        res_f = (jte.norm(dim=-1) - 1.0).abs()
        off_f = x2 - x1
    else:
        with torch.no_grad():
            x2 = fine(x1)
        off_f = x2 - x1
    model = canonical if canonical is not None else state.canonical
    sigma_k, rgb_k = model(x2)
    sigma = _scatter(idx, sigma_k, n, S)
    rgb = _scatter(idx, rgb_k, n, S)
    color, weights, leftover = render_ray(sigma, rgb, samples.deltas, keep)
    cx = torch.tensor([c.cx for c in cameras], dtype=color.dtype)[rays.camera_ids]
    cy = torch.tensor([c.cy for c in cameras], dtype=color.dtype)[rays.camera_ids]
    w = torch.tensor([float(c.width) for c in cameras], dtype=color.dtype)[rays.camera_ids]
    p = vignette_radius(rays.rows, rays.cols, cx, cy, w, cfg.render.vignette_mode)
    color = composite_background(vignette(color, p, state.vignetting), leftover, backgrounds)
    lw = cfg.losses
    norm_c = norm_f = None
    if res_c is not None:
        sw = smoothness_weights(sigma, samples.deltas, _scatter(idx, off_c, n, S), lw)
        norm_c = loss_norm_weighted(_scatter(idx, res_c, n, S), sw)
    if res_f is not None:
        sw = smoothness_weights(sigma, samples.deltas, _scatter(idx, off_f, n, S), lw)
        norm_f = loss_norm_weighted(_scatter(idx, res_f, n, S), sw)
    return TrackOutput(color, weights, norm_c, norm_f, m / float(n * S))


def render_canonical_batch(state: TrackState, rays: Rays, samples: SampleSet, backgrounds: Tensor,
                           cameras: list[Camera]) -> tuple[Tensor, Tensor]:
    pts = sample_points(rays, samples)
    n, S = samples.depths.shape
    sigma, rgb = state.canonical(pts.reshape(-1, 3))
    color, weights, leftover = render_ray(sigma.reshape(n, S), rgb.reshape(n, S, 3), samples.deltas)
    cx = torch.tensor([c.cx for c in cameras], dtype=color.dtype)[rays.camera_ids]
    cy = torch.tensor([c.cy for c in cameras], dtype=color.dtype)[rays.camera_ids]
    w = torch.tensor([float(c.width) for c in cameras], dtype=color.dtype)[rays.camera_ids]
    p = vignette_radius(rays.rows, rays.cols, cx, cy, w, state.cfg.render.vignette_mode)
    return composite_background(vignette(color, p, state.vignetting), leftover, backgrounds), weights


# ---------------------------------------------------------------- phases

class MetricsLog:
    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[dict] = []

    def add(self, **row) -> None:
        row = {k: float(v.detach()) if isinstance(v, torch.Tensor) else v for k, v in row.items()}
        self.rows.append({k: row.get(k, "") for k in METRIC_FIELDS})

    def flush(self) -> None:
        """Append buffered rows; called once a phase is finalized so reruns never duplicate rows."""
        if self.path is None or not self.rows:
            self.rows = []
            return
        new = not self.path.exists()
        with self.path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
        self.rows = []


def _check_finite(value: Tensor, where: str) -> None:
    if not torch.isfinite(value):
        raise DivergenceError(f"non-finite loss during {where}")


def _generator(seed: int, *keys: int) -> torch.Generator:
    g = torch.Generator()
    s = seed
    for k in keys:
        s = s * 1000003 + k
    return g.manual_seed(s % (2**63))


def fit_canonical(problem: Problem, state: TrackState, metrics: MetricsLog | None = None) -> dict[str, Tensor]:
    """Optimize the canonical model and vignetting on t=1; returns the optimizer state."""
    cfg = state.cfg
    oc, tc = cfg.optim, cfg.train
    _freeze(state.canonical, False)
    _freeze(state.vignetting, False)
    params = _named(state.canonical, "canonical")
    params["vignetting"] = state.vignetting
    groups = {k: ParamGroup(oc.canonical_lr, oc.weight_decay) for k in params}
    groups["vignetting"] = ParamGroup(oc.vignetting_lr, 0.0)
    opt = LazyAdamW(params, groups, (oc.beta1, oc.beta2), oc.eps)
    sched = LrSchedule(oc.canonical_lr, oc.canonical_decay, max(tc.canonical_iters, 1), oc.warmup_iters,
                       oc.warmup_start)
    gen = _generator(cfg.seed, 1, 0)
    S = cfg.render.samples
    for it in range(tc.canonical_iters):
        rays, target, bg = problem.batch(1, gen)
        samples = stratified_samples(rays.near, rays.far, S, gen)
        color, weights = render_canonical_batch(state, rays, samples, bg, problem.cameras)
        losses = loss_canon(color, target, weights, cfg.losses)
        _check_finite(losses["total"], "canonical construction")
        grads = gradient(losses["total"], params)
        scale = sched(it) / oc.canonical_lr
        opt.step(grads, lr_scale=scale)
        if metrics is not None and (it % tc.log_every == 0 or it == tc.canonical_iters - 1):
            metrics.add(t=1, phase="canonical", iter=it, total=losses["total"], rec=losses["rec"],
                        back=losses["back"], hard=losses["hard"], lr=sched(it), kept=1.0)
    _freeze(state.canonical)
    _freeze(state.vignetting)
    return opt.state_tensors()


def _deformation_phase(problem: Problem, state: TrackState, t: int, phase: str, coarse: DeformationField,
                       fine: DeformationField, metrics: MetricsLog | None) -> dict[str, Tensor]:
    cfg = state.cfg
    oc, tc = cfg.optim, cfg.train
    iters = tc.coarse_iters if phase == "coarse" else tc.fine_iters
    trained = coarse if phase == "coarse" else fine
    _freeze(coarse, phase != "coarse")
    if fine is not None:
        _freeze(fine, phase != "fine")
    params = _named(trained, phase)
    opt = LazyAdamW(params, {}, (oc.beta1, oc.beta2), oc.eps, ParamGroup(oc.deformation_lr, oc.weight_decay))
    sched = LrSchedule(oc.deformation_lr, oc.deformation_decay, max(iters, 1))
    gen = _generator(cfg.seed, t, 1 if phase == "coarse" else 2)
    grid = problem.pruning_grid(t)
    S = cfg.render.samples
    for it in range(iters):
        rays, target, bg = problem.batch(t, gen)
        samples = stratified_samples(rays.near, rays.far, S, gen)
        samples.keep = prune_samples(sample_points(rays, samples), grid)
        out = render_tracked(state, rays, samples, bg, problem.cameras, coarse,
                             fine if phase == "fine" else None, phase == "coarse", phase == "fine", gen)
        rec = loss_rec(out.color, target)
        total = loss_time(rec, out.norm_coarse, out.norm_fine, cfg.losses)
        _check_finite(total, f"t={t} {phase}")
        grads = gradient(total, params)
        opt.step(grads, lr_scale=sched(it) / oc.deformation_lr)
        if metrics is not None and (it % tc.log_every == 0 or it == iters - 1):
            metrics.add(t=t, phase=phase, iter=it, total=total, rec=rec,
                        norm_coarse=out.norm_coarse if out.norm_coarse is not None else "",
                        norm_fine=out.norm_fine if out.norm_fine is not None else "",
                        lr=sched(it), kept=out.kept)
    _freeze(trained)
    return opt.state_tensors()


def track_timestep(problem: Problem, state: TrackState, t: int, metrics: MetricsLog | None = None,
                   ckpt_dir: Path | None = None, skip_coarse: bool = False) -> None:
    """Coarse then fine phase for timestamp t, warm-started from t-1."""
    if t < 2:
        raise ValueError("tracking starts at t=2")
    prev_c, prev_f = state.fields(t - 1)
    if skip_coarse:
        coarse = state.coarse[str(t)]
    else:
        coarse = copy.deepcopy(prev_c)
        opt_state = _deformation_phase(problem, state, t, "coarse", coarse, None, metrics)
        state.coarse[str(t)] = coarse
        if ckpt_dir is not None:
            save_field(ckpt_dir / f"t{t}_coarse.bin", coarse, opt_state, state.cfg.precision)
        if metrics is not None:
            metrics.flush()
    fine = copy.deepcopy(prev_f)
    if state.cfg.train.fine_iters > 0:
        opt_state = _deformation_phase(problem, state, t, "fine", coarse, fine, metrics)
    else:
        opt_state = {}
    state.fine[str(t)] = fine
    if ckpt_dir is not None:
        save_field(ckpt_dir / f"t{t}_fine.bin", fine, opt_state, state.cfg.precision)
    if metrics is not None:
        metrics.flush()


def fit_joint(problem: Problem, state: TrackState, metrics: MetricsLog | None = None) -> None:
    """Offline variant: canonical model and every timestamp's fields optimized together.

    Each iteration draws one timestamp; the total iteration budget equals the
    online schedule's.
    """
    cfg = state.cfg
    oc, tc = cfg.optim, cfg.train
    T = problem.dataset.timestamps
    for t in range(2, T + 1):
        torch.manual_seed(cfg.seed + 10 * t)
        state.coarse[str(t)] = DeformationField(cfg.model.coarse, cfg.model.hidden, "coarse")
        state.fine[str(t)] = DeformationField(cfg.model.deformation_grid, cfg.model.hidden, "fine")
    total_iters = tc.canonical_iters + (T - 1) * (tc.coarse_iters + tc.fine_iters)
    params = _named(state.canonical, "canonical")
    params["vignetting"] = state.vignetting
    groups = {k: ParamGroup(oc.canonical_lr, oc.weight_decay) for k in params}
    groups["vignetting"] = ParamGroup(oc.vignetting_lr, 0.0)
    for t in range(2, T + 1):
        c, f = state.fields(t)
        for k, p in {**_named(c, f"coarse{t}"), **_named(f, f"fine{t}")}.items():
            params[k] = p
            groups[k] = ParamGroup(oc.deformation_lr, oc.weight_decay)
    for p in params.values():
        p.requires_grad_(True)
    opt = LazyAdamW(params, groups, (oc.beta1, oc.beta2), oc.eps)
    canon_sched = LrSchedule(1.0, oc.canonical_decay, total_iters, oc.warmup_iters, oc.warmup_start)
    def_sched = LrSchedule(1.0, oc.deformation_decay, total_iters)
    gen = _generator(cfg.seed, 0, 9)
    S = cfg.render.samples
    for it in range(total_iters):
        t = int(torch.randint(1, T + 1, (1,), generator=gen))
        rays, target, bg = problem.batch(t, gen)
        samples = stratified_samples(rays.near, rays.far, S, gen)
        if t == 1:
            color, weights = render_canonical_batch(state, rays, samples, bg, problem.cameras)
            losses = loss_canon(color, target, weights, cfg.losses)
            total, rec, nc, nf = losses["total"], losses["rec"], None, None
        else:
            samples.keep = prune_samples(sample_points(rays, samples), problem.pruning_grid(t))
            c, f = state.fields(t)
            out = render_tracked(state, rays, samples, bg, problem.cameras, c, f, True, True, gen)
            rec = loss_rec(out.color, target)
            nc, nf = out.norm_coarse, out.norm_fine
            total = loss_time(rec, nc, nf, cfg.losses)
        _check_finite(total, "joint optimization")
        grads = gradient(total, params)
        scales = {}
        for k in params:
            scales[k] = canon_sched(it) if (k.startswith("canonical") or k == "vignetting") else def_sched(it)
        opt.step(grads, lr_scale=scales)
        if metrics is not None and (it % tc.log_every == 0 or it == total_iters - 1):
            metrics.add(t=t, phase="joint", iter=it, total=total, rec=rec,
                        norm_coarse=nc if nc is not None else "", norm_fine=nf if nf is not None else "",
                        lr=canon_sched(it) * oc.canonical_lr, kept="")
    for p in params.values():
        p.requires_grad_(False)
    if metrics is not None:
        metrics.flush()


# ---------------------------------------------------------------- checkpoints and the full run

def save_field(path: Path, field_: DeformationField, opt_state: dict[str, Tensor], precision: str) -> None:
    tensors = checkpoint.module_tensors(field_, "field.")
    tensors.update({f"optim.{k}": v for k, v in opt_state.items()})
    checkpoint.save(path, tensors, precision)


def load_field(path: Path, field_: DeformationField) -> None:
    checkpoint.load_module(field_, checkpoint.load(path), "field.")


def save_canonical(path: Path, state: TrackState, opt_state: dict[str, Tensor]) -> None:
    tensors = checkpoint.module_tensors(state.canonical, "canonical.")
    tensors["vignetting"] = state.vignetting.detach()
    tensors.update(checkpoint.module_tensors(state.coarse["1"], "coarse1."))
    tensors.update(checkpoint.module_tensors(state.fine["1"], "fine1."))
    tensors.update({f"optim.{k}": v for k, v in opt_state.items()})
    checkpoint.save(path, tensors, state.cfg.precision)


def load_canonical(path: Path, state: TrackState) -> None:
    tensors = checkpoint.load(path)
    checkpoint.load_module(state.canonical, tensors, "canonical.")
    checkpoint.load_module(state.coarse["1"], tensors, "coarse1.")
    checkpoint.load_module(state.fine["1"], tensors, "fine1.")
    with torch.no_grad():
        state.vignetting.copy_(tensors["vignetting"])
    _freeze(state.canonical)
    _freeze(state.vignetting)


def run_sequence(dataset: Dataset, cfg: RunConfig, out_dir: str | Path | None = None, resume: bool = False,
                 stop_after: int | None = None) -> TrackState:
    """Canonical construction at t=1, then frame-wise tracking for t=2..T.

    With ``resume`` the finalized checkpoints under ``out_dir/ckpt`` are
    loaded and work continues after the last finalized phase. ``stop_after``
    ends the run once that timestamp is finalized (used to test resuming).
    """
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "ckpt" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt.mkdir(exist_ok=True)
        if not resume:
            for p in list(ckpt.glob("*.bin")) + [out / "metrics.csv", out / "checksums.json"]:
                if p.exists():
                    p.unlink()
    problem = Problem(dataset, cfg)
    if out is not None:
        save_run_info(out, cfg, problem.norm, dataset)
    metrics = MetricsLog(out / "metrics.csv" if out is not None else None)
    state = TrackState(cfg)
    t0 = time.time()
    if not cfg.train.online:
        fit_joint(problem, state, metrics)
        if ckpt is not None:
            save_canonical(ckpt / "canonical.bin", state, {})
            for t in range(2, dataset.timestamps + 1):
                c, f = state.fields(t)
                save_field(ckpt / f"t{t}_coarse.bin", c, {}, cfg.precision)
                save_field(ckpt / f"t{t}_fine.bin", f, {}, cfg.precision)
        return state
    if resume and ckpt is not None and (ckpt / "canonical.bin").exists():
        load_canonical(ckpt / "canonical.bin", state)
        log.info("resumed canonical model")
    else:
        opt_state = fit_canonical(problem, state, metrics)
        if ckpt is not None:
            save_canonical(ckpt / "canonical.bin", state, opt_state)
        metrics.flush()
        log.info("canonical model done in %.1fs", time.time() - t0)
    if out is not None:
        _record_checksum(out, 1, state)
    if stop_after == 1:
        return state
    for t in range(2, dataset.timestamps + 1):
        done_c = resume and ckpt is not None and (ckpt / f"t{t}_coarse.bin").exists()
        done_f = resume and ckpt is not None and (ckpt / f"t{t}_fine.bin").exists()
        if done_c:
            c = copy.deepcopy(state.coarse[str(t - 1)])
            load_field(ckpt / f"t{t}_coarse.bin", c)
            state.coarse[str(t)] = c
        if done_c and done_f:
            f = copy.deepcopy(state.fine[str(t - 1)])
            load_field(ckpt / f"t{t}_fine.bin", f)
            state.fine[str(t)] = f
            continue
        track_timestep(problem, state, t, metrics, ckpt, skip_coarse=done_c)
        log.info("t=%d done at %.1fs", t, time.time() - t0)
        if out is not None:
            _record_checksum(out, t, state)
        if stop_after == t:
            break
    return state


def _record_checksum(out: Path, t: int, state: TrackState) -> None:
    """Canonical checksum after each finalized timestamp, in checksums.json."""
    path = out / "checksums.json"
    sums = json.loads(path.read_text()) if path.exists() else {}
    sums[str(t)] = state.canonical_checksum()
    path.write_text(json.dumps(sums, indent=1))


def save_run_info(out: Path, cfg: RunConfig, norm: SceneNormalization, dataset: Dataset) -> None:
    from .config import to_dict
    info = {"config": to_dict(cfg), "normalization": norm.to_json(), "dataset": str(dataset.root.resolve()),
            "timestamps": dataset.timestamps}
    (out / "run.json").write_text(json.dumps(info, indent=1))


def load_run(out_dir: str | Path) -> tuple[TrackState, SceneNormalization, Dataset]:
    """Rebuild a state from a run directory's checkpoints."""
    from .config import from_dict
    out = Path(out_dir)
    info = json.loads((out / "run.json").read_text())
    cfg = from_dict(info["config"])
    dataset = load_dataset(info["dataset"])
    state = TrackState(cfg)
    load_canonical(out / "ckpt" / "canonical.bin", state)
    for t in range(2, info["timestamps"] + 1):
        cp, fp = out / "ckpt" / f"t{t}_coarse.bin", out / "ckpt" / f"t{t}_fine.bin"
        if not (cp.exists() and fp.exists()):
            break
        c = copy.deepcopy(state.coarse["1"])
        f = copy.deepcopy(state.fine["1"])
        load_field(cp, c)
        load_field(fp, f)
        state.coarse[str(t)] = c
        state.fine[str(t)] = f
    for p in state.parameters():
        p.requires_grad_(False)
    return state, SceneNormalization.from_json(info["normalization"]), dataset
