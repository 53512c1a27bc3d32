"""Field inversion, marker tracking, image metrics, evaluation masks,
correspondence renders and canonical-space editing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from .rendering import (Camera, expected_depth, generate_rays, pixel_grid, render_ray, sample_points,
                        stratified_samples)

Tensor = torch.Tensor
log = logging.getLogger(__name__)

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


# ---------------------------------------------------------------- inversion and tracking

@dataclass
class InversionResult:
    point: Tensor
    residual: float
    on_boundary: bool


def inversion_grid(center: Tensor, resolution: int, side: float) -> Tensor:
    """Voxel centers [V^3, 3] of a cube of side ``side`` around ``center`` (x index slowest)."""
    if resolution < 2 or side <= 0:
        raise ValueError("inversion grid needs resolution >= 2 and positive side length")
    c = (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution - 0.5
    g = torch.stack(torch.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
    return center.double().reshape(1, 3) + side * g


@torch.no_grad()
def invert_deformation(warp: Callable[[Tensor], Tensor], target: Tensor, center: Tensor, resolution: int,
                       side: float, chunk: int = 65536) -> InversionResult:
    """World-space voxel center whose warped position lands closest to ``target``.

    Ties go to the lowest linear voxel index.
    """
    pts = inversion_grid(center, resolution, side)
    dtype = torch.get_default_dtype()
    best_d, best_i = math.inf, 0
    for s in range(0, pts.shape[0], chunk):
        w = warp(pts[s:s + chunk].to(dtype)).double()
        d = (w - target.double().reshape(1, 3)).square().sum(-1)
        i = int(torch.argmin(d))
        if float(d[i]) < best_d:
            best_d, best_i = float(d[i]), s + i
    ijk = np.unravel_index(best_i, (resolution,) * 3)
    boundary = any(v in (0, resolution - 1) for v in ijk)
    if boundary:
        log.warning("inversion hit the grid boundary at voxel %s", ijk)
    return InversionResult(pts[best_i], math.sqrt(best_d), boundary)


@dataclass
class MarkerTrajectory:
    truth: np.ndarray  # [T, J, 3]
    estimate: np.ndarray  # [T, J, 3]
    boundary_hits: int = 0


def track_markers(warps: dict[int, Callable[[Tensor], Tensor]], truth: np.ndarray, resolution: int,
                  side: float) -> MarkerTrajectory:
    """Sequential inversion of each marker's canonical position, recentered on the previous estimate.

    ``truth`` is [T, J, 3] in the same frame as the warps; row 0 seeds the estimate.
    """
    truth = np.asarray(truth, dtype=np.float64)
    T = truth.shape[0]
    J = truth.shape[1] if truth.ndim == 3 else 0
    est = np.zeros_like(truth)
    if J == 0:
        return MarkerTrajectory(truth, est)
    est[0] = truth[0]
    hits = 0
    for j in range(J):
        target = torch.from_numpy(truth[0, j])
        for t in range(2, T + 1):
            r = invert_deformation(warps[t], target, torch.from_numpy(est[t - 2, j]), resolution, side)
            est[t - 1, j] = r.point.numpy()
            hits += r.on_boundary
    return MarkerTrajectory(truth, est, hits)


def mpjpe(traj: MarkerTrajectory) -> float:
    T, J = traj.truth.shape[:2] if traj.truth.ndim == 3 else (traj.truth.shape[0], 0)
    if T < 2 or J == 0:
        raise ValueError("MPJPE needs at least two timestamps and one marker")
    return float(np.linalg.norm(traj.truth[1:] - traj.estimate[1:], axis=-1).mean())


# ---------------------------------------------------------------- image metrics

def _as_np(img) -> np.ndarray:
    return np.asarray(img.detach().cpu().numpy() if isinstance(img, Tensor) else img, dtype=np.float64)


def psnr(pred, gt) -> float:
    a, b = _as_np(pred), _as_np(gt)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_filter(x: np.ndarray) -> np.ndarray:
    # 11x11 window, sigma 1.5, valid region only
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    y = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 0, x)
    return np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 1, y)


def ssim(pred, gt) -> float:
    """Mean SSIM of the channel-mean grayscale images, data range 1."""
    a, b = _as_np(pred), _as_np(gt)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _gaussian_filter(a), _gaussian_filter(b)
    saa = _gaussian_filter(a * a) - mu_a ** 2
    sbb = _gaussian_filter(b * b) - mu_b ** 2
    sab = _gaussian_filter(a * b) - mu_a * mu_b
    m = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(m.mean())


def _square(r: int) -> np.ndarray:
    return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)


def eval_foreground_mask(image, background, delta: float, sigma: float, opening: int = 1,
                         dilation: int = 0) -> np.ndarray:
    """Background-difference mask AND not-a-shadow mask, each opened; optionally dilated."""
    I, B = _as_np(image), _as_np(background)
    if I.shape != B.shape:
        raise ValueError(f"image {I.shape} vs background {B.shape}")
    m_b = np.abs(I - B).max(-1) > delta
    ratio = I / np.maximum(B, 1e-3)
    m_s = ratio.std(-1) > sigma
    if opening > 0:
        m_b = ndimage.binary_opening(m_b, structure=_square(opening))
        m_s = ndimage.binary_opening(m_s, structure=_square(opening))
    m = m_b & m_s
    if dilation > 0:
        m = ndimage.binary_dilation(m, structure=_square(dilation))
    return m


def masked_metrics(pred, gt, mask, background) -> tuple[float, float]:
    """PSNR and SSIM after replacing non-mask pixels of both images by the background."""
    p, g, bg = _as_np(pred).copy(), _as_np(gt).copy(), _as_np(background)
    m = np.asarray(mask, dtype=bool)
    p[~m] = bg[~m]
    g[~m] = bg[~m]
    return psnr(p, g), ssim(p, g)


# ---------------------------------------------------------------- correspondence renders

SURFACE_LEVEL = 0.5
MIN_ACCUMULATION = 0.4


def cube_color(x: Tensor, cube_size: int) -> Tensor:
    """RGB-cube pattern: position quantized to cube cells, cell centers used as colors."""
    cell = (x.clamp(0.0, 1.0 - 1e-9) * cube_size).floor()
    return (cell + 0.5) / cube_size


@torch.no_grad()
def surface_positions(camera: Camera, warp: Callable[[Tensor], Tensor], query: Callable, S: int,
                      keep_fn=None, chunk: int = 4096) -> tuple[Tensor, Tensor]:
    """Canonical position of each pixel's surface sample and total accumulated weight.

    The surface sample is the one whose running weight sum is closest to one half.
    """
    rows, cols = pixel_grid(camera)
    pos, acc = [], []
    for s in range(0, rows.numel(), chunk):
        rays = generate_rays(camera, rows[s:s + chunk], cols[s:s + chunk])
        ss = stratified_samples(rays.near, rays.far, S)
        n = len(rays)
        pts = sample_points(rays, ss).reshape(-1, 3)
        bent = warp(pts)
        sigma, rgb = query(bent)
        keep = keep_fn(pts.reshape(n, S, 3)) if keep_fn is not None else None
        _, w, _ = render_ray(sigma.reshape(n, S), rgb.reshape(n, S, 3), ss.deltas, keep)
        cum = torch.cumsum(w, -1)
        i = (cum - SURFACE_LEVEL).abs().argmin(-1)
        pos.append(bent.reshape(n, S, 3).gather(1, i[:, None, None].expand(-1, 1, 3)).squeeze(1))
        acc.append(w.sum(-1))
    return torch.cat(pos).reshape(camera.height, camera.width, 3), torch.cat(acc).reshape(camera.height, camera.width)


def correspondence_render(camera: Camera, warp, query, S: int, cube_size: int = 16,
                          keep_fn=None) -> tuple[np.ndarray, np.ndarray]:
    """(rgb [h, w, 3], alpha [h, w]); rays with accumulated weight below 0.4 are transparent."""
    pos, acc = surface_positions(camera, warp, query, S, keep_fn)
    rgb = cube_color(pos, cube_size).numpy()
    alpha = (acc >= MIN_ACCUMULATION).numpy()
    rgb[~alpha] = 0.0
    return rgb, alpha.astype(np.float64)


def cube_cells(x, cube_size: int) -> np.ndarray:
    return np.floor(np.clip(_as_np(x), 0.0, 1.0 - 1e-9) * cube_size).astype(np.int64)


def correspondence_agreement(pred_pos, gt_pos, mask, cube_size: int) -> float:
    """Fraction of masked pixels whose predicted cube cell is within one cell of the truth."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 1.0
    d = np.abs(cube_cells(pred_pos, cube_size) - cube_cells(gt_pos, cube_size)).max(-1)
    return float((d[m] <= 1).mean())


# ---------------------------------------------------------------- editing

@dataclass(frozen=True)
class Region:
    kind: str  # sphere | box
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (radius, _, _); box: half extents

    def contains(self, x: Tensor) -> Tensor:
        c = torch.tensor(self.center, dtype=x.dtype)
        if self.kind == "sphere":
            return (x - c).norm(dim=-1) <= self.size[0]
        if self.kind == "box":
            return ((x - c).abs() <= torch.tensor(self.size, dtype=x.dtype)).all(-1)
        raise ValueError(f"unknown region kind {self.kind!r}")

    @property
    def empty(self) -> bool:
        if self.kind == "sphere":
            return self.size[0] <= 0
        return min(self.size) < 0


@dataclass(frozen=True)
class Edit:
    mode: str  # recolor | blend | transparent
    color: tuple[float, float, float] = (1.0, 0.0, 0.0)
    alpha: float = 1.0


class EditedCanonical:
    """Wraps a canonical model and overrides its outputs inside a region; parameters untouched."""

    def __init__(self, model, region: Region, edit: Edit):
        if edit.mode not in ("recolor", "blend", "transparent"):
            raise ValueError(f"unknown edit {edit.mode!r}")
        self.model, self.region, self.edit = model, region, edit

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        sigma, rgb = self.model(x)
        inside = self.region.contains(x.reshape(-1, 3)).reshape(sigma.shape)
        if self.edit.mode == "transparent":
            return torch.where(inside, torch.zeros_like(sigma), sigma), rgb
        target = torch.tensor(self.edit.color, dtype=rgb.dtype).expand_as(rgb)
        if self.edit.mode == "blend":
            target = self.edit.alpha * target + (1.0 - self.edit.alpha) * rgb
        return sigma, torch.where(inside.unsqueeze(-1), target, rgb)


def edit_canonical(model, region: Region, edit: Edit) -> EditedCanonical:
    return EditedCanonical(model, region, edit)


def region_hits(camera: Camera, warp, S: int, region: Region, chunk: int = 4096) -> np.ndarray:
    """Per pixel: does any bent sample of its ray fall inside ``region``."""
    rows, cols = pixel_grid(camera)
    hits = []
    with torch.no_grad():
        for s in range(0, rows.numel(), chunk):
            rays = generate_rays(camera, rows[s:s + chunk], cols[s:s + chunk])
            ss = stratified_samples(rays.near, rays.far, S)
            bent = warp(sample_points(rays, ss).reshape(-1, 3))
            hits.append(region.contains(bent).reshape(len(rays), S).any(-1))
    return torch.cat(hits).reshape(camera.height, camera.width).numpy()


def depth_image(camera: Camera, warp, query, S: int) -> Tensor:
    rows, cols = pixel_grid(camera)
    rays = generate_rays(camera, rows, cols)
    ss = stratified_samples(rays.near, rays.far, S)
    n = len(rays)
    with torch.no_grad():
        sigma, rgb = query(warp(sample_points(rays, ss).reshape(-1, 3)))
        _, w, _ = render_ray(sigma.reshape(n, S), rgb.reshape(n, S, 3), ss.deltas)
    return expected_depth(w, ss.depths).reshape(camera.height, camera.width)
