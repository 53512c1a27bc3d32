"""Pinhole cameras, ray sampling, ray bending and quadrature volume rendering.

Pixel ``(row, col)`` has its center at image coordinates ``(col, row)``;
camera axes follow the x-right, y-down, z-forward convention and extrinsics
map world to camera (``x_cam = R x_world + t``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .fields import DeformationField

Tensor = torch.Tensor

DEPTH_EPS = 1e-8
VIGNETTE_MODES = ("normalized_squared", "squared_over_width")


@dataclass
class Camera:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    background: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not (np.allclose(R @ R.T, np.eye(3), atol=1e-6) and abs(np.linalg.det(R) - 1.0) < 1e-6):
            raise ValueError(f"camera {self.name or '?'}: rotation is not a proper orthonormal matrix")
        if not (self.fx > 0 and self.fy > 0 and self.width > 0 and self.height > 0):
            raise ValueError(f"camera {self.name or '?'}: focal lengths and image size must be positive")
        if not 0 < self.near < self.far:
            raise ValueError(f"camera {self.name or '?'}: need 0 < near < far, got {self.near}, {self.far}")
        if self.background is not None and self.background.shape[:2] != (self.height, self.width):
            raise ValueError(f"camera {self.name or '?'}: background size {self.background.shape[:2]} "
                             f"!= {(self.height, self.width)}")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points [N, 3] to (col, row) image coordinates [N, 2] and camera depth [N]."""
        pc = points @ self.rotation.T + self.translation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def to_json(self) -> dict:
        return {"name": self.name, "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "near": self.near, "far": self.far}

    @classmethod
    def from_json(cls, d: dict, background: np.ndarray | None = None) -> "Camera":
        return cls(rotation=np.array(d["rotation"]), translation=np.array(d["translation"]),
                   fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]), near=float(d["near"]), far=float(d["far"]),
                   background=background, name=d.get("name", ""))


@dataclass
class Rays:
    origins: Tensor
    directions: Tensor
    rows: Tensor
    cols: Tensor
    camera_ids: Tensor
    near: Tensor
    far: Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class SampleSet:
    depths: Tensor
    deltas: Tensor
    keep: Tensor | None = None


def generate_rays(camera: Camera, rows, cols, camera_id: int = 0) -> Rays:
    """Rays through pixel centers; ``rows``/``cols`` are integer arrays of equal length."""
    rows = torch.as_tensor(rows, dtype=torch.long).reshape(-1)
    cols = torch.as_tensor(cols, dtype=torch.long).reshape(-1)
    if rows.numel() and (rows.min() < 0 or rows.max() >= camera.height or cols.min() < 0 or cols.max() >= camera.width):
        raise IndexError(f"pixel outside {camera.height}x{camera.width} image")
    dtype = torch.get_default_dtype()
    d_cam = torch.stack([(cols.double() - camera.cx) / camera.fx, (rows.double() - camera.cy) / camera.fy,
                         torch.ones(rows.shape, dtype=torch.float64)], dim=-1)
    d = d_cam @ torch.from_numpy(camera.rotation)  # R^T d_cam, row-vector form
    d = d / d.norm(dim=-1, keepdim=True)
    n = rows.shape[0]
    o = torch.from_numpy(camera.center).expand(n, 3)
    return Rays(origins=o.to(dtype), directions=d.to(dtype), rows=rows, cols=cols,
                camera_ids=torch.full((n,), camera_id, dtype=torch.long),
                near=torch.full((n,), camera.near, dtype=dtype), far=torch.full((n,), camera.far, dtype=dtype))


def generate_ray(camera: Camera, pixel: tuple[int, int]) -> Rays:
    return generate_rays(camera, [pixel[0]], [pixel[1]])


def concat_rays(parts: list[Rays]) -> Rays:
    return Rays(*(torch.cat([getattr(p, f) for p in parts]) for f in
                  ("origins", "directions", "rows", "cols", "camera_ids", "near", "far")))


def stratified_samples(near, far, S: int, rng: torch.Generator | None = None, n_rays: int | None = None) -> SampleSet:
    """S depths per ray, one uniform draw in each of S equal intervals.

    ``rng=None`` places each sample at its interval midpoint (deterministic
    evaluation renders). The last delta is the nominal interval width.
    """
    if S < 1:
        raise ValueError("need at least one sample per ray")
    dtype = torch.get_default_dtype()
    near = torch.as_tensor(near, dtype=dtype).reshape(-1)
    far = torch.as_tensor(far, dtype=dtype).reshape(-1)
    n = n_rays if n_rays is not None else max(near.numel(), far.numel())
    near, far = near.expand(n), far.expand(n)
    width = ((far - near) / S).unsqueeze(-1)
    idx = torch.arange(S, dtype=dtype)
    if rng is None:
        u = torch.full((n, S), 0.5, dtype=dtype)
    else:
        u = torch.rand((n, S), generator=rng, dtype=dtype)
    depths = near.unsqueeze(-1) + (idx + u) * width
    deltas = torch.cat([depths[:, 1:] - depths[:, :-1], width], dim=-1)
    return SampleSet(depths=depths, deltas=deltas)


def sample_points(rays: Rays, samples: SampleSet) -> Tensor:
    return rays.origins.unsqueeze(1) + samples.depths.unsqueeze(-1) * rays.directions.unsqueeze(1)


def bend_ray(points: Tensor, coarse: DeformationField | None, fine: DeformationField | None) -> Tensor:
    """Canonical positions x'' = d_f(d_c(x)); a missing field acts as identity."""
    shape = points.shape
    x = points.reshape(-1, 3)
    if coarse is not None:
        x = coarse(x)
    if fine is not None:
        x = fine(x)
    return x.reshape(shape)


def render_ray(sigma: Tensor, rgb: Tensor, deltas: Tensor, keep: Tensor | None = None):
    """Quadrature rendering of rays [..., S]; returns (color, weights, leftover)."""
    if keep is not None:
        sigma = torch.where(keep, sigma, torch.zeros_like(sigma))
    tau = sigma * deltas
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(cum - tau))
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    color = (weights.unsqueeze(-1) * rgb).sum(-2)
    leftover = 1.0 - weights.sum(-1)
    return color, weights, leftover


def composite_background(color: Tensor, leftover: Tensor, background: Tensor) -> Tensor:
    return color + leftover.unsqueeze(-1) * background


def vignette_radius(rows: Tensor, cols: Tensor, cx: Tensor | float, cy: Tensor | float,
                    width: Tensor | float, mode: str = "normalized_squared") -> Tensor:
    d2 = (cols.to(torch.get_default_dtype()) - cx) ** 2 + (rows.to(torch.get_default_dtype()) - cy) ** 2
    if mode == "normalized_squared":
        return d2 / (width * width)
    if mode == "squared_over_width":
        return d2 / width
    raise ValueError(f"unknown vignetting mode {mode!r}")


def vignette(color: Tensor, p: Tensor, k: Tensor) -> Tensor:
    """Radial falloff color * (1 + k1 p + k2 p^2 + k3 p^3)."""
    scale = 1.0 + p * (k[0] + p * (k[1] + p * k[2]))
    return color * scale.unsqueeze(-1)


# ---------------------------------------------------------------- assembly

QueryFn = Callable[[Tensor], tuple[Tensor, Tensor]]


@dataclass
class RenderOutput:
    color: Tensor
    weights: Tensor
    leftover: Tensor
    depths: Tensor
    sigma: Tensor | None = None
    extras: dict = field(default_factory=dict)


def render_rays(rays: Rays, query: QueryFn, samples: SampleSet, backgrounds: Tensor,
                vignetting: Tensor | None = None, cameras: list[Camera] | None = None,
                vignette_mode: str = "normalized_squared") -> RenderOutput:
    """Full per-ray color: quadrature, vignetting of the foreground term, then background.

    ``query`` maps world points [M, 3] to (sigma [M], rgb [M, 3]); only kept
    samples are evaluated.
    """
    n, S = samples.depths.shape
    pts = sample_points(rays, samples)
    keep = samples.keep
    dtype = pts.dtype
    if keep is None:
        sigma, rgb = query(pts.reshape(-1, 3))
        sigma, rgb = sigma.reshape(n, S), rgb.reshape(n, S, 3)
    else:
        idx = keep.reshape(-1).nonzero().squeeze(-1)
        s_k, c_k = query(pts.reshape(-1, 3).index_select(0, idx))
        sigma = torch.zeros(n * S, dtype=dtype).index_put((idx,), s_k).reshape(n, S)
        rgb = torch.zeros(n * S, 3, dtype=dtype).index_put((idx,), c_k).reshape(n, S, 3)
    color, weights, leftover = render_ray(sigma, rgb, samples.deltas, keep)
    if vignetting is not None and cameras is not None:
        cx = torch.tensor([c.cx for c in cameras], dtype=dtype)[rays.camera_ids]
        cy = torch.tensor([c.cy for c in cameras], dtype=dtype)[rays.camera_ids]
        w = torch.tensor([float(c.width) for c in cameras], dtype=dtype)[rays.camera_ids]
        color = vignette(color, vignette_radius(rays.rows, rays.cols, cx, cy, w, vignette_mode), vignetting)
    out = composite_background(color, leftover, backgrounds)
    return RenderOutput(color=out, weights=weights, leftover=leftover, depths=samples.depths, sigma=sigma)


def expected_depth(weights: Tensor, depths: Tensor) -> Tensor:
    return (weights * depths).sum(-1) / weights.sum(-1).clamp(min=DEPTH_EPS)


def pixel_grid(camera: Camera, stride: int = 1) -> tuple[Tensor, Tensor]:
    rows = torch.arange(0, camera.height, stride)
    cols = torch.arange(0, camera.width, stride)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return rr.reshape(-1), cc.reshape(-1)


@torch.no_grad()
def render_image(camera: Camera, query: QueryFn, S: int, stride: int = 1, vignetting: Tensor | None = None,
                 vignette_mode: str = "normalized_squared", keep_fn: Callable[[Tensor], Tensor] | None = None,
                 chunk: int = 4096) -> tuple[Tensor, Tensor]:
    """RGB [h', w', 3] and expected depth [h', w'] at pixel stride ``stride``.

    Depth is measured along the ray. Samples sit at interval midpoints so the
    render is deterministic.
    """
    rows, cols = pixel_grid(camera, stride)
    h = len(range(0, camera.height, stride))
    w = len(range(0, camera.width, stride))
    bg_full = torch.as_tensor(camera.background if camera.background is not None
                              else np.zeros((camera.height, camera.width, 3)), dtype=torch.get_default_dtype())
    colors, depths = [], []
    for s in range(0, rows.numel(), chunk):
        rays = generate_rays(camera, rows[s:s + chunk], cols[s:s + chunk])
        samples = stratified_samples(rays.near, rays.far, S)
        if keep_fn is not None:
            samples.keep = keep_fn(sample_points(rays, samples))
        out = render_rays(rays, query, samples, bg_full[rays.rows, rays.cols], vignetting, [camera], vignette_mode)
        colors.append(out.color)
        depths.append(expected_depth(out.weights, out.depths))
    return torch.cat(colors).reshape(h, w, 3), torch.cat(depths).reshape(h, w)


# ---------------------------------------------------------------- image I/O

def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(path: str | Path, img) -> None:
    arr = np.asarray(img.detach().cpu().numpy() if isinstance(img, Tensor) else img, dtype=np.float64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8), mode="RGB").save(path)


def write_rgba(path: str | Path, rgb, alpha) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    arr = np.concatenate([rgb, a], axis=-1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8), mode="RGBA").save(path)


def write_depth(path: str | Path, depth) -> None:
    """16-bit grayscale, min -> 0 and max -> 65535 per image."""
    d = np.asarray(depth.detach().cpu().numpy() if isinstance(depth, Tensor) else depth, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    scaled = np.zeros_like(d) if hi <= lo else (d - lo) / (hi - lo)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(scaled * 65535).astype(np.uint16)).save(path)


def read_depth(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0
