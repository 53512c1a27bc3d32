"""Synthetic multi-view sequences with analytic geometry, motion and ground truth.

Primitives live in canonical world coordinates (the pose at t = 1). Each
has a motion program mapping canonical to world space at time t; the
program is rigid rotation about an axis through ``center`` plus a twist
whose angle grows linearly with height, both with closed-form inverses.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .rendering import (Camera, generate_rays, pixel_grid, render_rays, sample_points,
                        stratified_samples, write_rgb)

Tensor = torch.Tensor


def _rot_z(angle: Tensor) -> Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    z, o = torch.zeros_like(c), torch.ones_like(c)
    return torch.stack([torch.stack([c, -s, z], -1), torch.stack([s, c, z], -1), torch.stack([z, z, o], -1)], -2)


def _rot_axis(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


@dataclass
class Motion:
    """Total rotation (degrees) and twist (radians per unit height) reached at the last timestamp."""

    rotation_deg: float = 0.0
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_per_step: tuple[float, float, float] = (0.0, 0.0, 0.0)
    twist: float = 0.0

    def _params(self, t: int, T: int):
        s = 0.0 if T <= 1 else (t - 1) / (T - 1)
        R = torch.from_numpy(_rot_axis(self.axis, math.radians(self.rotation_deg) * s))
        shift = torch.tensor(self.translation_per_step, dtype=torch.float64) * (t - 1)
        return R, shift, self.twist * s

    def _twist(self, x: Tensor, k: float, sign: float) -> Tensor:
        # rotation about the axis by an angle proportional to height along it;
        # height is preserved, so the inverse is the same map with -k
        if k == 0.0:
            return x
        axis = torch.tensor(self.axis, dtype=x.dtype)
        axis = axis / axis.norm()
        ang = sign * k * (x @ axis)
        c, s = torch.cos(ang).unsqueeze(-1), torch.sin(ang).unsqueeze(-1)
        ax = axis.expand_as(x)
        return x * c + torch.cross(ax, x, dim=-1) * s + ax * (ax * x).sum(-1, keepdim=True) * (1 - c)

    def forward(self, x: Tensor, t: int, T: int) -> Tensor:
        """Canonical -> world at time t."""
        R, shift, k = self._params(t, T)
        c = torch.tensor(self.center, dtype=x.dtype)
        y = self._twist(x - c, k, 1.0)
        return y @ R.to(x.dtype).T + c + shift.to(x.dtype)

    def backward(self, x: Tensor, t: int, T: int) -> Tensor:
        """World at time t -> canonical."""
        R, shift, k = self._params(t, T)
        c = torch.tensor(self.center, dtype=x.dtype)
        y = (x - c - shift.to(x.dtype)) @ R.to(x.dtype)
        return self._twist(y, k, -1.0) + c


@dataclass
class Primitive:
    kind: str  # sphere | box | capsule
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r,_,_); box: half extents; capsule: (r, half_height, _) along z
    color: tuple[float, float, float]
    texture_freq: float = 6.0
    texture_amp: float = 0.25
    motion: Motion = field(default_factory=Motion)

    def sdf(self, x: Tensor) -> Tensor:
        p = x - torch.tensor(self.center, dtype=x.dtype)
        if self.kind == "sphere":
            return p.norm(dim=-1) - self.size[0]
        if self.kind == "box":
            q = p.abs() - torch.tensor(self.size, dtype=x.dtype)
            return q.clamp(min=0).norm(dim=-1) + q.max(dim=-1).values.clamp(max=0)
        if self.kind == "capsule":
            r, hh = self.size[0], self.size[1]
            pz = p[..., 2].clamp(-hh, hh)
            d = p - torch.stack([torch.zeros_like(pz), torch.zeros_like(pz), pz], -1)
            return d.norm(dim=-1) - r
        raise ValueError(f"unknown primitive {self.kind!r}")

    def albedo(self, x: Tensor) -> Tensor:
        base = torch.tensor(self.color, dtype=x.dtype)
        w = self.texture_freq
        pattern = torch.stack([torch.sin(w * x[..., 0] + 1.3 * w * x[..., 2]),
                               torch.sin(w * x[..., 1] + 0.7),
                               torch.cos(w * (x[..., 0] - x[..., 1]) + 0.4 * w * x[..., 2])], -1)
        return (base + self.texture_amp * pattern).clamp(0.02, 0.98)

    def surface_point(self, direction: np.ndarray) -> np.ndarray:
        """Point on the surface hit from the center along ``direction`` (canonical coordinates)."""
        d = direction / np.linalg.norm(direction)
        c = np.asarray(self.center, dtype=np.float64)
        lo, hi = 0.0, 4.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if float(self.sdf(torch.from_numpy(c + mid * d)[None])[0]) < 0:
                lo = mid
            else:
                hi = mid
        return c + lo * d


@dataclass
class RigSpec:
    count: int = 12
    radius: float = 4.0
    elevation_deg: float = 15.0
    heldout: int = 2
    width: int = 64
    height: int = 64
    focal: float = 91.0
    near: float = 2.7
    far: float = 5.3
    target: tuple[float, float, float] = (0.0, 0.0, 0.1)


@dataclass
class SyntheticSceneSpec:
    primitives: list[Primitive]
    rig: RigSpec = field(default_factory=RigSpec)
    timestamps: int = 10
    sigma_max: float = 200.0
    sharpness: float = 0.01
    render_samples: int = 256
    noise: float = 0.0
    vignetting: tuple[float, float, float] = (0.0, 0.0, 0.0)
    markers: int = 8
    gt_resolution: int = 64

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        prims = []
        for p in d.pop("primitives"):
            p = dict(p)
            m = Motion(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.pop("motion", {}).items()})
            prims.append(Primitive(motion=m, **{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
        rig = RigSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("rig", {}).items()})
        if "vignetting" in d:
            d["vignetting"] = tuple(d["vignetting"])
        return cls(primitives=prims, rig=rig, **d)


def rotation_scene(timestamps: int = 10, rotation_deg: float = 90.0, twist: float = 0.35) -> SyntheticSceneSpec:
    """Figure with a torso, head and one arm, turning about the vertical axis with a mild twist."""
    m = Motion(rotation_deg=rotation_deg, twist=twist)
    prims = [
        Primitive("capsule", (0.0, 0.0, -0.15), (0.32, 0.4, 0.0), (0.75, 0.35, 0.25), texture_freq=5.0, motion=m),
        Primitive("sphere", (0.0, 0.0, 0.62), (0.24, 0.0, 0.0), (0.85, 0.7, 0.5), texture_freq=9.0, motion=m),
        Primitive("box", (0.5, 0.0, 0.05), (0.28, 0.1, 0.1), (0.25, 0.45, 0.8), texture_freq=7.0, motion=m),
    ]
    return SyntheticSceneSpec(primitives=prims, timestamps=timestamps)


def static_scene(timestamps: int = 3) -> SyntheticSceneSpec:
    spec = rotation_scene(timestamps, rotation_deg=0.0, twist=0.0)
    return spec


def translation_scene(timestamps: int = 3, step=(0.05, 0.0, 0.0)) -> SyntheticSceneSpec:
    spec = rotation_scene(timestamps, rotation_deg=0.0, twist=0.0)
    for p in spec.primitives:
        p.motion = Motion(translation_per_step=tuple(step))
    return spec


# ---------------------------------------------------------------- analytic fields

def _attribute(spec: SyntheticSceneSpec, x: Tensor, t: int) -> tuple[Tensor, Tensor, Tensor]:
    """Per point: signed distance, owning primitive index, canonical position."""
    T = spec.timestamps
    sdfs, canon = [], []
    for p in spec.primitives:
        xc = p.motion.backward(x, t, T)
        canon.append(xc)
        sdfs.append(p.sdf(xc))
    sd = torch.stack(sdfs, -1)
    best = sd.argmin(-1)
    xc = torch.stack(canon, -2).gather(-2, best[..., None, None].expand(*best.shape, 1, 3)).squeeze(-2)
    return sd.gather(-1, best[..., None]).squeeze(-1), best, xc


def ground_truth_backward_map(spec: SyntheticSceneSpec, t: int, x: Tensor) -> Tensor:
    """World point at t -> canonical point, attributing each point to its nearest primitive."""
    return _attribute(spec, x, t)[2]


def ground_truth_forward_map(spec: SyntheticSceneSpec, t: int, x: Tensor, primitive: int) -> Tensor:
    return spec.primitives[primitive].motion.forward(x, t, spec.timestamps)


def analytic_query(spec: SyntheticSceneSpec, t: int):
    def query(x: Tensor):
        sd, best, xc = _attribute(spec, x, t)
        sigma = spec.sigma_max * torch.sigmoid(-sd / spec.sharpness)
        rgb = torch.zeros(x.shape[:-1] + (3,), dtype=x.dtype)
        for i, p in enumerate(spec.primitives):
            sel = best == i
            if sel.any():
                rgb[sel] = p.albedo(xc[sel])
        return sigma, rgb
    return query


# ---------------------------------------------------------------- rig and images

def make_rig(rig: RigSpec) -> list[Camera]:
    cams = []
    target = np.asarray(rig.target, dtype=np.float64)
    poses = []
    for i in range(rig.count):
        az = 2 * math.pi * i / rig.count
        el = math.radians(rig.elevation_deg if i % 2 == 0 else -rig.elevation_deg)
        poses.append((az, el))
    for j in range(rig.heldout):
        az = 2 * math.pi * (j + 0.5) / max(rig.heldout, 1) + math.pi / rig.count
        poses.append((az, 0.0))
    for i, (az, el) in enumerate(poses):
        eye = target + rig.radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        cams.append(Camera(rotation=R, translation=-R @ eye, fx=rig.focal, fy=rig.focal,
                           cx=(rig.width - 1) / 2, cy=(rig.height - 1) / 2, width=rig.width, height=rig.height,
                           near=rig.near, far=rig.far, name=f"cam_{i}"))
    return cams


def background_image(camera: Camera) -> np.ndarray:
    """Smooth environment lookup by ray direction, so backgrounds agree across views."""
    rows, cols = pixel_grid(camera)
    d = generate_rays(camera, rows, cols).directions.double()
    az = torch.atan2(d[:, 1], d[:, 0])
    el = d[:, 2]
    rgb = torch.stack([0.45 + 0.15 * torch.sin(2 * az) + 0.1 * el,
                       0.5 + 0.12 * torch.cos(3 * az + 0.5) - 0.15 * el,
                       0.55 + 0.1 * torch.sin(az + 1.0) + 0.2 * el], -1).clamp(0, 1)
    return rgb.reshape(camera.height, camera.width, 3).numpy()


@torch.no_grad()
def render_view(spec: SyntheticSceneSpec, camera: Camera, t: int, samples: int | None = None,
                return_weights: bool = False):
    """Analytic render of one view at time t; vignetting baked into the foreground term."""
    S = samples or spec.render_samples
    rows, cols = pixel_grid(camera)
    rays = generate_rays(camera, rows, cols)
    ss = stratified_samples(rays.near, rays.far, S)
    bg = torch.as_tensor(camera.background.reshape(-1, 3))
    k = torch.tensor(spec.vignetting, dtype=torch.get_default_dtype())
    out = render_rays(rays, analytic_query(spec, t), ss, bg, k, [camera])
    img = out.color.reshape(camera.height, camera.width, 3)
    if return_weights:
        return img, out, rays, ss
    return img


@torch.no_grad()
def gt_correspondence(spec: SyntheticSceneSpec, camera: Camera, t: int, samples: int | None = None):
    """Canonical world position of each pixel's surface sample, and accumulated weight [h, w]."""
    _, out, rays, ss = render_view(spec, camera, t, samples, return_weights=True)
    cum = torch.cumsum(out.weights, -1)
    idx = (cum - 0.5).abs().argmin(-1)
    pts = sample_points(rays, ss)
    surf = pts.gather(1, idx[:, None, None].expand(-1, 1, 3)).squeeze(1)
    canon = ground_truth_backward_map(spec, t, surf)
    h, w = camera.height, camera.width
    return canon.reshape(h, w, 3), out.weights.sum(-1).reshape(h, w)


def place_markers(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Markers on primitive surfaces: (primitive index, canonical position)."""
    out = []
    for j in range(spec.markers):
        i = j % len(spec.primitives)
        d = rng.normal(size=3)
        p = spec.primitives[i].surface_point(d)
        out.append((i, p))
    return out


def generate(spec: SyntheticSceneSpec, out_dir: str | Path, seed: int = 0) -> Path:
    """Write a dataset in the pipeline layout; returns ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cams = make_rig(spec.rig)
    n_train = spec.rig.count
    for c, cam in enumerate(cams):
        cam.background = background_image(cam)
        write_rgb(out / "background" / f"cam_{c}.png", cam.background)
    noise_rng = np.random.default_rng(seed + 1)
    with torch.no_grad():
        for t in range(1, spec.timestamps + 1):
            for c, cam in enumerate(cams):
                img = render_view(spec, cam, t).numpy()
                if spec.noise > 0:
                    img = np.clip(img + noise_rng.normal(scale=spec.noise, size=img.shape), 0, 1)
                write_rgb(out / "images" / f"t{t}" / f"cam_{c}.png", img)
    markers = place_markers(spec, rng)
    traj = []
    for j, (i, p) in enumerate(markers):
        pos = [ground_truth_forward_map(spec, t, torch.from_numpy(p)[None], i)[0].tolist()
               for t in range(1, spec.timestamps + 1)]
        traj.append({"id": j, "primitive": i, "positions": pos})
    (out / "markers.json").write_text(json.dumps(traj, indent=1))
    lo, hi = _gt_box(spec)
    g = spec.gt_resolution
    axis = [torch.linspace(lo[k], hi[k], g, dtype=torch.float64) for k in range(3)]
    grid = torch.stack(torch.meshgrid(*axis, indexing="ij"), -1)
    for t in range(1, spec.timestamps + 1):
        back = ground_truth_backward_map(spec, t, grid.reshape(-1, 3)).reshape(g, g, g, 3)
        checkpoint.save(out / "gt_deform" / f"t{t}.bin",
                        {"box_min": torch.tensor(lo), "box_max": torch.tensor(hi), "backward": back},
                        precision="float64")
    scene = {
        "cameras": [c.to_json() for c in cams],
        "train_cameras": list(range(n_train)),
        "test_cameras": list(range(n_train, len(cams))),
        "timestamps": spec.timestamps,
        "images": "images/t{t}/cam_{c}.png",
        "backgrounds": "background/cam_{c}.png",
        "markers": "markers.json",
        "synthetic": spec.to_json(),
        "seed": seed,
    }
    (out / "scene.json").write_text(json.dumps(scene, indent=1))
    return out


def _gt_box(spec: SyntheticSceneSpec) -> tuple[list[float], list[float]]:
    r = spec.rig.near * 0.5
    return [-r, -r, -r], [r, r, r]
