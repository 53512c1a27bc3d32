import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from canonflow.evaluation import (Edit, MarkerTrajectory, Region, correspondence_agreement, correspondence_render,
                                  cube_color, edit_canonical, eval_foreground_mask, invert_deformation,
                                  inversion_grid, masked_metrics, mpjpe, psnr, region_hits, ssim, surface_positions,
                                  track_markers)
from canonflow.rendering import Camera, render_image
from criteria import look_at
from oracles import ssim_reference


def test_psnr_examples():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a) == math.inf
    assert abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) - 20.0) < 1e-9
    assert abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.01)) - 40.0) < 1e-9
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_examples():
    rng = np.random.default_rng(0)
    a = rng.random((24, 24, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    assert ssim(a, 1.0 - a) < 0
    x, y = 0.2, 0.7
    c1 = 0.01 ** 2
    closed = (2 * x * y + c1) / (x * x + y * y + c1)
    assert abs(ssim(np.full((16, 16), x), np.full((16, 16), y)) - closed) < 1e-9
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((20, 26, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_reference(a.mean(-1), b.mean(-1))) < 1e-9


def test_eval_mask_examples():
    bg = np.full((12, 12, 3), 0.6)
    bg[..., 1] = 0.3
    assert not eval_foreground_mask(bg, bg, 0.1, 0.05).any()
    assert not eval_foreground_mask(0.5 * bg, bg, 0.1, 0.05).any()
    img = bg.copy()
    img[3:8, 3:8] = [0.0, 0.9, 0.1]
    m = eval_foreground_mask(img, bg, 0.1, 0.05)
    assert m[3:8, 3:8].all() and m.sum() == 25
    assert eval_foreground_mask(img, bg, 0.1, 0.05, dilation=1).sum() == 49
    with pytest.raises(ValueError):
        eval_foreground_mask(img[:5], bg, 0.1, 0.05)


def test_masked_metrics_examples():
    rng = np.random.default_rng(1)
    gt, pred, bg = rng.random((3, 16, 16, 3))
    ones = np.ones((16, 16), dtype=bool)
    assert masked_metrics(pred, gt, ones, bg) == (psnr(pred, gt), ssim(pred, gt))
    assert masked_metrics(pred, gt, ~ones, bg) == (math.inf, 1.0)
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:10, 4:10] = True
    noisy = gt.copy()
    noisy[~mask] = 0.0
    assert masked_metrics(noisy, gt, mask, bg)[0] == math.inf


def test_inversion_identity_and_translation(f64):
    center = torch.tensor([0.5, 0.5, 0.5])
    V, side = 16, 0.1
    half_diag = math.sqrt(3) * side / V / 2
    rng = np.random.default_rng(0)
    for _ in range(10):
        target = center + torch.from_numpy(rng.uniform(-0.02, 0.02, 3))
        r = invert_deformation(lambda x: x, target, center, V, side)
        assert float((r.point - target).norm()) <= half_diag + 1e-12
        assert not r.on_boundary
        v = torch.tensor([0.01, -0.02, 0.005])
        r = invert_deformation(lambda x: x - v, target, center, V, side)
        assert float((r.point - (target + v)).norm()) <= half_diag + 1e-12


def test_inversion_boundary_and_ties(f64):
    center = torch.zeros(3)
    r = invert_deformation(lambda x: x, torch.tensor([1.0, 0.0, 0.0]), center, 8, 0.1)
    assert r.on_boundary
    # constant map: every voxel ties, the first one wins
    r = invert_deformation(lambda x: torch.zeros_like(x), torch.zeros(3), center, 8, 0.1)
    assert torch.equal(r.point, inversion_grid(center, 8, 0.1)[0])
    with pytest.raises(ValueError):
        inversion_grid(center, 1, 0.1)
    with pytest.raises(ValueError):
        inversion_grid(center, 8, 0.0)


def test_track_markers_static_and_translation(f64):
    rng = np.random.default_rng(2)
    V, side, T = 16, 0.1, 5
    bound = math.sqrt(3) * side / V / 2
    start = rng.uniform(0.3, 0.7, (3, 3))
    static = np.repeat(start[None], T, axis=0)
    traj = track_markers({t: (lambda x: x) for t in range(2, T + 1)}, static, V, side)
    assert np.array_equal(traj.estimate[0], static[0])
    assert np.linalg.norm(traj.estimate - static, axis=-1).max() <= bound + 1e-12
    v = np.array([0.012, 0.0, -0.007])
    moving = start[None] + v * np.arange(T)[:, None, None]
    warps = {t: (lambda x, t=t: x - torch.from_numpy(v * (t - 1))) for t in range(2, T + 1)}
    traj = track_markers(warps, moving, V, side)
    err = np.linalg.norm(traj.estimate - moving, axis=-1)
    for t in range(T):
        assert err[t].max() <= (t + 1) * bound + 1e-12
    empty = track_markers({}, np.zeros((T, 0, 3)), V, side)
    assert empty.estimate.shape == (T, 0, 3)


def test_mpjpe_examples():
    truth = np.random.default_rng(3).random((4, 5, 3))
    assert mpjpe(MarkerTrajectory(truth, truth.copy())) == 0.0
    est = truth + np.array([1.0, 0.0, 0.0])
    est[0] = truth[0]
    assert abs(mpjpe(MarkerTrajectory(truth, est)) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        mpjpe(MarkerTrajectory(truth[:1], truth[:1]))
    with pytest.raises(ValueError):
        mpjpe(MarkerTrajectory(np.zeros((4, 0, 3)), np.zeros((4, 0, 3))))


@given(seed=st.integers(0, 2**31 - 1), shift=st.tuples(*[st.floats(-100, 100)] * 3))
def test_mpjpe_translation_equivariant(seed, shift):
    rng = np.random.default_rng(seed)
    truth, est = rng.random((2, 4, 3, 3))
    s = np.array(shift)
    assert abs(mpjpe(MarkerTrajectory(truth, est)) - mpjpe(MarkerTrajectory(truth + s, est + s))) < 1e-9


# ---------------------------------------------------------------- renders against an analytic scene

def _camera(size=24, eye=(0.5, -1.5, 0.9)):
    R, t = look_at(eye)
    return Camera(rotation=R, translation=t, fx=1.6 * size, fy=1.6 * size, cx=(size - 1) / 2, cy=(size - 1) / 2,
                  width=size, height=size, near=1.2, far=3.0, background=np.full((size, size, 3), 0.2))


def _ball(x):
    inside = ((x - 0.5).norm(dim=-1) < 0.25).to(x.dtype)
    return 300.0 * inside, x.clamp(0, 1)


def _rot_z(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return torch.tensor([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _rotated_warp(deg):
    R = _rot_z(deg)
    return lambda x: (x - 0.5) @ R + 0.5  # backward map: R^T (x - c) + c


def test_correspondence_empty_and_static(f64):
    cam = _camera()
    rgb, alpha = correspondence_render(cam, lambda x: x, lambda x: (torch.zeros(len(x)), x), 64)
    assert not alpha.any() and not rgb.any()
    a, _ = correspondence_render(cam, lambda x: x, _ball, 64)
    b, _ = correspondence_render(cam, lambda x: x.clone(), _ball, 64)
    assert np.array_equal(a, b) and a.any()


def test_correspondence_follows_rotation(f64):
    cam = _camera()
    deg = 10.0
    pos, acc = surface_positions(cam, _rotated_warp(deg), _ball, 96)
    mask = (acc >= 0.4).numpy()
    # ground truth: surface point seen in the rotated scene, mapped back to canonical
    world, _ = surface_positions(cam, lambda x: x, _ball, 96)
    truth = (world - 0.5) @ _rot_z(deg) + 0.5
    assert mask.sum() > 50
    assert correspondence_agreement(pos, truth, mask, 16) >= 0.95
    c = cube_color(torch.tensor([[0.0, 0.5, 0.999]]), 16)
    assert torch.allclose(c, torch.tensor([[0.5 / 16, 8.5 / 16, 15.5 / 16]]))


def test_edit_empty_region_is_bit_identical(f64):
    cam = _camera()
    base, _ = render_image(cam, _ball, 48)
    empty = edit_canonical(_ball, Region("sphere", (0.5, 0.5, 0.5), (0.0, 0.0, 0.0)), Edit("recolor"))
    assert Region("sphere", (0.5, 0.5, 0.5), (0.0, 0.0, 0.0)).empty
    out, _ = render_image(cam, empty, 48)
    assert torch.equal(out, base)


def test_edit_transparent_whole_cube_renders_background(f64):
    cam = _camera()
    clear = edit_canonical(_ball, Region("box", (0.5, 0.5, 0.5), (2.0, 2.0, 2.0)), Edit("transparent"))
    out, _ = render_image(cam, clear, 48)
    assert torch.equal(out, torch.as_tensor(cam.background))


@pytest.mark.parametrize("deg", [0.0, 20.0])
def test_edit_locality(deg, f64):
    cam = _camera()
    warp = _rotated_warp(deg)
    region = Region("box", (0.6, 0.5, 0.6), (0.12, 0.3, 0.12))
    edited = edit_canonical(_ball, region, Edit("recolor", (1.0, 0.0, 1.0)))
    base, _ = render_image(cam, lambda x: _ball(warp(x)), 64)
    out, _ = render_image(cam, lambda x: edited(warp(x)), 64)
    hits = region_hits(cam, warp, 64, region)
    changed = (out != base).any(-1).numpy()
    assert not changed[~hits].any()
    pos, acc = surface_positions(cam, warp, _ball, 64)
    surf_in = region.contains(pos.reshape(-1, 3)).reshape(acc.shape).numpy() & (acc >= 0.4).numpy()
    assert surf_in.any() and changed[surf_in].all()


def test_edit_blend_and_errors():
    x = torch.full((4, 3), 0.5)
    blend = edit_canonical(_ball, Region("sphere", (0.5, 0.5, 0.5), (0.1, 0, 0)), Edit("blend", (1.0, 0.0, 0.0), 0.25))
    _, rgb = blend(x)
    assert torch.allclose(rgb, torch.tensor([0.625, 0.375, 0.375]).expand(4, 3))
    with pytest.raises(ValueError):
        edit_canonical(_ball, Region("box", (0, 0, 0), (1, 1, 1)), Edit("erase"))
    with pytest.raises(ValueError):
        Region("cone", (0, 0, 0), (1, 1, 1)).contains(x)
