import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from canonflow.fields import DeformationField, HashGridConfig
from canonflow.rendering import (Camera, bend_ray, composite_background, expected_depth, generate_ray, generate_rays,
                                 pixel_grid, read_depth, read_rgb, render_image, render_ray, render_rays,
                                 sample_points, stratified_samples, vignette, vignette_radius, write_depth, write_rgb)
from oracles import render_ray_terms

SMALL = HashGridConfig(levels=2, features_per_level=2, base_resolution=4, per_level_scale=2.0, table_size=2**10)


def make_camera(R=None, t=(0.0, 0.0, 0.0), f=50.0, w=32, h=24, near=1.0, far=5.0, background=None):
    return Camera(rotation=np.eye(3) if R is None else R, translation=np.asarray(t), fx=f, fy=f,
                  cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h, near=near, far=far, background=background)


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def test_camera_validation():
    with pytest.raises(ValueError):
        make_camera(R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        make_camera(R=np.eye(3) * 1.01)
    with pytest.raises(ValueError):
        make_camera(near=2.0, far=1.0)
    with pytest.raises(ValueError):
        make_camera(background=np.zeros((5, 5, 3)))
    cam = make_camera(R=rot_y(0.3), t=(0.1, 0.2, 3.0))
    assert Camera.from_json(cam.to_json()).to_json() == cam.to_json()


def test_ray_identity_camera_through_origin_pixel():
    cam = Camera(rotation=np.eye(3), translation=np.zeros(3), fx=1, fy=1, cx=0, cy=0, width=4, height=4,
                 near=0.1, far=1.0)
    r = generate_ray(cam, (0, 0))
    assert torch.allclose(r.directions[0], torch.tensor([0.0, 0.0, 1.0]))
    assert torch.allclose(r.origins[0], torch.zeros(3))


def test_ray_at_principal_point_is_optical_axis(f64):
    R = rot_y(0.7)
    cam = Camera(rotation=R, translation=np.array([0.0, 0.0, 4.0]), fx=60, fy=60, cx=10, cy=7, width=21, height=15,
                 near=1, far=6)
    r = generate_ray(cam, (7, 10))
    assert torch.allclose(r.directions[0], torch.from_numpy(R[2]), atol=1e-12)
    assert torch.allclose(r.origins[0], torch.from_numpy(-R.T @ cam.translation), atol=1e-12)


def test_adjacent_pixels_differ_by_inverse_focal(f64):
    cam = make_camera(f=100.0, w=33, h=33)
    a = generate_ray(cam, (16, 16)).directions[0]
    b = generate_ray(cam, (16, 17)).directions[0]
    angle = math.acos(float((a * b).sum()))
    assert abs(angle - math.atan(1 / 100)) < 1e-9
    assert abs(angle - 1 / 100) < 1e-5
    assert float(b[0] - a[0]) > 0 and abs(float(b[1] - a[1])) < 1e-12


def test_ray_out_of_bounds():
    cam = make_camera()
    with pytest.raises(IndexError):
        generate_ray(cam, (24, 0))
    with pytest.raises(IndexError):
        generate_ray(cam, (0, -1))


@given(seed=st.integers(0, 1000))
def test_ray_directions_unit_length(seed):
    rng = np.random.default_rng(seed)
    cam = make_camera(R=rot_y(rng.uniform(-3, 3)), t=rng.normal(size=3))
    rows, cols = pixel_grid(cam, 3)
    d = generate_rays(cam, rows, cols).directions
    assert float((d.norm(dim=-1) - 1).abs().max()) < 1e-6


def test_stratified_examples():
    one = stratified_samples(2.0, 3.0, 1, torch.Generator().manual_seed(0))
    assert 2.0 <= float(one.depths[0, 0]) <= 3.0
    four = stratified_samples(0.0, 1.0, 4, torch.Generator().manual_seed(1), n_rays=50)
    for i in range(4):
        assert bool((four.depths[:, i] >= i / 4).all()) and bool((four.depths[:, i] <= (i + 1) / 4).all())
    a = stratified_samples(0.0, 1.0, 8, torch.Generator().manual_seed(7), n_rays=3)
    b = stratified_samples(0.0, 1.0, 8, torch.Generator().manual_seed(7), n_rays=3)
    assert torch.equal(a.depths, b.depths)
    mid = stratified_samples(0.0, 1.0, 4)
    assert torch.allclose(mid.depths, torch.tensor([[0.125, 0.375, 0.625, 0.875]]))
    with pytest.raises(ValueError):
        stratified_samples(0.0, 1.0, 0)


@settings(deadline=None)
@given(seed=st.integers(0, 2**31 - 1), S=st.integers(1, 64), near=st.floats(0.01, 5), span=st.floats(0.01, 5))
def test_stratified_invariants(seed, S, near, span):
    far = near + span
    s = stratified_samples(near, far, S, torch.Generator().manual_seed(seed), n_rays=5)
    d = s.depths
    assert bool((d >= near - 1e-5).all()) and bool((d <= far + 1e-5).all())
    assert bool((d[:, 1:] >= d[:, :-1]).all())
    assert torch.allclose(s.deltas[:, :-1], d[:, 1:] - d[:, :-1])
    assert torch.allclose(s.deltas[:, -1], torch.full((5,), span / S), rtol=1e-5)


def test_render_ray_closed_forms(f64):
    c, w, left = render_ray(torch.zeros(1, 5), torch.rand(1, 5, 3), torch.full((1, 5), 0.1))
    assert torch.equal(c, torch.zeros(1, 3)) and float(left) == 1.0
    ln2 = math.log(2)
    c, w, left = render_ray(torch.tensor([[ln2]]), torch.tensor([[[1.0, 0.0, 0.0]]]), torch.tensor([[1.0]]))
    assert torch.allclose(w, torch.tensor([[0.5]])) and torch.allclose(c, torch.tensor([[0.5, 0.0, 0.0]]))
    assert abs(float(left) - 0.5) < 1e-12
    c, w, left = render_ray(torch.tensor([[ln2, ln2]]), torch.rand(1, 2, 3), torch.ones(1, 2))
    assert torch.allclose(w, torch.tensor([[0.5, 0.25]])) and abs(float(left) - 0.25) < 1e-12


def test_composite_examples():
    c = torch.tensor([[0.5, 0.0, 0.0]])
    bg = torch.tensor([[0.0, 0.0, 1.0]])
    assert torch.equal(composite_background(c, torch.tensor([1.0]), bg), c + bg)
    assert torch.equal(composite_background(torch.zeros(1, 3), torch.tensor([1.0]), bg), bg)
    assert torch.equal(composite_background(c, torch.tensor([0.0]), bg), c)
    assert torch.allclose(composite_background(c, torch.tensor([0.25]), bg), torch.tensor([[0.5, 0.0, 0.25]]))


def test_render_ray_matches_term_by_term_oracle(f64):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        S = int(rng.integers(1, 48))
        sigma = rng.uniform(0, 30, S) * (rng.random(S) < 0.7)
        rgb = rng.random((S, 3))
        deltas = rng.uniform(0.001, 0.2, S)
        bg = rng.random(3)
        c, w, left = render_ray(torch.from_numpy(sigma)[None], torch.from_numpy(rgb)[None], torch.from_numpy(deltas)[None])
        out = composite_background(c, left, torch.from_numpy(bg)[None])[0].numpy()
        ref, ref_w, ref_left = render_ray_terms(sigma, rgb, deltas, bg)
        worst = max(worst, np.abs(out - ref).max(), np.abs(w[0].numpy() - ref_w).max(), abs(float(left) - ref_left))
        assert abs(float(w.sum() + left) - 1.0) < 1e-6
    assert worst < 1e-6


@settings(deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_weights_partition_of_unity_f32(seed):
    g = torch.Generator().manual_seed(seed)
    sigma = torch.rand(64, 32, generator=g, dtype=torch.float32) * 100
    deltas = torch.rand(64, 32, generator=g, dtype=torch.float32) * 0.1
    _, w, left = render_ray(sigma, torch.rand(64, 32, 3, dtype=torch.float32), deltas)
    assert float((w.sum(-1) + left - 1).abs().max()) < 1e-6
    assert bool((w >= 0).all())
    # exclusive prefix sum; cumsum minus the current term can round out of order in f32
    depth = torch.cumsum(sigma * deltas, -1)
    trans = torch.exp(-torch.cat([torch.zeros_like(depth[:, :1]), depth[:, :-1]], -1))
    assert bool((trans[:, 1:] <= trans[:, :-1]).all())


def test_vignette_examples():
    c = torch.rand(4, 3)
    assert torch.equal(vignette(c, torch.rand(4), torch.zeros(3)), c)
    assert torch.equal(vignette(c, torch.zeros(4), torch.tensor([0.3, -0.2, 0.1])), c)
    out = vignette(torch.ones(1, 3), torch.tensor([0.5]), torch.tensor([0.2, 0.0, 0.0]))
    assert torch.allclose(out, torch.full((1, 3), 1.1))
    rows, cols = torch.tensor([10]), torch.tensor([42])
    assert float(vignette_radius(rows, cols, 10.0, 10.0, 64.0)) == 0.25
    assert float(vignette_radius(rows, cols, 10.0, 10.0, 64.0, "squared_over_width")) == 16.0
    with pytest.raises(ValueError):
        vignette_radius(rows, cols, 0.0, 0.0, 1.0, "cubic")


def test_bend_ray_identity_and_translation():
    pts = torch.rand(5, 7, 3)
    assert torch.equal(bend_ray(pts, None, None), pts)
    coarse, fine = DeformationField(SMALL), DeformationField(SMALL, role="fine")
    assert torch.equal(bend_ray(pts, coarse, fine), pts)
    v = torch.tensor([0.1, -0.2, 0.05])
    with torch.no_grad():
        coarse.mlp.layers[-1].bias.copy_(v)
    assert torch.allclose(bend_ray(pts, coarse, fine), pts + v)


def sphere_query(center, radius, sigma_in=50.0):
    center = torch.as_tensor(center, dtype=torch.get_default_dtype())

    def query(x):
        inside = (x - center).norm(dim=-1) < radius
        sigma = torch.where(inside, torch.full_like(x[:, 0], sigma_in), torch.zeros_like(x[:, 0]))
        rgb = torch.stack([x[:, 0].sin() * 0.5 + 0.5, x[:, 1].cos() * 0.5 + 0.5, torch.full_like(x[:, 0], 0.3)], -1)
        return sigma, rgb
    return query


def test_pruning_zero_density_samples_is_bit_identical():
    cam = make_camera(t=(0.0, 0.0, 3.0))
    rows, cols = pixel_grid(cam)
    rays = generate_rays(cam, rows, cols)
    q = sphere_query((0.0, 0.0, 0.0), 0.5)
    samples = stratified_samples(rays.near, rays.far, 32)
    bg = torch.rand(len(rays), 3)
    full = render_rays(rays, q, samples, bg)
    pts = sample_points(rays, samples)
    samples.keep = q(pts.reshape(-1, 3))[0].reshape(pts.shape[:2]) > 0
    pruned = render_rays(rays, q, samples, bg)
    assert torch.equal(full.color, pruned.color)


def test_empty_model_renders_background():
    bg = np.random.default_rng(0).random((24, 32, 3))
    cam = make_camera(t=(0.0, 0.0, 3.0), background=bg)
    empty = lambda x: (torch.zeros(x.shape[0]), torch.rand(x.shape[0], 3))  # noqa: E731
    rgb, _ = render_image(cam, empty, 16)
    assert np.allclose(rgb.numpy(), bg, atol=1e-6)


def test_stride_subsamples_full_render():
    cam = make_camera(t=(0.0, 0.0, 3.0), background=np.full((24, 32, 3), 0.2))
    q = sphere_query((0.0, 0.0, 0.0), 0.4)
    full, dfull = render_image(cam, q, 32)
    half, dhalf = render_image(cam, q, 32, stride=2)
    assert half.shape == (12, 16, 3)
    assert torch.allclose(half, full[::2, ::2], atol=1e-6)
    assert torch.allclose(dhalf, dfull[::2, ::2], atol=1e-5)


def test_depth_of_opaque_plane_within_one_interval(f64):
    # fronto-parallel halfspace z >= 2.3 in front of an identity camera
    cam = make_camera(near=1.0, far=4.0, w=16, h=16, f=20.0)
    S = 48
    plane = lambda x: (torch.where(x[:, 2] >= 2.3, 1e4, 0.0), torch.ones(x.shape[0], 3))  # noqa: E731
    _, depth = render_image(cam, plane, S)
    rows, cols = pixel_grid(cam)
    dz = generate_rays(cam, rows, cols).directions[:, 2].reshape(16, 16)
    along_ray = 2.3 / dz
    assert float((depth - along_ray).abs().max()) < (cam.far - cam.near) / S


def test_expected_depth_empty_ray_is_zero():
    assert float(expected_depth(torch.zeros(1, 4), torch.rand(1, 4))) == 0.0


def test_image_io_round_trip(tmp_path):
    img = np.random.default_rng(1).random((6, 5, 3))
    write_rgb(tmp_path / "a.png", img)
    assert np.abs(read_rgb(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12
    d = np.linspace(2.0, 3.0, 30).reshape(6, 5)
    write_depth(tmp_path / "d.png", d)
    back = read_depth(tmp_path / "d.png")
    assert back.min() == 0.0 and back.max() == 1.0
    assert np.abs(back - (d - 2.0)).max() <= 0.5 / 65535 + 1e-12
