import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from planefield.errors import InputDomainError
from planefield.geometry import (Camera, Rays, generate_rays, look_at, pixel_grid, sample_along_ray,
                                 sample_along_rays)


def rot_z(deg):
    a = math.radians(deg)
    pose = np.eye(4)
    pose[:2, :2] = [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]
    return pose


def rot_y(deg):
    a = math.radians(deg)
    pose = np.eye(4)
    pose[0, 0], pose[0, 2], pose[2, 0], pose[2, 2] = math.cos(a), math.sin(a), -math.sin(a), math.cos(a)
    return pose


def test_center_pixel_looks_down_forward_axis():
    cam = Camera(8, 8, 10.0, np.eye(4))
    # with pixel centers at +0.5 the exact center sits between pixels for even sizes
    cam_odd = Camera(9, 9, 10.0, np.eye(4))
    rays = generate_rays(cam_odd, [(4, 4)], dtype=torch.float64)
    assert torch.allclose(rays.directions[0], torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64), atol=1e-12)
    rays = generate_rays(cam, [(4, 4)], dtype=torch.float64)
    assert rays.directions[0, 2] < -0.99


def test_corner_directions_are_symmetric():
    cam = Camera(6, 4, 5.0, np.eye(4))
    d = generate_rays(cam, [(0, 0), (0, 5), (3, 0), (3, 5)], dtype=torch.float64).directions
    tl, tr, bl, br = d
    assert torch.allclose(tl[0], -tr[0]) and torch.allclose(tl[1], tr[1])
    assert torch.allclose(tl[1], -bl[1]) and torch.allclose(tl, -br * torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64))


def test_rotation_about_up_axis_rotates_center_ray():
    cam0 = Camera(9, 9, 10.0, np.eye(4))
    pose = rot_y(90)
    cam1 = Camera(9, 9, 10.0, pose)
    d0 = generate_rays(cam0, [(4, 4)], dtype=torch.float64).directions[0].numpy()
    d1 = generate_rays(cam1, [(4, 4)], dtype=torch.float64).directions[0].numpy()
    assert np.allclose(pose[:3, :3] @ d0, d1, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-180, 180), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
       st.integers(0, 6), st.integers(0, 4))
def test_rigid_equivariance(angle, tx, ty, tz, col, row):
    pose = rot_z(angle) @ rot_y(angle / 3)
    pose[:3, 3] = [tx, ty, tz]
    base = generate_rays(Camera(7, 5, 4.0, np.eye(4)), [(row, col)], dtype=torch.float64)
    moved = generate_rays(Camera(7, 5, 4.0, pose), [(row, col)], dtype=torch.float64)
    assert np.allclose(pose[:3, :3] @ base.directions[0].numpy(), moved.directions[0].numpy(), atol=1e-6)
    assert np.allclose(moved.origins[0].numpy(), pose[:3, 3], atol=1e-12)
    assert abs(float(moved.directions[0].norm()) - 1) < 1e-6


def test_pixel_out_of_bounds():
    cam = Camera(4, 4, 2.0, np.eye(4))
    with pytest.raises(InputDomainError):
        generate_rays(cam, [(4, 0)])
    with pytest.raises(InputDomainError):
        generate_rays(cam, [(0, -1)])


def test_camera_validation():
    with pytest.raises(InputDomainError):
        Camera(4, 4, 0.0, np.eye(4))
    with pytest.raises(InputDomainError):
        Camera(0, 4, 1.0, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(InputDomainError):
        Camera(4, 4, 1.0, bad)


def test_pixel_grid_row_major():
    assert pixel_grid(2, 3).tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]


def _ray():
    return torch.zeros(3, dtype=torch.float64), torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)


def test_midpoints_example():
    # near must be positive, so the [0, 4] example is checked via its shift
    o, d = _ray()
    s = sample_along_ray(o, d, 1.0, 5.0, 4)
    assert torch.allclose(s.t, torch.tensor([1.5, 2.5, 3.5, 4.5], dtype=torch.float64))
    assert torch.allclose(s.delta, torch.ones(4, dtype=torch.float64))
    s = sample_along_ray(o, d, 1.0, 3.0, 2)
    assert s.t.tolist() == [1.5, 2.5] and s.delta.tolist() == [1.0, 1.0]
    assert torch.allclose(s.q[:, 2], s.t)


def test_near_zero_rejected():
    o, d = _ray()
    with pytest.raises(InputDomainError):
        sample_along_ray(o, d, 0.0, 4.0, 4)
    with pytest.raises(InputDomainError):
        sample_along_ray(o, d, 3.0, 3.0, 4)
    with pytest.raises(InputDomainError):
        sample_along_ray(o, d, 1.0, 3.0, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5), st.floats(0.01, 10), st.integers(2, 64), st.integers(0, 2**31), st.booleans())
def test_bins_and_interval_sum(near, span, count, seed, stratified):
    far = near + span
    o, d = _ray()
    g = torch.Generator().manual_seed(seed)
    s = sample_along_ray(o, d, near, far, count, stratified, g)
    w = (far - near) / count
    lower = near + w * torch.arange(count, dtype=torch.float64)
    assert bool((s.t >= lower - 1e-12).all()) and bool((s.t < lower + w + 1e-12).all())
    assert bool((s.delta > 0).all())
    assert bool((s.t[1:] > s.t[:-1]).all())
    assert abs(float(s.delta.sum()) - (far - near)) < 1e-9


def test_stratified_deterministic():
    o, d = _ray()
    a = sample_along_ray(o, d, 1.0, 3.0, 8, True, torch.Generator().manual_seed(5))
    b = sample_along_ray(o, d, 1.0, 3.0, 8, True, torch.Generator().manual_seed(5))
    assert torch.equal(a.t, b.t)


def test_stratified_mean_is_midpoint():
    # 10^4 seeds, batched as rays sharing one generator
    n = 10_000
    rays = Rays(torch.zeros(n, 3, dtype=torch.float64), torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).repeat(n, 1))
    s = sample_along_rays(rays, 2.0, 6.0, 4, True, torch.Generator().manual_seed(0))
    mid = sample_along_rays(rays[:1], 2.0, 6.0, 4, False)
    width = 1.0
    assert float((s.t.mean(0) - mid.t[0]).abs().max()) < 0.01 * width


def test_look_at_points_camera_at_target():
    pose = look_at([2.0, 0.0, 0.5])
    cam = Camera(9, 9, 5.0, pose)
    d = generate_rays(cam, [(4, 4)], dtype=torch.float64).directions[0].numpy()
    to_target = -pose[:3, 3] / np.linalg.norm(pose[:3, 3])
    assert np.allclose(d, to_target, atol=1e-9)
