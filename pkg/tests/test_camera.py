import math

import numpy as np
import pytest

from geoservo.camera import (CameraModel, EmptyViewError, Scene, _raycast_loop, _raycast_numpy, raycast_depths,
                             render_depth)
from geoservo.lie import Pose, Twist, exp_twist
from geoservo.robot import forward_kinematics
from geoservo.sim import build_scene


def wall(distance=1.0, extent=(10.0, 10.0), hole_center=(4.0, 4.0), hole_size=(0.1, 0.1)):
    return Scene(Pose.from_translation([0, 0, distance]), extent, hole_center, hole_size)


def count_in(lo, hi, n, strict=False):
    """Integers k in [0, n) with lo <= k <= hi (or lo < k < hi)."""
    if strict:
        first, last = math.floor(lo) + 1, math.ceil(hi) - 1
    else:
        first, last = math.ceil(lo), math.floor(hi)
    return max(0, min(n - 1, last) - max(0, first) + 1)


def test_scene_validation():
    with pytest.raises(ValueError):
        Scene(Pose.identity(), (0.5, 0.5), (0.22, 0.0), (0.1, 0.1))
    with pytest.raises(ValueError):
        Scene(Pose.identity(), (0.5, -0.5), (0.0, 0.0), (0.1, 0.1))
    s = wall()
    assert list(s.contains([[0, 0], [4.0, 4.0], [6.0, 0]])) == [True, False, False]


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(resolution=(7, 24))
    with pytest.raises(ValueError):
        CameraModel(focal=0.0)
    cam = CameraModel()
    assert cam.principal_point == (16.0, 12.0)


def test_orthogonal_wall_at_one_meter():
    cloud = render_depth(wall(), CameraModel(), Pose.identity())
    assert len(cloud) == 32 * 24
    assert np.all(cloud.points[:, 2] == 1.0)
    assert np.isclose(cloud.weights.sum(), 1.0) and np.all(cloud.weights == cloud.weights[0])


def test_wall_beyond_range():
    with pytest.raises(EmptyViewError):
        render_depth(wall(distance=3.0), CameraModel(max_range=2.0), Pose.identity())
    with pytest.raises(EmptyViewError):
        # looking away from the wall
        render_depth(wall(), CameraModel(), exp_twist(Twist(np.zeros(3), [1, 0, 0]), math.pi / 1.01))


def test_visible_count_at_target(base_config, setups):
    _, target, _, _ = setups[1]
    cam = base_config.camera
    scene = build_scene(base_config, target.g_star)
    cloud = render_depth(scene, cam, target.g_star)
    # the plane is frontal at depth z0 in the target camera frame
    z0 = base_config.plane_offset[2]
    (n, m), f = cam.resolution, cam.focal
    cx, cy = cam.principal_point
    ex, ey = scene.plane_extent / 2
    hx, hy = scene.hole_center
    sx, sy = scene.hole_size / 2

    def pix(lo, hi, c):
        # pixel k sees in-plane coordinate z0 (k + 0.5 - c) / f
        return lo * f / z0 + c - 0.5, hi * f / z0 + c - 0.5

    cols = count_in(*pix(-ex, ex, cx), n)
    rows = count_in(*pix(-ey, ey, cy), m)
    hole_cols = count_in(*pix(hx - sx, hx + sx, cx), n, strict=True)
    hole_rows = count_in(*pix(hy - sy, hy + sy, cy), m, strict=True)
    assert len(cloud) == cols * rows - hole_cols * hole_rows
    assert np.allclose(cloud.points[:, 2], z0)


def test_points_back_project_onto_plane(base_config, setups):
    _, target, _, q0 = setups[2]
    scene = build_scene(base_config, target.g_star)
    g0 = forward_kinematics(setups[2][0], q0)
    cloud = render_depth(scene, base_config.camera, g0)
    local = scene.plane_pose.inverse().act(cloud.world_points)
    assert np.allclose(local[:, 2], 0.0, atol=1e-12)
    assert np.all(scene.contains(local[:, :2]))


def test_raycast_backends_agree(rng):
    scene = Scene(exp_twist(Twist([0.1, 0, 0.8], [0.1, -0.2, 0.05]), 1.0), (0.6, 0.4), (0.05, -0.02), (0.1, 0.08))
    cam = CameraModel((40, 30), 20.0)
    for _ in range(20):
        g = exp_twist(Twist(0.05 * rng.standard_normal(3), 0.1 * rng.standard_normal(3)), 1.0)
        pixels, dirs = cam.ray_directions()
        args = (dirs, g.R.copy(), g.p.copy(), scene.plane_pose.R.copy(), scene.plane_pose.p.copy(),
                scene.plane_extent / 2, scene.hole_center, scene.hole_size / 2, cam.max_range)
        a, b = _raycast_loop(*args), _raycast_numpy(*args)
        assert np.array_equal(np.isnan(a), np.isnan(b))
        assert np.allclose(a[~np.isnan(a)], b[~np.isnan(b)], rtol=1e-14)
    depth, px = raycast_depths(scene, cam, Pose.identity())
    assert depth.shape == (1200,) and px.shape == (1200, 2)


def test_depth_noise_needs_generator_and_is_seeded():
    with pytest.raises(ValueError):
        render_depth(wall(), CameraModel(), Pose.identity(), noise_std=0.01)
    a = render_depth(wall(), CameraModel(), Pose.identity(), 0.01, np.random.default_rng(7))
    b = render_depth(wall(), CameraModel(), Pose.identity(), 0.01, np.random.default_rng(7))
    assert np.array_equal(a.points, b.points)
    assert not np.all(a.points[:, 2] == 1.0)
