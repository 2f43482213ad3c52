"""Synthetic pinhole depth camera over a planar scene with a rectangular hole.

The camera frame is the end-effector frame: z looks along the optical
axis, x to the right along image columns, y down along image rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from ._accel import njit
from .lie import Pose
from .transport import DepthCloud


class EmptyViewError(RuntimeError):
    """No pixel of the camera sees the plane."""


@dataclass(frozen=True, eq=False)
class Scene:
    plane_pose: Pose            # plane frame; the plane is its z = 0 slice
    plane_extent: tuple         # full width and height in meters
    hole_center: np.ndarray     # in-plane (x, y), meters
    hole_size: np.ndarray       # full width and height, meters

    def __post_init__(self):
        ext = np.array(self.plane_extent, dtype=float).reshape(2)
        hc = np.array(self.hole_center, dtype=float).reshape(2)
        hs = np.array(self.hole_size, dtype=float).reshape(2)
        if np.any(ext <= 0) or np.any(hs <= 0):
            raise ValueError("plane extent and hole size must be positive")
        if np.any(np.abs(hc) + hs / 2 >= ext / 2):
            raise ValueError("hole must lie strictly inside the plane")
        object.__setattr__(self, "plane_extent", ext)
        object.__setattr__(self, "hole_center", hc)
        object.__setattr__(self, "hole_size", hs)

    def contains(self, xy) -> np.ndarray:
        """True where in-plane points hit solid surface (inside extent, outside hole)."""
        xy = np.atleast_2d(xy)
        inside = np.all(np.abs(xy) <= self.plane_extent / 2, axis=1)
        in_hole = np.all(np.abs(xy - self.hole_center) < self.hole_size / 2, axis=1)
        return inside & ~in_hole


@dataclass(frozen=True)
class CameraModel:
    resolution: tuple = (32, 24)     # (columns n, rows m)
    focal: float = 16.0
    principal_point: tuple = None    # defaults to the image centre
    max_range: float = 2.0

    def __post_init__(self):
        n, m = (int(r) for r in self.resolution)
        if n < 8 or m < 8:
            raise ValueError("resolution must be at least 8 x 8")
        if not (self.focal > 0 and self.max_range > 0):
            raise ValueError("focal length and max range must be positive")
        object.__setattr__(self, "resolution", (n, m))
        pp = (n / 2.0, m / 2.0) if self.principal_point is None else tuple(float(c) for c in self.principal_point)
        object.__setattr__(self, "principal_point", pp)

    def ray_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel indices (u, v) and camera-frame rays through pixel centres with unit z."""
        n, m = self.resolution
        v, u = np.mgrid[0:m, 0:n]
        u, v = u.ravel(), v.ravel()
        d = np.stack([(u + 0.5 - self.principal_point[0]) / self.focal,
                      (v + 0.5 - self.principal_point[1]) / self.focal,
                      np.ones(u.size)], axis=1)
        return np.stack([u, v], axis=1), d


@njit
def _raycast_loop(dirs, R, o, plane_R, plane_o, half_ext, hole_c, hole_half, max_range):
    k = dirs.shape[0]
    depth = np.full(k, np.nan)
    nrm = plane_R[:, 2]
    for i in range(k):
        dw = R @ dirs[i]
        denom = nrm[0] * dw[0] + nrm[1] * dw[1] + nrm[2] * dw[2]
        if abs(denom) < 1e-12:
            continue
        t = (nrm[0] * (plane_o[0] - o[0]) + nrm[1] * (plane_o[1] - o[1]) + nrm[2] * (plane_o[2] - o[2])) / denom
        if t <= 0.0 or t > max_range:
            continue
        hit = o + t * dw - plane_o
        x = plane_R[0, 0] * hit[0] + plane_R[1, 0] * hit[1] + plane_R[2, 0] * hit[2]
        y = plane_R[0, 1] * hit[0] + plane_R[1, 1] * hit[1] + plane_R[2, 1] * hit[2]
        if abs(x) > half_ext[0] or abs(y) > half_ext[1]:
            continue
        if abs(x - hole_c[0]) < hole_half[0] and abs(y - hole_c[1]) < hole_half[1]:
            continue
        depth[i] = t
    return depth


def _raycast_numpy(dirs, R, o, plane_R, plane_o, half_ext, hole_c, hole_half, max_range):
    dw = dirs @ R.T
    nrm = plane_R[:, 2]
    denom = dw @ nrm
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((plane_o - o) @ nrm) / denom
    ok = (np.abs(denom) >= 1e-12) & (t > 0.0) & (t <= max_range)
    xy = (o + t[:, None] * dw - plane_o) @ plane_R[:, :2]
    ok &= np.all(np.abs(xy) <= half_ext, axis=1)
    ok &= ~np.all(np.abs(xy - hole_c) < hole_half, axis=1)
    return np.where(ok, t, np.nan)


def raycast_depths(scene: Scene, cam: CameraModel, g: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel depth (NaN where the ray misses) and the pixel index array."""
    pixels, dirs = cam.ray_directions()
    args = (np.ascontiguousarray(dirs), np.ascontiguousarray(g.R), np.ascontiguousarray(g.p),
            np.ascontiguousarray(scene.plane_pose.R), np.ascontiguousarray(scene.plane_pose.p),
            scene.plane_extent / 2, scene.hole_center, scene.hole_size / 2, float(cam.max_range))
    depth = _raycast_loop(*args) if _accel.NUMBA_ENABLED else _raycast_numpy(*args)
    return depth, pixels


def render_depth(scene: Scene, cam: CameraModel, g: Pose, noise_std: float = 0.0,
                 rng: np.random.Generator | None = None) -> DepthCloud:
    """Depth cloud seen from camera pose ``g`` with uniform atom weights.

    ``noise_std`` adds Gaussian depth noise drawn from ``rng`` (an explicit
    generator is required so runs stay reproducible).
    """
    depth, pixels = raycast_depths(scene, cam, g)
    seen = np.isfinite(depth)
    if not seen.any():
        raise EmptyViewError("no pixel sees the plane")
    _, dirs = cam.ray_directions()
    z = depth[seen]
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("depth noise needs an explicit random generator")
        z = np.clip(z + noise_std * rng.standard_normal(z.size), 1e-6, cam.max_range)
    points = dirs[seen] * z[:, None]
    w = np.full(z.size, 1.0 / z.size)
    return DepthCloud(g, pixels[seen], points, w, cam.resolution, cam.max_range)
