"""Pinhole camera model, pixel rays, tangent planes and ray/plane intersections.

Conventions used throughout the package:

* the camera center is the origin, the optical axis is +z, image x points
  right and image y points down;
* pixel centers sit at integer coordinates, arrays are indexed ``[y, x]``;
* depth maps hold ray distances ``d_p = ||X_p||`` (not z-depth), with NaN
  marking invalid pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

PARALLEL_EPS = 1e-8

# status codes returned by the vectorized intersection routine
HIT = 0
PARALLEL = 1
BEHIND = 2


class NoIntersection(Exception):
    """Raised when a ray does not meet a plane in front of the camera."""


class ParallelRay(NoIntersection):
    pass


class BehindCamera(NoIntersection):
    pass


class InvalidDepth(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image must be at least 2x2, got {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int = 640, height: int = 480, hfov_deg: float = 60.0):
        """Square pixels, principal point at the image center."""
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer pixel-center coordinates ``(xs, ys)`` of shape (H, W)."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return xs.astype(np.float64), ys.astype(np.float64)

    def unnormalized_rays(self, x, y) -> np.ndarray:
        """Ray directions scaled to unit z, shape ``(..., 3)``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return np.stack(
            [(x - self.cx) / self.fx, (y - self.cy) / self.fy, np.ones_like(x)], axis=-1
        )

    def rays(self, x, y) -> np.ndarray:
        r = self.unnormalized_rays(x, y)
        return r / np.linalg.norm(r, axis=-1, keepdims=True)

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions through every pixel center, shape (H, W, 3)."""
        return self.rays(*self.pixel_grid())


@dataclass(frozen=True)
class Ray:
    direction: tuple[float, float, float]

    def __post_init__(self):
        n = math.sqrt(sum(c * c for c in self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got norm {n}")

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=np.float64)


@dataclass(frozen=True)
class TangentPlane:
    """Plane through ``point`` with unit ``normal`` facing the camera."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"plane normal must be unit length, got norm {norm}")
        if float(n @ np.asarray(self.point, dtype=np.float64)) > 0:
            object.__setattr__(self, "normal", tuple(-n))

    @classmethod
    def from_arrays(cls, point, normal):
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(tuple(float(c) for c in point), tuple(float(c) for c in n))


def ray_through_pixel(p, K: CameraIntrinsics) -> Ray:
    """Unit ray from the camera center through (possibly sub-pixel) point ``p = (x, y)``."""
    d = K.rays(p[0], p[1])
    return Ray(tuple(float(c) for c in d))


def mid_pixel(p, q) -> tuple[float, float]:
    return ((p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0)


def backproject(p, d: float, K: CameraIntrinsics) -> np.ndarray:
    if not d > 0:
        raise InvalidDepth(f"ray distance must be positive, got {d}")
    return d * ray_through_pixel(p, K).vector


def project(X, K: CameraIntrinsics) -> tuple[float, float]:
    """Pixel coordinates of a 3D point in front of the camera."""
    X = np.asarray(X, dtype=np.float64)
    if not X[2] > 0:
        raise BehindCamera(f"point {X} is not in front of the camera")
    return (K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy)


def backproject_map(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """3D points for a whole ray-distance map, shape (H, W, 3); NaN where invalid."""
    return depth[..., None] * K.pixel_rays()


def zdepth_to_raydist(z: np.ndarray, K: CameraIntrinsics, return_count: bool = False):
    """Convert plane (z) depth into ray distance.

    Non-finite pixels stay invalid; finite non-positive values are marked
    invalid as well and counted (a warning is emitted when any are found).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != K.shape:
        raise ValueError(f"depth shape {z.shape} does not match camera {K.shape}")
    bad = np.isfinite(z) & (z <= 0)
    n_bad = int(bad.sum())
    if n_bad:
        warnings.warn(f"{n_bad} pixels with non-positive depth marked invalid", stacklevel=2)
    scale = np.linalg.norm(K.unnormalized_rays(*K.pixel_grid()), axis=-1)
    d = np.where(bad | ~np.isfinite(z), np.nan, z * scale)
    if return_count:
        return d, n_bad
    return d


def raydist_to_zdepth(d: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return d * K.pixel_rays()[..., 2]


def ray_plane_distance(L: Ray, plane: TangentPlane) -> float:
    """Distance from the camera center to the intersection of ``L`` with ``plane``.

    Raises ParallelRay or BehindCamera when there is no valid intersection.
    """
    n = np.asarray(plane.normal, dtype=np.float64)
    denom = float(n @ L.vector)
    if abs(denom) < PARALLEL_EPS:
        raise ParallelRay("ray is parallel to the plane")
    t = float(n @ np.asarray(plane.point, dtype=np.float64)) / denom
    if t <= 0:
        raise BehindCamera(f"intersection at t={t} is behind the camera")
    return t


def ray_plane_distances(dirs, points, normals):
    """Vectorized intersection distances.

    ``dirs`` must be unit vectors; all arguments broadcast over leading axes
    and end in a length-3 axis.  Returns ``(t, status)`` where ``t`` is NaN
    unless ``status == HIT``.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    denom = np.sum(normals * dirs, axis=-1)
    num = np.sum(normals * points, axis=-1)
    parallel = ~(np.abs(denom) >= PARALLEL_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / np.where(parallel, 1.0, denom)
    behind = ~parallel & ~(t > 0)
    status = np.where(parallel, PARALLEL, np.where(behind, BEHIND, HIT)).astype(np.int8)
    t = np.where(status == HIT, t, np.nan)
    return t, status


def orient_normals(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Normalize and flip normals so that ``n . X <= 0`` (facing the camera)."""
    n = np.asarray(normals, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    flip = np.sum(n * points, axis=-1) > 0
    return np.where(flip[..., None], -n, n)
