import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2orm.geometry import (BEHIND, HIT, PARALLEL, BehindCamera, CameraIntrinsics, InvalidDepth, ParallelRay, Ray,
                            TangentPlane, backproject, backproject_map, mid_pixel, orient_normals, project,
                            ray_plane_distance, ray_plane_distances, ray_through_pixel, raydist_to_zdepth,
                            zdepth_to_raydist)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 0, 0, 1, 4)
    K = CameraIntrinsics.from_fov()
    assert K.shape == (480, 640)
    assert K.fx == pytest.approx(320 / math.tan(math.radians(30)))


def test_principal_ray(K):
    assert np.allclose(ray_through_pixel((K.cx, K.cy), K).vector, (0, 0, 1))


def test_ray_arithmetic():
    K = CameraIntrinsics(100, 100, 0, 0, 200, 200)
    assert np.allclose(ray_through_pixel((100, 0), K).vector, np.array([1, 0, 1]) / math.sqrt(2))


def test_mid_pixel_ray(K):
    p, q = (K.cx, K.cy), (K.cx + 2, K.cy)
    assert np.allclose(ray_through_pixel(mid_pixel(p, q), K).vector, ray_through_pixel((K.cx + 1, K.cy), K).vector)


def test_ray_must_be_unit():
    with pytest.raises(ValueError):
        Ray((0, 0, 2))


def test_tangent_plane_orientation():
    pl = TangentPlane((0, 0, 2), (0, 0, 1))
    assert pl.normal == (0, 0, -1)
    with pytest.raises(ValueError):
        TangentPlane((0, 0, 2), (0, 0, 0.5))


def test_zdepth_examples():
    K = CameraIntrinsics.from_fov(8, 6)
    z = np.full(K.shape, 2.0)
    d = zdepth_to_raydist(z, K)
    K1 = CameraIntrinsics(1, 1, 0, 0, 3, 3)
    d1 = zdepth_to_raydist(np.full((3, 3), 2.0), K1)
    assert d1[0, 1] == pytest.approx(2 * math.sqrt(2))
    Kc = CameraIntrinsics(10, 10, 2, 2, 5, 5)
    assert zdepth_to_raydist(np.full((5, 5), 2.0), Kc)[2, 2] == 2.0
    assert np.allclose(raydist_to_zdepth(d, K), z)


def test_zdepth_invalid_counted():
    K = CameraIntrinsics.from_fov(4, 4)
    z = np.full((4, 4), 1.0)
    z[0, 0] = -1
    z[1, 1] = 0
    z[2, 2] = np.nan
    with pytest.warns(UserWarning):
        d, n = zdepth_to_raydist(z, K, return_count=True)
    assert n == 2
    assert np.isnan(d[0, 0]) and np.isnan(d[1, 1]) and np.isnan(d[2, 2])
    assert np.isfinite(d).sum() == 13


def test_fronto_roundtrip(K):
    z = np.full(K.shape, 2.5)
    X = backproject_map(zdepth_to_raydist(z, K), K)
    assert np.max(np.abs(X[..., 2] - 2.5)) < 1e-9


def test_backproject_examples(K):
    assert np.allclose(backproject((K.cx, K.cy), 3.0, K), (0, 0, 3))
    with pytest.raises(InvalidDepth):
        backproject((1, 1), 0.0, K)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.uniform(0, [K.width - 1, K.height - 1])
        d = rng.uniform(0.1, 50)
        assert abs(np.linalg.norm(backproject(p, d, K)) - d) <= 1e-9 * d


def test_backproject_project_identity(K):
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = rng.uniform(0, [K.width - 1, K.height - 1])
        X = backproject(p, rng.uniform(0.5, 20), K)
        assert np.allclose(project(X, K), p, atol=1e-9)
    with pytest.raises(BehindCamera):
        project((0, 0, -1), K)


def test_ray_plane_examples():
    pl = TangentPlane((0, 0, 2), (0, 0, -1))
    assert ray_plane_distance(Ray((0, 0, 1)), pl) == pytest.approx(2)
    assert ray_plane_distance(Ray(tuple(np.array([1, 0, 1]) / math.sqrt(2))), pl) == pytest.approx(2 * math.sqrt(2))
    with pytest.raises(ParallelRay):
        ray_plane_distance(Ray((1, 0, 0)), pl)
    with pytest.raises(BehindCamera):
        ray_plane_distance(Ray((0, 0, 1)), TangentPlane((0, 0, -2), (0, 0, 1)))


def test_ray_plane_residuals():
    rng = np.random.default_rng(2)
    dirs = rng.normal(size=(10_000, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.1
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = rng.uniform(-1, 1, (10_000, 3)) + [0, 0, 3]
    nrm = rng.normal(size=(10_000, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    t, status = ray_plane_distances(dirs, pts, nrm)
    hit = status == HIT
    assert hit.sum() > 1000
    res = np.abs(np.sum(nrm[hit] * (t[hit, None] * dirs[hit] - pts[hit]), axis=1))
    assert res.max() < 1e-7
    assert np.isnan(t[~hit]).all()


def test_vectorized_status_codes():
    t, s = ray_plane_distances([[1, 0, 0], [0, 0, 1], [0, 0, 1]], [[0, 0, 2]] * 3,
                               [[0, 0, -1], [0, 0, -1], [0, 0, 1]])
    assert list(s) == [PARALLEL, HIT, HIT]
    t, s = ray_plane_distances([0, 0, 1], [0, 0, -2], [0, 0, 1])
    assert s == BEHIND and np.isnan(t)


unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.2)


@settings(max_examples=200, deadline=None)
@given(unit3, st.floats(0.1, 10), st.floats(0.1, 10), st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5)))
def test_homogeneous_in_plane_point(n, z, s, xy):
    n = np.asarray(n) / np.linalg.norm(n)
    pl = TangentPlane.from_arrays((xy[0], xy[1], z), n)
    scaled = TangentPlane.from_arrays(tuple(s * np.asarray(pl.point)), pl.normal)
    ray = Ray((0.0, 0.0, 1.0))
    try:
        t = ray_plane_distance(ray, pl)
    except (ParallelRay, BehindCamera):
        return
    assert ray_plane_distance(ray, scaled) == pytest.approx(s * t, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 639), st.floats(0, 479), st.floats(0.2, 30), unit3)
def test_own_tangent_plane_distance(x, y, d, n):
    K = CameraIntrinsics.from_fov()
    X = backproject((x, y), d, K)
    n = orient_normals(np.asarray(n, dtype=float), X)
    if abs(np.dot(n, X / d)) < 1e-3:
        return
    assert ray_plane_distance(ray_through_pixel((x, y), K), TangentPlane.from_arrays(X, n)) == pytest.approx(d, rel=1e-6)


def test_orient_normals_faces_camera():
    rng = np.random.default_rng(3)
    n = rng.normal(size=(50, 3))
    X = rng.normal(size=(50, 3)) + [0, 0, 5]
    out = orient_normals(n, X)
    assert (np.sum(out * X, axis=1) <= 0).all()
    assert np.allclose(np.linalg.norm(out, axis=1), 1)
